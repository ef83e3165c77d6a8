"""Treatment effect estimation and ranking for right-censored
competing-risks outcomes, via inverse-probability-weighted outcomes fed
into a generalized random forest."""

from .dataset import (AnalysisConfig, ColumnSchema, Dataset, ObservedRecord,
                      load_csv, stratum_codes, stratum_key, write_csv)
from .effects import (EffectEstimate, RankingTable, Z95, direction_label,
                      rank_treatments, ranking_fraction, run_two_step)
from .forest import (CausalEffectForest, ForestAte, SplitCandidate, TreeNode,
                     best_split, grow_forest, label_pseudo_outcomes,
                     node_theta, phi_influence)
from .ipcw import (CurveSet, SurvivalCurve, WeightedOutcome, WeightedOutcomes,
                   build_crude_outcomes, build_net_outcomes, eval_left_limit,
                   fit_competing_km, fit_reverse_km)
from .simbench import (Covariate, LatentDraw, SimDesign, TreatmentSpec,
                       WeibullModel, cif_closed_form, default_design,
                       example1_contrasts, example1_design, oracle_true_ate,
                       registry_demo_design, run_coverage_experiment,
                       run_ranking_experiment, simulate_dataset,
                       simulate_latents, observe_latents)

__version__ = "0.1.0"

__all__ = [
    "AnalysisConfig", "CausalEffectForest", "ColumnSchema", "Covariate",
    "CurveSet", "Dataset", "EffectEstimate", "ForestAte", "LatentDraw",
    "ObservedRecord", "RankingTable", "SimDesign", "SplitCandidate",
    "SurvivalCurve", "TreatmentSpec", "TreeNode", "WeibullModel",
    "WeightedOutcome", "WeightedOutcomes", "Z95", "best_split",
    "build_crude_outcomes", "build_net_outcomes", "cif_closed_form",
    "default_design", "direction_label", "eval_left_limit",
    "example1_contrasts", "example1_design", "fit_competing_km",
    "fit_reverse_km", "grow_forest", "label_pseudo_outcomes", "load_csv",
    "node_theta", "observe_latents", "oracle_true_ate", "phi_influence",
    "rank_treatments", "ranking_fraction", "registry_demo_design",
    "run_coverage_experiment", "run_ranking_experiment", "run_two_step",
    "simulate_dataset", "simulate_latents", "stratum_codes", "stratum_key",
    "write_csv",
]
