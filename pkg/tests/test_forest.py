import numpy as np
import pytest

from survrank.dataset import AnalysisConfig
from survrank.errors import (ConfigurationError, DegenerateNeighborhoodError,
                             DegenerateNodeError)
from survrank.forest import (CausalEffectForest, best_split, grow_forest,
                             label_pseudo_outcomes, node_theta, phi_influence)
from survrank.simbench import example1_design, simulate_dataset

from _oracles import (brute_best_split, brute_kernel_weights, brute_rho,
                      brute_split_gain)


def _example1_node(n, seed):
    """Binary-treatment node data from the constant-hazard design."""
    ds = simulate_dataset(example1_design(), n, seed)
    a = ds.column("a1")
    y = (ds.time <= 1.0).astype(float) * (ds.status == 1)
    X = np.column_stack([ds.covariates, ds.column("a2")])
    return X, a, y.astype(float)


class TestNodeTheta:
    def test_difference_of_arm_means(self):
        assert node_theta([1, 1, 0, 0], [3, 1, 2, 0]) == pytest.approx(1.0)

    def test_constant_outcome_gives_zero(self):
        assert node_theta([1, 0, 1, 0], [5.0] * 4) == pytest.approx(0.0, abs=1e-12)

    def test_single_arm_degenerate(self):
        with pytest.raises(DegenerateNodeError):
            node_theta([1, 1, 1], [1.0, 2.0, 3.0])

    def test_shift_invariant_and_linear(self):
        rng = np.random.default_rng(5)
        a = (rng.random(50) < 0.4).astype(float)
        y = rng.normal(0, 2, 50)
        base = node_theta(a, y)
        assert node_theta(a, y + 7.3) == pytest.approx(base, rel=1e-9, abs=1e-12)
        assert node_theta(a, 3.0 * y) == pytest.approx(3.0 * base, rel=1e-9)


class TestPseudoOutcomes:
    def test_sum_to_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            n = int(rng.integers(4, 200))
            a = rng.integers(0, 2, n).astype(float)
            if a.min() == a.max():
                continue
            y = rng.normal(0, 3, n)
            rho = label_pseudo_outcomes(np.arange(n), a, y)
            assert abs(rho.sum()) <= 1e-10 * n

    def test_two_point_node_vanishes(self):
        rho = label_pseudo_outcomes([0, 1], [1.0, 0.0], [4.2, -1.7])
        np.testing.assert_allclose(rho, [0.0, 0.0], atol=1e-12)

    def test_matches_term_by_term_oracle(self):
        X, a, y = _example1_node(100, seed=21)
        members = np.arange(100)
        rho = label_pseudo_outcomes(members, a, y)
        oracle = brute_rho(members, a, y)
        for i in members:
            assert rho[i] == pytest.approx(oracle[i], rel=1e-10, abs=1e-12)

    def test_propagates_degenerate(self):
        with pytest.raises(DegenerateNodeError):
            label_pseudo_outcomes([0, 1], [1.0, 1.0], [1.0, 2.0])


class TestBestSplit:
    def test_recovers_constructed_boundary(self):
        hits = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            n = 200
            X = rng.uniform(0, 1, (n, 3))
            a = (rng.random(n) < 0.5).astype(float)
            tau = np.where(X[:, 0] > 0.5, 1.0, -1.0)
            y = a * tau + rng.normal(0, 0.3, n)
            cand = best_split(np.arange(n), a, y, X, [0, 1, 2], min_node_size=10)
            if cand is not None and cand.covariate == 0 and abs(cand.threshold - 0.5) < 0.15:
                hits += 1
        assert hits > 25

    def test_zero_pseudo_outcomes_give_none(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(0, 1, (12, 2))
        a = np.array([1.0, 0.0] * 6)
        y = np.full(12, 5.0)  # exact arithmetic: all pseudo-outcomes are 0
        assert best_split(np.arange(12), a, y, X, [0, 1], min_node_size=2) is None

    def test_too_small_node_gives_none(self):
        X = np.random.default_rng(0).uniform(0, 1, (6, 1))
        assert best_split(np.arange(6), [1, 0, 1, 0, 1, 0],
                          [1., 2., 3., 4., 5., 6.], X, [0],
                          min_node_size=4) is None

    def test_attains_brute_force_maximum(self):
        rng = np.random.default_rng(7)
        checked = 0
        for trial in range(300):
            n = int(rng.integers(4, 13))
            p = int(rng.integers(1, 3))
            X = np.round(rng.uniform(0, 1, (n, p)), 1)  # force value ties
            a = rng.integers(0, 2, n).astype(float)
            if a.min() == a.max():
                continue
            y = np.round(rng.normal(0, 1, n), 2)
            min_node = int(rng.integers(1, 3))
            cand = best_split(np.arange(n), a, y, X, list(range(p)), min_node)
            oracle = brute_best_split(np.arange(n), a, y, X, range(p), min_node)
            if oracle is None:
                assert cand is None or cand.gain <= 1e-12
                continue
            assert cand is not None
            rho = brute_rho(np.arange(n), a, y)
            attained = brute_split_gain(np.arange(n), rho, X,
                                        cand.covariate, cand.threshold)
            assert attained == pytest.approx(oracle[2], rel=1e-12, abs=1e-12)
            checked += 1
        assert checked > 150


def _toy_data(n=120, p=3, seed=1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, p))
    a = (rng.random(n) < 0.5).astype(float)
    y = a * (X[:, 0] - 0.3) + rng.normal(0, 0.5, n)
    return X, a, y


class TestGrowth:
    def test_identical_seed_identical_trees(self):
        X, a, y = _toy_data()
        f1 = CausalEffectForest(n_trees=16, random_state=9).fit(X, a, y)
        f2 = CausalEffectForest(n_trees=16, random_state=9).fit(X, a, y)
        np.testing.assert_array_equal(f1.feature_, f2.feature_)
        np.testing.assert_array_equal(f1.threshold_, f2.threshold_)
        np.testing.assert_array_equal(f1.est_work_, f2.est_work_)
        assert f1.average_effect() == f2.average_effect()

    def test_single_leaf_tree_predicts_node_theta(self):
        X, a, y = _toy_data(n=40)
        f = CausalEffectForest(n_trees=1, min_node_size=40, honesty=True,
                               subsample_fraction=1.0, ci_group_size=0,
                               random_state=2).fit(X, a, y)
        assert len(f.feature_) == 1
        _, ew = f.subsample_indices(0)
        expected = node_theta(a[ew], y[ew])
        np.testing.assert_allclose(f.predict(X[:5]), expected, rtol=1e-12)

    def test_honesty_halves_disjoint(self):
        X, a, y = _toy_data()
        f = CausalEffectForest(n_trees=12, random_state=0).fit(X, a, y)
        for b in range(f.n_trees_):
            sw, ew = f.subsample_indices(b)
            assert not set(sw) & set(ew)

    def test_leaves_meet_node_size_and_arm_invariants(self):
        X, a, y = _toy_data(n=200)
        f = CausalEffectForest(n_trees=20, min_node_size=5,
                               random_state=4).fit(X, a, y)
        for b in range(f.n_trees_):
            off = f.tree_offsets_[b]
            for local in range(f.tree_offsets_[b + 1] - off):
                if f.feature_[off + local] >= 0:
                    continue
                members = f.leaf_members(b, local)
                assert len(members) >= 5
                arms = a[members]
                assert arms.min() == 0.0 and arms.max() == 1.0

    def test_single_arm_data_rejected(self):
        X, a, y = _toy_data()
        with pytest.raises(ConfigurationError):
            CausalEffectForest(n_trees=2).fit(X, np.ones_like(a), y)

    def test_subsample_without_replacement_at_fraction(self):
        X, a, y = _toy_data(n=100)
        f = CausalEffectForest(n_trees=10, subsample_fraction=0.5,
                               random_state=3).fit(X, a, y)
        for b in range(10):
            sw, ew = f.subsample_indices(b)
            both = np.concatenate([sw, ew])
            assert len(both) == 50
            assert len(np.unique(both)) == 50

    def test_permuting_rows_with_matching_plan_preserves_ate(self):
        X, a, y = _toy_data(n=150)
        f1 = CausalEffectForest(n_trees=10, random_state=6).fit(X, a, y)
        perm = np.random.default_rng(8).permutation(150)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(150)
        plan = []
        for b in range(10):
            sw, ew = f1.subsample_indices(b)
            plan.append((inv[sw], inv[ew]))
        f2 = CausalEffectForest(n_trees=10, random_state=6).fit(
            X[perm], a[perm], y[perm], subsample_plan=plan)
        assert f2.average_effect().ate == pytest.approx(
            f1.average_effect().ate, rel=1e-9, abs=1e-12)


class TestKernelWeights:
    def test_sum_to_one_and_nonnegative(self):
        X, a, y = _toy_data()
        f = CausalEffectForest(n_trees=15, random_state=1).fit(X, a, y)
        rng = np.random.default_rng(0)
        for _ in range(10):
            alpha = f.kernel_weights(rng.uniform(0, 1, 3))
            assert abs(alpha.sum() - 1.0) <= 1e-12
            assert np.all(alpha >= 0)

    def test_matches_brute_force_small_forest(self):
        rng = np.random.default_rng(11)
        n = 20
        X = rng.uniform(0, 1, (n, 2))
        a = np.array([1.0, 0.0] * 10)
        y = rng.normal(0, 1, n)
        plan = [(np.arange(0, 10), np.arange(10, 20)),
                (np.arange(5, 15), np.concatenate([np.arange(0, 5),
                                                   np.arange(15, 20)])),
                (np.arange(n), np.arange(n))]
        f = CausalEffectForest(n_trees=3, min_node_size=2, ci_group_size=0,
                               honesty=False, random_state=5).fit(
            X, a, y, subsample_plan=plan)
        for x in X[:6]:
            np.testing.assert_allclose(f.kernel_weights(x),
                                       brute_kernel_weights(f, x),
                                       rtol=0, atol=1e-15)

    def test_routing_is_deterministic(self):
        X, a, y = _toy_data()
        f = CausalEffectForest(n_trees=5, random_state=2).fit(X, a, y)
        l1 = f._route(X[:20])
        l2 = f._route(X[:20])
        np.testing.assert_array_equal(l1, l2)


class TestLocalEstimates:
    def test_uniform_weights_reduce_to_node_theta(self):
        a = np.array([1.0, 1.0, 0.0, 0.0])
        y = np.array([3.0, 1.0, 2.0, 0.0])
        X = np.arange(4, dtype=float).reshape(-1, 1)
        plan = [(np.arange(4), np.arange(4))] * 2
        f = CausalEffectForest(n_trees=2, min_node_size=4, honesty=False,
                               ci_group_size=0, random_state=0).fit(
            X, a, y, subsample_plan=plan)
        np.testing.assert_allclose(f.predict(X), 1.0, rtol=1e-12)

    def test_constant_outcome_gives_zero_effect(self):
        X, a, _ = _toy_data(n=60)
        f = CausalEffectForest(n_trees=10, random_state=3).fit(
            X, a, np.full(60, 2.0))
        np.testing.assert_allclose(f.predict(X[:8]), 0.0, atol=1e-12)

    def test_degenerate_neighborhood_raises(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(0, 1, (20, 1))
        a = np.array([1.0] * 10 + [0.0] * 10)
        y = rng.normal(0, 1, 20)
        # estimation half holds a single arm; patched up to a root whose
        # estimation range is still single-arm
        plan = [(np.arange(20), np.arange(0, 10))]
        f = CausalEffectForest(n_trees=1, min_node_size=3, ci_group_size=0,
                               random_state=0).fit(X, a, y, subsample_plan=plan)
        with pytest.raises(DegenerateNeighborhoodError):
            f.predict(X[:2])


class TestGroveVariance:
    def test_duplicate_trees_give_zero_variance(self):
        X, a, y = _toy_data(n=80)
        plan = [(np.arange(0, 40), np.arange(40, 80))] * 8
        f = CausalEffectForest(n_trees=8, min_node_size=5, mtry=3,
                               ci_group_size=4, random_state=0).fit(
            X, a, y, subsample_plan=plan)
        th = f.predict(f.X_)
        assert np.ptp(f.threshold_[:len(f.threshold_) // 8]) >= 0  # smoke
        _, se = f.predict_with_se(X[:3])
        np.testing.assert_allclose(se, 0.0, atol=1e-12)

    def test_variance_absent_without_groups(self):
        X, a, y = _toy_data()
        f = CausalEffectForest(n_trees=8, ci_group_size=0,
                               random_state=1).fit(X, a, y)
        assert f.average_effect().se is None

    def test_variance_absent_with_single_group(self):
        X, a, y = _toy_data()
        f = CausalEffectForest(n_trees=4, ci_group_size=4,
                               random_state=1).fit(X, a, y)
        assert f.average_effect().se is None

    def test_pointwise_se_shrinks_with_n(self):
        ses = {}
        x0 = np.full((1, 3), 0.5)
        for n in (500, 2000):
            vals = []
            for rep in range(12):
                X, a, y = _toy_data(n=n, seed=100 + rep)
                f = CausalEffectForest(n_trees=80, random_state=rep).fit(X, a, y)
                vals.append(f.predict_with_se(x0)[1][0])
            ses[n] = float(np.median(vals))
        assert ses[2000] < ses[500]

    def test_subsample_fraction_capped_with_groups(self):
        X, a, y = _toy_data()
        with pytest.raises(ConfigurationError):
            CausalEffectForest(n_trees=8, subsample_fraction=0.8,
                               ci_group_size=4).fit(X, a, y)


class TestPhiInfluence:
    def test_zero_residual_gives_zero(self):
        assert phi_influence(y=1.0, a=1, pi=0.4, m_bar=1.0, theta=0.7) == 0.0

    def test_direct_substitution(self):
        assert phi_influence(y=2.0, a=1, pi=0.5, m_bar=1.0, theta=0.3) == \
            pytest.approx(2.0)

    def test_two_forms_agree_on_random_tuples(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            y = rng.normal(0, 3)
            a = int(rng.random() < 0.5)
            pi = rng.uniform(0.05, 0.95)
            m_bar = rng.normal(0, 3)
            theta = rng.normal(0, 2)
            f1 = (a / pi - (1 - a) / (1 - pi)) * (y - m_bar)
            assert abs(phi_influence(y, a, pi, m_bar, theta) - f1) < 1e-10

    def test_propensity_domain_error(self):
        with pytest.raises(ValueError):
            phi_influence(1.0, 1, 0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            phi_influence(1.0, 0, 1.0, 0.0, 0.0)


class TestSerialization:
    def test_save_load_roundtrip(self, tmp_path):
        X, a, y = _toy_data()
        f = CausalEffectForest(n_trees=12, random_state=3).fit(X, a, y)
        path = tmp_path / "model.npz"
        f.save(path)
        g = CausalEffectForest.load(path)
        np.testing.assert_array_equal(f.predict(X[:10]), g.predict(X[:10]))
        assert f.average_effect() == g.average_effect()


def test_benchmark_forest_fits_inside_time_budget():
    import time

    from survrank.simbench import default_design

    ds = simulate_dataset(default_design(), 500, seed=0)
    X = np.column_stack([ds.covariates, ds.treatments[:, 1:].astype(float)])
    a = ds.treatments[:, 0].astype(float)
    y = ((ds.time <= 0.5) & (ds.status == 1)).astype(float)
    CausalEffectForest(n_trees=2, random_state=0).fit(X, a, y)  # warm jit
    t0 = time.time()
    forest = CausalEffectForest(n_trees=200, random_state=0).fit(X, a, y)
    forest.average_effect()
    assert time.time() - t0 < 10.0


class TestGrowForestWrapper:
    def test_scale_free_seeding_and_features(self):
        ds = simulate_dataset(example1_design(), 300, seed=5)
        cfg = AnalysisConfig(horizon=1.0, trees=8, seed=3)
        y = (ds.time <= 1.0).astype(float)

        class Outcomes:
            values = y

        f = grow_forest(ds, Outcomes(), 0, cfg)
        assert f.p_ == ds.n_covariates + ds.n_treatments - 1
        assert f.feature_names_[-1] == "a2"
        assert f.treatment_label_ == "a1"
        g = grow_forest(ds, Outcomes(), 0, cfg)
        np.testing.assert_array_equal(f.feature_, g.feature_)
