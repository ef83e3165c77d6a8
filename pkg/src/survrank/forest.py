"""Step 2: a generalized random forest over weighted outcomes.

Each tree is grown on a subsample, splitting so as to maximize
heterogeneity of the local treatment-effect slope via gradient
pseudo-outcomes.  Under honesty the splits are chosen on one half of the
subsample while leaf membership (and hence the forest kernel) comes from
the disjoint other half.  Kernel-weighted slope estimates give local
effects; averaging out-of-bag estimates over the training points gives
the ATE.  Standard errors come from growing trees in small groups that
share a half-sample, and comparing group-level estimates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._kernels import (LEAF, _grow_tree, _pool_stats, _route_forest,
                       _split_search, _tree_deltas)
from .errors import (ConfigurationError, DegenerateNeighborhoodError,
                     DegenerateNodeError)
from .validation import as_binary_vector, as_float_matrix, as_float_vector

MODEL_FORMAT_VERSION = 1


def node_theta(A, Y) -> float:
    """Sample-covariance(A, Y) / sample-variance(A) within a node.

    For binary A this equals the difference of treated and control means.
    """
    A = as_binary_vector(A, name="A")
    Y = as_float_vector(Y, len(A), name="Y")
    abar = A.mean()
    if abar == 0.0 or abar == 1.0:
        raise DegenerateNodeError("node contains a single treatment arm")
    da = A - abar
    return float(da @ (Y - Y.mean()) / (da @ da))


def label_pseudo_outcomes(node_members, A, Y) -> np.ndarray:
    """Gradient pseudo-outcomes for split scoring on one node.

    rho_i = (A_i - Abar) (Y_i - Ybar - (A_i - Abar) theta) / W with W the
    node mean of (A_i - Abar)^2; they sum to zero by construction.
    """
    members = np.asarray(node_members, dtype=np.int64)
    a = as_binary_vector(np.asarray(A, dtype=np.float64)[members], name="A")
    y = as_float_vector(np.asarray(Y, dtype=np.float64)[members], len(a), name="Y")
    theta = node_theta(a, y)
    da = a - a.mean()
    w = (da @ da) / len(a)
    return da * (y - y.mean() - da * theta) / w


@dataclass(frozen=True)
class SplitCandidate:
    covariate: int
    threshold: float
    gain: float


def best_split(node_members, A, Y, X, mtry_covariates, min_node_size=5):
    """Best admissible split of a node over the given candidate covariates.

    Maximizes sum over daughters of (sum of pseudo-outcomes)^2 / size,
    requiring min_node_size members and both treatment arms on each side.
    Returns None when no admissible split has positive gain.
    """
    members = np.asarray(node_members, dtype=np.int64)
    if len(members) < 2 * min_node_size:
        return None
    X = as_float_matrix(X)
    A = as_binary_vector(np.asarray(A, dtype=np.float64).ravel(), name="A")
    Y = as_float_vector(np.asarray(Y, dtype=np.float64).ravel(), name="Y")
    try:
        rho = label_pseudo_outcomes(members, A, Y)
    except DegenerateNodeError:
        return None
    cand = np.sort(np.asarray(mtry_covariates, dtype=np.int64))
    cov, thr, gain = _split_search(X, A, rho, members, cand,
                                   np.int64(min_node_size))
    if cov < 0:
        return None
    return SplitCandidate(int(cov), float(thr), float(gain))


def phi_influence(y, a, pi, m_bar, theta) -> float:
    """Influence value of one observation, evaluated in both algebraic forms.

    m_bar is the conditional outcome mean given the observed arm,
    E[Y | A, X = x].  The inverse-propensity form is returned after
    asserting it agrees with the residualized-slope form.
    """
    if not 0.0 < pi < 1.0:
        raise ValueError(f"propensity must lie in (0, 1), got {pi}")
    if a not in (0, 1):
        raise ValueError(f"treatment must be 0 or 1, got {a}")
    form1 = (a / pi - (1.0 - a) / (1.0 - pi)) * (y - m_bar)
    m_x = m_bar - (a - pi) * theta  # marginal mean implied by m_bar and theta
    form2 = (a - pi) / (pi * (1.0 - pi)) * (y - m_x - (a - pi) * theta)
    if abs(form1 - form2) > 1e-8 * max(1.0, abs(form1), abs(form2)):
        raise AssertionError(
            f"influence forms disagree: {form1!r} vs {form2!r}")
    return float(form1)


@dataclass(frozen=True)
class TreeNode:
    """Read-only view of one node of a fitted tree."""

    split_covariate: int | None
    split_value: float | None
    children: tuple | None
    leaf_members: np.ndarray | None


@dataclass(frozen=True)
class ForestAte:
    ate: float
    se: float | None


class CausalEffectForest(BaseEstimator):
    """Forest estimator of a conditional treatment-effect slope.

    Parameters
    ----------
    n_trees : number of trees.
    min_node_size : minimum members per daughter node (split half) and
        per leaf (estimation half).
    subsample_fraction : per-tree subsample fraction of n, drawn without
        replacement; must be <= 0.5 while ci_group_size >= 2 because
        grouped trees draw from a shared half-sample.
    honesty : grow splits on one half of the subsample and populate
        leaves from the other half.
    mtry : candidate covariates per split; default ceil(sqrt(p)).
    ci_group_size : trees per variance group; 0 disables grouping (and
        standard errors).
    random_state : int seed or numpy SeedSequence.
    """

    def __init__(self, n_trees=200, min_node_size=5, subsample_fraction=0.5,
                 honesty=True, mtry=None, ci_group_size=4, random_state=0):
        self.n_trees = n_trees
        self.min_node_size = min_node_size
        self.subsample_fraction = subsample_fraction
        self.honesty = honesty
        self.mtry = mtry
        self.ci_group_size = ci_group_size
        self.random_state = random_state

    # -- fitting ---------------------------------------------------------

    def fit(self, X, a, y, subsample_plan=None):
        """Grow the forest on covariates X, binary treatment a, outcome y.

        subsample_plan optionally fixes the per-tree (split, estimation)
        index sets; it exists for reproducibility experiments and tests.
        """
        X = as_float_matrix(X)
        n, p = X.shape
        a = as_binary_vector(a, n)
        y = as_float_vector(y, n)
        if n < 2:
            raise ConfigurationError("need at least 2 records to grow a forest")
        if a.min() == a.max():
            raise ConfigurationError("treatment has a single arm in the data")
        B = int(self.n_trees)
        if B < 1:
            raise ConfigurationError("n_trees must be positive")
        gsize = int(self.ci_group_size or 0)
        if gsize == 1:
            raise ConfigurationError("ci_group_size must be 0 or >= 2")
        if gsize and self.subsample_fraction > 0.5 + 1e-12:
            raise ConfigurationError(
                "subsample_fraction must be <= 0.5 when ci_group_size >= 2 "
                "(trees subsample from a shared half-sample); pass "
                "ci_group_size=0 to disable variance groups")
        mtry = int(self.mtry) if self.mtry else max(1, math.ceil(math.sqrt(p)))
        min_node = int(self.min_node_size)

        n_groups = (B + gsize - 1) // gsize if gsize else B
        root = (self.random_state if isinstance(self.random_state, np.random.SeedSequence)
                else np.random.SeedSequence(self.random_state))
        group_root, tree_root = root.spawn(2)
        group_seeds = group_root.spawn(n_groups)
        tree_seeds = tree_root.spawn(B)

        k_sub = max(1, int(math.floor(self.subsample_fraction * n)))
        group_pools = []
        for g in range(n_groups):
            if gsize:
                grng = np.random.default_rng(group_seeds[g])
                group_pools.append(np.sort(grng.permutation(n)[: n // 2]))
            else:
                group_pools.append(np.arange(n))

        feats, thrs, lefts, rights, parents = [], [], [], [], []
        leaf_es, leaf_ee, mas, mys, mays = [], [], [], [], []
        est_works, split_works = [], []
        in_sample = np.zeros((B, n), dtype=bool)
        group_of_tree = np.empty(B, dtype=np.int64)

        for b in range(B):
            g = b // gsize if gsize else b
            group_of_tree[b] = g
            if subsample_plan is not None:
                split_idx = np.asarray(subsample_plan[b][0], dtype=np.int64)
                est_idx = np.asarray(subsample_plan[b][1], dtype=np.int64)
            else:
                pool = group_pools[g]
                rng = np.random.default_rng(tree_seeds[b])
                take = min(k_sub, len(pool))
                sub = rng.permutation(pool)[:take]
                if self.honesty:
                    half = len(sub) // 2
                    split_idx, est_idx = sub[:half], sub[half:]
                else:
                    split_idx = est_idx = sub
            if len(est_idx) == 0 or len(split_idx) == 0:
                raise ConfigurationError(
                    "per-tree subsample too small to populate both the split "
                    "and the estimation half; increase subsample_fraction")
            in_sample[b, split_idx] = True
            in_sample[b, est_idx] = True

            cap = 2 * max(1, len(split_idx) // max(min_node, 1)) + 3
            feature = np.full(cap, LEAF, dtype=np.int64)
            threshold = np.zeros(cap)
            left = np.full(cap, LEAF, dtype=np.int64)
            right = np.full(cap, LEAF, dtype=np.int64)
            parent = np.full(cap, LEAF, dtype=np.int64)
            s_start = np.zeros(cap, dtype=np.int64)
            s_end = np.zeros(cap, dtype=np.int64)
            e_start = np.zeros(cap, dtype=np.int64)
            e_end = np.zeros(cap, dtype=np.int64)
            l_es = np.zeros(cap, dtype=np.int64)
            l_ee = np.zeros(cap, dtype=np.int64)
            ma = np.zeros(cap)
            my = np.zeros(cap)
            may = np.zeros(cap)
            sw = split_idx.copy()
            ew = est_idx.copy()
            seed = int(tree_seeds[b].generate_state(2)[1])
            n_nodes = _grow_tree(X, a, y, sw, ew, np.int64(min_node),
                                 np.int64(mtry), seed,
                                 feature, threshold, left, right, parent,
                                 s_start, s_end, e_start, e_end,
                                 l_es, l_ee, ma, my, may)
            feats.append(feature[:n_nodes])
            thrs.append(threshold[:n_nodes])
            lefts.append(left[:n_nodes])
            rights.append(right[:n_nodes])
            parents.append(parent[:n_nodes])
            leaf_es.append(l_es[:n_nodes])
            leaf_ee.append(l_ee[:n_nodes])
            mas.append(ma[:n_nodes])
            mys.append(my[:n_nodes])
            mays.append(may[:n_nodes])
            est_works.append(ew)
            split_works.append(sw)

        counts = np.array([len(f) for f in feats], dtype=np.int64)
        self.tree_offsets_ = np.concatenate(([0], np.cumsum(counts)))
        self.feature_ = np.concatenate(feats)
        self.threshold_ = np.concatenate(thrs)
        self.left_ = np.concatenate(lefts).astype(np.int64)
        self.right_ = np.concatenate(rights).astype(np.int64)
        self.parent_ = np.concatenate(parents).astype(np.int64)
        self.leaf_es_ = np.concatenate(leaf_es)
        self.leaf_ee_ = np.concatenate(leaf_ee)
        self.leaf_ma_ = np.concatenate(mas)
        self.leaf_my_ = np.concatenate(mys)
        self.leaf_may_ = np.concatenate(mays)
        est_counts = np.array([len(w) for w in est_works], dtype=np.int64)
        self.est_offsets_ = np.concatenate(([0], np.cumsum(est_counts)))
        self.est_work_ = np.concatenate(est_works)
        split_counts = np.array([len(w) for w in split_works], dtype=np.int64)
        self.split_offsets_ = np.concatenate(([0], np.cumsum(split_counts)))
        self.split_work_ = np.concatenate(split_works)
        self.in_sample_ = in_sample
        self.group_of_tree_ = group_of_tree
        self.n_groups_ = int(n_groups)
        self.group_size_ = gsize
        self.mtry_ = mtry
        self.X_ = X
        self.a_ = a
        self.y_ = y
        self.n_, self.p_ = n, p
        self._oob_cache = None
        self._ate_cache = None
        return self

    # -- prediction ------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "feature_"):
            raise ConfigurationError("forest is not fitted")

    def _route(self, X) -> np.ndarray:
        B = len(self.tree_offsets_) - 1
        leaf = np.empty((B, X.shape[0]), dtype=np.int64)
        _route_forest(self.feature_, self.threshold_, self.left_, self.right_,
                      self.tree_offsets_, X, leaf)
        return leaf

    def _pooled(self, X, use):
        npts = X.shape[0]
        leaf = self._route(X)
        sa = np.zeros(npts)
        sy = np.zeros(npts)
        say = np.zeros(npts)
        cnt = np.zeros(npts, dtype=np.int64)
        _pool_stats(leaf, use, self.tree_offsets_, self.leaf_ma_,
                    self.leaf_my_, self.leaf_may_, sa, sy, say, cnt)
        return leaf, sa, sy, say, cnt

    @staticmethod
    def _ratio(sa, sy, say, cnt):
        ok = cnt > 0
        sa = np.where(ok, sa / np.maximum(cnt, 1), np.nan)
        sy = np.where(ok, sy / np.maximum(cnt, 1), np.nan)
        say = np.where(ok, say / np.maximum(cnt, 1), np.nan)
        w = sa * (1.0 - sa)
        theta = np.where(w > 0, (say - sa * sy) / np.where(w > 0, w, 1.0), np.nan)
        return sa, sy, theta, w

    def predict(self, X) -> np.ndarray:
        """Local effect estimate at each row of X, using all trees."""
        self._check_fitted()
        X = as_float_matrix(X)
        if X.shape[1] != self.p_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.p_}")
        use = np.ones((len(self.tree_offsets_) - 1, X.shape[0]), dtype=bool)
        _, sa, sy, say, cnt = self._pooled(X, use)
        _, _, theta, w = self._ratio(sa, sy, say, cnt)
        if np.any(~np.isfinite(theta)):
            raise DegenerateNeighborhoodError(
                "forest-weighted treatment variance is zero at a prediction point")
        return theta

    def _grove_sigma(self, d_by_tree, valid_by_tree):
        """Half-sample grove variance from per-tree linearized estimates."""
        if not self.group_size_ or self.n_groups_ < 2:
            return None
        g_means, g_vars = [], []
        for g in range(self.n_groups_):
            sel = (self.group_of_tree_ == g) & valid_by_tree
            vals = d_by_tree[sel]
            if len(vals) == 0:
                continue
            g_means.append(vals.mean())
            if len(vals) >= 2:
                g_vars.append(vals.var(ddof=1))
        if len(g_means) < 2:
            return None
        v_between = np.var(g_means, ddof=1)
        v_within = float(np.mean(g_vars)) if g_vars else 0.0
        sigma2 = max(v_between - v_within / self.group_size_, 0.0)
        return math.sqrt(sigma2)

    def _deltas(self, leaf, use, sa, sy, theta, w):
        B = leaf.shape[0]
        d_sum = np.zeros(B)
        d_cnt = np.zeros(B, dtype=np.int64)
        _tree_deltas(leaf, use, self.tree_offsets_, self.leaf_ma_,
                     self.leaf_my_, self.leaf_may_, sa, sy, theta, w,
                     d_sum, d_cnt)
        valid = d_cnt > 0
        d = np.where(valid, d_sum / np.maximum(d_cnt, 1), 0.0)
        return d, valid

    def predict_with_se(self, X):
        """Per-row (estimate, standard error); se entries are nan when
        variance groups are disabled or fewer than two groups exist."""
        self._check_fitted()
        X = as_float_matrix(X)
        theta = self.predict(X)
        use = np.ones((len(self.tree_offsets_) - 1, X.shape[0]), dtype=bool)
        leaf, sa, sy, say, cnt = self._pooled(X, use)
        sa_n, sy_n, theta_n, w = self._ratio(sa, sy, say, cnt)
        se = np.full(X.shape[0], np.nan)
        for i in range(X.shape[0]):
            d, valid = self._deltas(leaf[:, i:i + 1], use[:, i:i + 1],
                                    sa_n[i:i + 1], sy_n[i:i + 1],
                                    theta_n[i:i + 1], w[i:i + 1])
            s = self._grove_sigma(d, valid)
            if s is not None:
                se[i] = s
        return theta, se

    def oob_predict(self) -> np.ndarray:
        """Local effect at each training point from trees not containing it."""
        self._check_fitted()
        if self._oob_cache is not None:
            return self._oob_cache[0]
        use = ~self.in_sample_
        leaf, sa, sy, say, cnt = self._pooled(self.X_, use)
        if np.any(cnt == 0):
            # points contained in every subsample fall back to all trees
            alli = np.flatnonzero(cnt == 0)
            use[:, alli] = True
            leaf2, sa2, sy2, say2, cnt2 = self._pooled(self.X_[alli],
                                                       np.ones((use.shape[0], len(alli)), dtype=bool))
            sa[alli], sy[alli], say[alli], cnt[alli] = sa2, sy2, say2, cnt2
            leaf[:, alli] = leaf2
        sa_n, sy_n, theta, w = self._ratio(sa, sy, say, cnt)
        if np.any(~np.isfinite(theta)):
            raise DegenerateNeighborhoodError(
                "forest-weighted treatment variance is zero at a training point")
        self._oob_cache = (theta, leaf, use, sa_n, sy_n, w)
        return theta

    def average_effect(self) -> ForestAte:
        """ATE: mean out-of-bag local effect, with grove standard error."""
        self._check_fitted()
        if self._ate_cache is not None:
            return self._ate_cache
        theta = self.oob_predict()
        _, leaf, use, sa_n, sy_n, w = self._oob_cache
        ate = float(theta.mean())
        d, valid = self._deltas(leaf, use, sa_n, sy_n, theta, w)
        se = self._grove_sigma(d, valid)
        self._ate_cache = ForestAte(ate, se)
        return self._ate_cache

    # -- introspection ---------------------------------------------------

    @property
    def n_trees_(self) -> int:
        return len(self.tree_offsets_) - 1

    def subsample_indices(self, b: int):
        """(split half, estimation half) row indices of tree b."""
        self._check_fitted()
        sw = self.split_work_[self.split_offsets_[b]:self.split_offsets_[b + 1]]
        ew = self.est_work_[self.est_offsets_[b]:self.est_offsets_[b + 1]]
        return sw.copy(), ew.copy()

    def leaf_members(self, b: int, local_node: int) -> np.ndarray:
        off = self.tree_offsets_[b]
        lo = self.est_offsets_[b] + self.leaf_es_[off + local_node]
        hi = self.est_offsets_[b] + self.leaf_ee_[off + local_node]
        return self.est_work_[lo:hi].copy()

    def tree(self, b: int) -> TreeNode:
        """Nested read-only view of tree b."""
        self._check_fitted()
        off = self.tree_offsets_[b]

        def build(local):
            if self.feature_[off + local] < 0:
                return TreeNode(None, None, None, self.leaf_members(b, local))
            return TreeNode(int(self.feature_[off + local]),
                            float(self.threshold_[off + local]),
                            (build(int(self.left_[off + local])),
                             build(int(self.right_[off + local]))),
                            None)

        return build(0)

    def kernel_weights(self, x, exclude_row=None) -> np.ndarray:
        """Forest kernel alpha(x) over the training rows (sums to one).

        exclude_row restricts to trees whose subsample does not contain
        that training row (the out-of-bag kernel).
        """
        self._check_fitted()
        x = as_float_matrix(x)
        if x.shape != (1, self.p_):
            x = x.reshape(1, self.p_)
        leaf = self._route(x)[:, 0]
        alpha = np.zeros(self.n_)
        used = 0
        for b in range(self.n_trees_):
            if exclude_row is not None and self.in_sample_[b, exclude_row]:
                continue
            members = self.leaf_members(b, int(leaf[b]))
            if len(members) == 0:
                continue
            alpha[members] += 1.0 / len(members)
            used += 1
        if used == 0:
            raise DegenerateNeighborhoodError("no usable trees at this point")
        return alpha / used

    # -- serialization ---------------------------------------------------

    _ARRAY_FIELDS = ("tree_offsets_", "feature_", "threshold_", "left_",
                     "right_", "parent_", "leaf_es_", "leaf_ee_", "leaf_ma_",
                     "leaf_my_", "leaf_may_", "est_offsets_", "est_work_",
                     "split_offsets_", "split_work_", "in_sample_",
                     "group_of_tree_", "X_", "a_", "y_")

    def save(self, path):
        """Dump a fitted model to a versioned npz file."""
        self._check_fitted()
        params = self.get_params()
        if not isinstance(params.get("random_state"), (int, type(None))):
            params["random_state"] = None  # seed sequences are not portable
        meta = dict(format_version=MODEL_FORMAT_VERSION,
                    params=params,
                    n=self.n_, p=self.p_, n_groups=self.n_groups_,
                    group_size=self.group_size_, mtry=self.mtry_,
                    random_state=(self.random_state
                                  if isinstance(self.random_state, int) else None))
        arrays = {f: getattr(self, f) for f in self._ARRAY_FIELDS}
        with open(path, "wb") as fh:
            np.savez_compressed(fh, meta=json.dumps(meta, sort_keys=True), **arrays)

    @classmethod
    def load(cls, path) -> "CausalEffectForest":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta["format_version"] != MODEL_FORMAT_VERSION:
                raise ConfigurationError(
                    f"unsupported model format {meta['format_version']}")
            params = meta["params"]
            if params.get("random_state") is None:
                params["random_state"] = meta.get("random_state") or 0
            model = cls(**params)
            for f in cls._ARRAY_FIELDS:
                setattr(model, f, data[f])
        model.n_, model.p_ = meta["n"], meta["p"]
        model.n_groups_ = meta["n_groups"]
        model.group_size_ = meta["group_size"]
        model.mtry_ = meta["mtry"]
        model._oob_cache = None
        model._ate_cache = None
        return model


def grow_forest(dataset, outcomes, k: int, config) -> CausalEffectForest:
    """Fit a forest for treatment k of a dataset on given weighted outcomes.

    Covariates are the dataset covariates plus the other treatment
    columns.  The forest seed derives from (config.seed, k) only, so the
    same records and seed give the same forest regardless of outcome scale.
    """
    values = getattr(outcomes, "values", None)
    if values is None:
        values = np.asarray([o.value for o in outcomes], dtype=np.float64)
    if len(values) != dataset.n:
        raise ConfigurationError("outcomes length must equal dataset size")
    other = [j for j in range(dataset.n_treatments) if j != k]
    X = np.column_stack([dataset.covariates,
                         dataset.treatments[:, other].astype(np.float64)])
    names = list(dataset.covariate_names) + [dataset.treatment_names[j] for j in other]
    forest = CausalEffectForest(
        n_trees=config.trees,
        min_node_size=config.min_node_size,
        subsample_fraction=config.subsample_fraction,
        honesty=config.honesty,
        mtry=config.mtry,
        ci_group_size=config.ci_group_size,
        random_state=np.random.SeedSequence(entropy=config.seed, spawn_key=(k,)),
    )
    forest.fit(np.ascontiguousarray(X), dataset.treatments[:, k].astype(np.float64),
               values)
    forest.feature_names_ = tuple(names)
    forest.treatment_label_ = dataset.treatment_names[k]
    return forest
