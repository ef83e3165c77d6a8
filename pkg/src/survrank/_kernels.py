"""Compiled kernels for tree growth, routing and weight accumulation.

Trees are grown iteratively with in-place partitioning of two index
workspaces (split half and estimation half), so a whole tree is built in
one nopython call.  Child node ids are local to the tree; forest-level
arrays concatenate trees with per-tree offsets.
"""
import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True)
def _split_search(X, A, rho, members, cand_covs, min_node):
    """Best (covariate, threshold) maximizing sum_l (sum rho in D_l)^2 / |D_l|.

    Admissible splits leave at least min_node members and both treatment
    arms on each side.  Candidates are midpoints between consecutive
    distinct values; ties in the criterion keep the lowest covariate
    index, then the lowest threshold.  Returns (-1, 0.0, 0.0) if no
    admissible split has positive gain.
    """
    m = members.shape[0]
    best_gain = 0.0
    best_cov = -1
    best_thr = 0.0
    total_rho = 0.0
    total_ones = 0.0
    for ii in range(m):
        total_rho += rho[ii]
        total_ones += A[members[ii]]
    xv = np.empty(m)
    for cc in range(cand_covs.shape[0]):
        j = cand_covs[cc]
        for ii in range(m):
            xv[ii] = X[members[ii], j]
        order = np.argsort(xv)
        c_rho = 0.0
        c_ones = 0.0
        for pos in range(m - 1):
            o = order[pos]
            c_rho += rho[o]
            c_ones += A[members[o]]
            x_cur = xv[o]
            x_next = xv[order[pos + 1]]
            if x_next <= x_cur:
                continue
            n_l = pos + 1
            n_r = m - n_l
            if n_l < min_node or n_r < min_node:
                continue
            ones_r = total_ones - c_ones
            if c_ones < 0.5 or c_ones > n_l - 0.5:
                continue
            if ones_r < 0.5 or ones_r > n_r - 0.5:
                continue
            s_r = total_rho - c_rho
            gain = c_rho * c_rho / n_l + s_r * s_r / n_r
            if gain > best_gain:
                best_gain = gain
                best_cov = j
                best_thr = 0.5 * (x_cur + x_next)
    return best_cov, best_thr, best_gain


@njit(cache=True)
def _grow_tree(X, A, Y, sw, ew, min_node, mtry, seed,
               feature, threshold, left, right, parent,
               s_start, s_end, e_start, e_end,
               leaf_es, leaf_ee, node_ma, node_my, node_may):
    """Grow one tree; returns the number of nodes written.

    sw/ew are the split-half and estimation-half row-index workspaces and
    are partitioned in place, so any node's members occupy a contiguous
    range.  Leaves whose estimation range is smaller than min_node or
    single-arm borrow the nearest valid ancestor range.
    """
    np.random.seed(seed)
    p = X.shape[1]
    cap = feature.shape[0]

    feature[0] = LEAF
    left[0] = LEAF
    right[0] = LEAF
    parent[0] = LEAF
    s_start[0] = 0
    s_end[0] = sw.shape[0]
    e_start[0] = 0
    e_end[0] = ew.shape[0]
    n_nodes = 1

    stack = np.empty(cap, dtype=np.int64)
    stack[0] = 0
    top = 1
    perm = np.empty(p, dtype=np.int64)
    tmp = np.empty(max(sw.shape[0], ew.shape[0]), dtype=np.int64)
    rho = np.empty(sw.shape[0])

    while top > 0:
        top -= 1
        node = stack[top]
        ss = s_start[node]
        se = s_end[node]
        m = se - ss
        if m < 2 * min_node:
            continue

        sum_a = 0.0
        sum_y = 0.0
        for ii in range(ss, se):
            i = sw[ii]
            sum_a += A[i]
            sum_y += Y[i]
        if sum_a < 0.5 or sum_a > m - 0.5:
            continue  # single treatment arm
        abar = sum_a / m
        ybar = sum_y / m
        s_aa = 0.0
        s_ay = 0.0
        for ii in range(ss, se):
            i = sw[ii]
            da = A[i] - abar
            s_aa += da * da
            s_ay += da * (Y[i] - ybar)
        if s_aa <= 0.0:
            continue
        theta = s_ay / s_aa
        w = s_aa / m
        for ii in range(ss, se):
            i = sw[ii]
            da = A[i] - abar
            rho[ii - ss] = da * (Y[i] - ybar - da * theta) / w

        for j in range(p):
            perm[j] = j
        q = mtry if mtry < p else p
        for j in range(q):
            r = j + np.random.randint(0, p - j)
            t = perm[j]
            perm[j] = perm[r]
            perm[r] = t
        cand = np.sort(perm[:q].copy())

        best_cov, best_thr, best_gain = _split_search(
            X, A, rho[:m], sw[ss:se], cand, min_node)
        if best_cov < 0 or best_gain <= 0.0:
            continue
        if n_nodes + 2 > cap:
            continue  # capacity guard; node stays a leaf

        # stable partition of both workspaces around the threshold
        keep = ss
        nr = 0
        for ii in range(ss, se):
            i = sw[ii]
            if X[i, best_cov] <= best_thr:
                sw[keep] = i
                keep += 1
            else:
                tmp[nr] = i
                nr += 1
        for r in range(nr):
            sw[keep + r] = tmp[r]
        mid_s = keep

        es = e_start[node]
        ee = e_end[node]
        keep = es
        nr = 0
        for ii in range(es, ee):
            i = ew[ii]
            if X[i, best_cov] <= best_thr:
                ew[keep] = i
                keep += 1
            else:
                tmp[nr] = i
                nr += 1
        for r in range(nr):
            ew[keep + r] = tmp[r]
        mid_e = keep

        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[node] = best_cov
        threshold[node] = best_thr
        left[node] = lid
        right[node] = rid
        for cid, cs, ce, ces, cee in ((lid, ss, mid_s, es, mid_e),
                                      (rid, mid_s, se, mid_e, ee)):
            feature[cid] = LEAF
            left[cid] = LEAF
            right[cid] = LEAF
            parent[cid] = node
            s_start[cid] = cs
            s_end[cid] = ce
            e_start[cid] = ces
            e_end[cid] = cee
        stack[top] = rid
        stack[top + 1] = lid
        top += 2

    # leaf estimation ranges: walk up until the range has min_node members
    # and both arms, then freeze per-leaf aggregates
    for node in range(n_nodes):
        if feature[node] >= 0:
            continue
        cur = node
        while True:
            ls = e_start[cur]
            le = e_end[cur]
            cnt = le - ls
            ones = 0.0
            for ii in range(ls, le):
                ones += A[ew[ii]]
            ok = cnt >= min_node and ones > 0.5 and ones < cnt - 0.5
            if ok or parent[cur] < 0:
                break
            cur = parent[cur]
        ls = e_start[cur]
        le = e_end[cur]
        leaf_es[node] = ls
        leaf_ee[node] = le
        sa = 0.0
        sy = 0.0
        say = 0.0
        for ii in range(ls, le):
            i = ew[ii]
            sa += A[i]
            sy += Y[i]
            say += A[i] * Y[i]
        cnt = le - ls
        if cnt > 0:
            node_ma[node] = sa / cnt
            node_my[node] = sy / cnt
            node_may[node] = say / cnt
    return n_nodes


@njit(cache=True)
def _route_forest(feature, threshold, left, right, tree_offsets, X, out):
    """Leaf node id (local to each tree) for every (tree, point) pair."""
    n_trees = tree_offsets.shape[0] - 1
    npts = X.shape[0]
    for b in range(n_trees):
        off = tree_offsets[b]
        for i in range(npts):
            node = 0
            while feature[off + node] >= 0:
                if X[i, feature[off + node]] <= threshold[off + node]:
                    node = left[off + node]
                else:
                    node = right[off + node]
            out[b, i] = node


@njit(cache=True)
def _pool_stats(leaf, use, tree_offsets, node_ma, node_my, node_may,
                sa, sy, say, cnt):
    """Accumulate per-point leaf means over the usable trees."""
    n_trees = leaf.shape[0]
    npts = leaf.shape[1]
    for b in range(n_trees):
        off = tree_offsets[b]
        for i in range(npts):
            if not use[b, i]:
                continue
            lf = off + leaf[b, i]
            sa[i] += node_ma[lf]
            sy[i] += node_my[lf]
            say[i] += node_may[lf]
            cnt[i] += 1


@njit(cache=True)
def _tree_deltas(leaf, use, tree_offsets, node_ma, node_my, node_may,
                 sa, sy, theta, w, d_sum, d_cnt):
    """Per-tree average linearized correction over its usable points.

    For tree b and point i the correction is psi_bar / w[i] with
    psi_bar the leaf mean of (A - sa[i]) (Y - sy[i]) - (A - sa[i])^2 theta[i];
    A in {0,1} collapses the moments to the stored leaf means.
    """
    n_trees = leaf.shape[0]
    npts = leaf.shape[1]
    for b in range(n_trees):
        off = tree_offsets[b]
        for i in range(npts):
            if not use[b, i]:
                continue
            lf = off + leaf[b, i]
            ma = node_ma[lf]
            psi = (node_may[lf] - sa[i] * node_my[lf] - sy[i] * ma + sa[i] * sy[i]
                   - (ma * (1.0 - 2.0 * sa[i]) + sa[i] * sa[i]) * theta[i])
            d_sum[b] += psi / w[i]
            d_cnt[b] += 1
