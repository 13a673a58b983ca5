"""Numba kernels shared by the boosting engine and the CART baselines.

Trees are stored as flat arrays: ``feature`` (-1 marks a leaf), ``split_bin``,
``left``, ``right`` and ``value``. On binned data a row goes left when its bin
index is ``<= split_bin``; on raw data when its value is ``<= threshold``.
"""
from __future__ import annotations

import numpy as np
from numba import njit

NEG_INF = -np.inf


# -- binning ---------------------------------------------------------------------


def fit_bin_edges(X: np.ndarray, n_bins: int) -> list[np.ndarray]:
    """Per-feature ascending cut points; a value ``v`` lands in bin ``searchsorted(edges, v)``.

    With at most ``n_bins`` distinct values every gap between neighbours gets a
    cut, so bins coincide with distinct values. Otherwise cuts sit after
    quantile-spaced distinct values.
    """
    edges = []
    probs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    for j in range(X.shape[1]):
        col = X[:, j]
        uniq = np.unique(col)
        if uniq.size <= 1:
            edges.append(np.empty(0))
            continue
        if uniq.size <= n_bins:
            lower = uniq[:-1]
            upper = uniq[1:]
        else:
            q = np.unique(np.quantile(col, probs, method="lower"))
            k = np.searchsorted(uniq, q)
            k = k[k < uniq.size - 1]
            lower = uniq[k]
            upper = uniq[k + 1]
        mid = lower + (upper - lower) / 2.0
        # adjacent floats: a midpoint that rounds up would misroute ``upper``
        mid = np.where(mid >= upper, lower, mid)
        edges.append(np.unique(mid))
    return edges


def apply_bins(X: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    max_bins = max((e.size + 1 for e in edges), default=1)
    dtype = np.uint8 if max_bins <= 256 else np.uint16
    out = np.empty(X.shape, dtype=dtype)
    for j, e in enumerate(edges):
        out[:, j] = np.searchsorted(e, X[:, j], side="left")
    return out


# -- shared traversal ------------------------------------------------------------------


@njit(cache=True)
def predict_tree_binned(Xb, feature, split_bin, left, right, value, out, scale):
    for i in range(Xb.shape[0]):
        node = 0
        while feature[node] >= 0:
            if Xb[i, feature[node]] <= split_bin[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] += scale * value[node]


@njit(cache=True)
def update_raw(Xb, row_leaf, in_bag, feature, split_bin, left, right, value, out, scale):
    """Training-time score update: in-bag rows use the leaf recorded while growing."""
    for i in range(Xb.shape[0]):
        if in_bag[i]:
            out[i] += scale * value[row_leaf[i]]
            continue
        node = 0
        while feature[node] >= 0:
            if Xb[i, feature[node]] <= split_bin[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] += scale * value[node]


@njit(cache=True)
def predict_forest_raw(X, offsets, feature, threshold, left, right, value, out, scale):
    """``out[i] += scale * sum_t tree_t(X[i])`` over trees stored back to back."""
    n_trees = offsets.shape[0] - 1
    for i in range(X.shape[0]):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += value[base + node]
        out[i] += scale * acc


# -- gradient boosting --------------------------------------------------------------


@njit(cache=True)
def _soft(G, l1):
    if G > l1:
        return G - l1
    if G < -l1:
        return G + l1
    return 0.0


@njit(cache=True)
def _score(G, H, l1, l2):
    t = _soft(G, l1)
    d = H + l2
    if d <= 0.0:
        return 0.0
    return t * t / d


@njit(cache=True)
def leaf_weight(G, H, l1, l2):
    d = H + l2
    if d <= 0.0:
        return 0.0
    return -_soft(G, l1) / d


@njit(cache=True)
def _build_hist(Xb, idx, start, end, grad, hess, feats, nbins, hist, slot):
    nf = feats.shape[0]
    for j in range(nf):
        for b in range(nbins[j]):
            for c in range(3):
                hist[slot, j, b, c] = 0.0
    for i in range(start, end):
        r = idx[i]
        g = grad[r]
        h = hess[r]
        for j in range(nf):
            b = Xb[r, feats[j]]
            hist[slot, j, b, 0] += g
            hist[slot, j, b, 1] += h
            hist[slot, j, b, 2] += 1.0


@njit(cache=True)
def _subtract(hist, dst, src, nbins):
    for j in range(nbins.shape[0]):
        for b in range(nbins[j]):
            for c in range(3):
                hist[dst, j, b, c] -= hist[src, j, b, c]


@njit(cache=True)
def _best_split(hist, slot, nbins, G, H, C, l1, l2, min_samples, min_weight):
    """Best (gain, feature position, bin, G_left, H_left, C_left) for one node.

    Candidates are scanned in feature order, then bin order, and only a strictly
    larger gain replaces the incumbent.
    """
    parent = _score(G, H, l1, l2)
    best_gain = NEG_INF
    best_j = -1
    best_b = -1
    best_gl = 0.0
    best_hl = 0.0
    best_cl = 0.0
    nf = nbins.shape[0]
    for j in range(nf):
        gl = 0.0
        hl = 0.0
        cl = 0.0
        for b in range(nbins[j] - 1):
            cb = hist[slot, j, b, 2]
            if cb == 0.0:
                # empty bin: same partition as the previous candidate
                continue
            gl += hist[slot, j, b, 0]
            hl += hist[slot, j, b, 1]
            cl += cb
            if cl < min_samples:
                continue
            cr = C - cl
            if cr < min_samples:
                break
            hr = H - hl
            if hl < min_weight or hr < min_weight:
                continue
            gain = 0.5 * (_score(gl, hl, l1, l2) + _score(G - gl, hr, l1, l2) - parent)
            if gain > best_gain:
                best_gain = gain
                best_j = j
                best_b = b
                best_gl = gl
                best_hl = hl
                best_cl = cl
    return best_gain, best_j, best_b, best_gl, best_hl, best_cl


@njit(cache=True)
def grow_gbdt_tree(Xb, grad, hess, idx, n_rows, feats, nbins, max_leaves, max_depth, leafwise,
                   l1, l2, min_samples, min_weight, min_gain, hist, buf, row_leaf):
    """Grow one regression tree on ``idx[:n_rows]``.

    ``feats`` are the (sorted) feature columns this tree may use and ``nbins``
    their bin counts. ``hist`` is scratch of shape (max_leaves, len(feats),
    max_bins, 3). Leaf-wise growth expands the leaf with the largest gain;
    depth-wise growth expands the shallowest leaf first, lowest node id on ties.
    Returns node arrays (feature column, split bin, left, right, value, gain)
    and writes each grown row's leaf node into ``row_leaf``.
    """
    max_nodes = 2 * max_leaves - 1
    feature = np.full(max_nodes, -1, np.int32)
    split_bin = np.zeros(max_nodes, np.int32)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    value = np.zeros(max_nodes)
    gain_out = np.zeros(max_nodes)

    start = np.zeros(max_nodes, np.int64)
    end = np.zeros(max_nodes, np.int64)
    depth = np.zeros(max_nodes, np.int64)
    slot = np.zeros(max_nodes, np.int64)
    nG = np.zeros(max_nodes)
    nH = np.zeros(max_nodes)
    nC = np.zeros(max_nodes)
    c_gain = np.full(max_nodes, NEG_INF)
    c_j = np.full(max_nodes, -1, np.int64)
    c_b = np.zeros(max_nodes, np.int64)
    c_gl = np.zeros(max_nodes)
    c_hl = np.zeros(max_nodes)
    c_cl = np.zeros(max_nodes)
    is_leaf = np.zeros(max_nodes, np.bool_)

    G = 0.0
    H = 0.0
    for i in range(n_rows):
        G += grad[idx[i]]
        H += hess[idx[i]]
    start[0] = 0
    end[0] = n_rows
    nG[0] = G
    nH[0] = H
    nC[0] = n_rows
    is_leaf[0] = True
    n_nodes = 1
    n_leaves = 1
    _build_hist(Xb, idx, 0, n_rows, grad, hess, feats, nbins, hist, 0)
    if max_depth > 0 and max_leaves > 1:
        r = _best_split(hist, 0, nbins, G, H, float(n_rows), l1, l2, min_samples, min_weight)
        c_gain[0], c_j[0], c_b[0], c_gl[0], c_hl[0], c_cl[0] = r

    while n_leaves < max_leaves:
        pick = -1
        for nd in range(n_nodes):
            if not is_leaf[nd] or c_j[nd] < 0 or not c_gain[nd] > min_gain:
                continue
            if pick < 0:
                pick = nd
            elif leafwise:
                if c_gain[nd] > c_gain[pick]:
                    pick = nd
            elif depth[nd] < depth[pick]:
                pick = nd
        if pick < 0:
            break

        j = c_j[pick]
        f = feats[j]
        b = c_b[pick]
        s = start[pick]
        e = end[pick]
        # stable partition of idx[s:e]
        nl = 0
        nr = 0
        for i in range(s, e):
            r_ = idx[i]
            if Xb[r_, f] <= b:
                idx[s + nl] = r_
                nl += 1
            else:
                buf[nr] = r_
                nr += 1
        for i in range(nr):
            idx[s + nl + i] = buf[i]
        mid = s + nl

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[pick] = f
        split_bin[pick] = b
        left[pick] = lc
        right[pick] = rc
        gain_out[pick] = c_gain[pick]
        is_leaf[pick] = False
        for c in (lc, rc):
            is_leaf[c] = True
            depth[c] = depth[pick] + 1
        start[lc] = s
        end[lc] = mid
        start[rc] = mid
        end[rc] = e
        nG[lc] = c_gl[pick]
        nH[lc] = c_hl[pick]
        nC[lc] = c_cl[pick]
        nG[rc] = nG[pick] - c_gl[pick]
        nH[rc] = nH[pick] - c_hl[pick]
        nC[rc] = nC[pick] - c_cl[pick]

        # smaller child gets a fresh histogram, larger one is parent minus smaller
        if nl <= nr:
            small, large = lc, rc
        else:
            small, large = rc, lc
        slot[large] = slot[pick]
        slot[small] = n_leaves
        _build_hist(Xb, idx, start[small], end[small], grad, hess, feats, nbins, hist,
                    slot[small])
        _subtract(hist, slot[large], slot[small], nbins)
        n_leaves += 1

        for c in (lc, rc):
            if depth[c] < max_depth and nC[c] >= 2 * min_samples:
                r = _best_split(hist, slot[c], nbins, nG[c], nH[c], nC[c], l1, l2,
                                min_samples, min_weight)
                c_gain[c], c_j[c], c_b[c], c_gl[c], c_hl[c], c_cl[c] = r

    for nd in range(n_nodes):
        if is_leaf[nd]:
            value[nd] = leaf_weight(nG[nd], nH[nd], l1, l2)
            for i in range(start[nd], end[nd]):
                row_leaf[idx[i]] = nd
    return (feature[:n_nodes], split_bin[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], gain_out[:n_nodes])


# -- CART (Gini) -------------------------------------------------------------------


@njit(cache=True)
def _gini_mass(pos, n):
    # n * gini impurity = 2 * pos * (n - pos) / n
    if n <= 0.0:
        return 0.0
    return 2.0 * pos * (n - pos) / n


@njit(cache=True)
def grow_cart_tree(Xb, y, idx, nbins, max_depth, min_samples_leaf, max_features, seed):
    """Greedy Gini CART on binned data over the (possibly repeated) rows ``idx``.

    ``max_features < n_features`` draws that many candidate features per node
    from a seeded stream; otherwise all features are scanned in order.
    Leaf ``value`` is the positive fraction. Node arrays as for boosting.
    """
    np.random.seed(seed)
    n = idx.shape[0]
    n_feat = Xb.shape[1]
    max_nodes = 2 * n + 1
    feature = np.full(max_nodes, -1, np.int32)
    split_bin = np.zeros(max_nodes, np.int32)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    value = np.zeros(max_nodes)
    gain_out = np.zeros(max_nodes)
    nb_max = 1
    for j in range(n_feat):
        if nbins[j] > nb_max:
            nb_max = nbins[j]
    cnt = np.zeros(nb_max)
    pos_c = np.zeros(nb_max)
    buf = np.empty(n, idx.dtype)
    all_feats = np.arange(n_feat)

    st_node = np.empty(max_nodes, np.int64)
    st_start = np.empty(max_nodes, np.int64)
    st_end = np.empty(max_nodes, np.int64)
    st_depth = np.empty(max_nodes, np.int64)
    top = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        nd = st_node[top]
        s = st_start[top]
        e = st_end[top]
        d = st_depth[top]
        tot = float(e - s)
        pos = 0.0
        for i in range(s, e):
            pos += y[idx[i]]
        value[nd] = pos / tot if tot > 0 else 0.0
        if d >= max_depth or tot < 2 * min_samples_leaf or pos == 0.0 or pos == tot:
            continue
        if max_features < n_feat:
            cand = np.sort(np.random.permutation(n_feat)[:max_features])
        else:
            cand = all_feats
        parent = _gini_mass(pos, tot)
        best = 1e-12
        best_f = -1
        best_b = -1
        for jj in range(cand.shape[0]):
            f = cand[jj]
            nbf = nbins[f]
            if nbf < 2:
                continue
            cnt[:nbf] = 0.0
            pos_c[:nbf] = 0.0
            for i in range(s, e):
                r_ = idx[i]
                bb = Xb[r_, f]
                cnt[bb] += 1.0
                pos_c[bb] += y[r_]
            cl = 0.0
            pl = 0.0
            for bb in range(nbf - 1):
                cl += cnt[bb]
                pl += pos_c[bb]
                if cl < min_samples_leaf:
                    continue
                cr = tot - cl
                if cr < min_samples_leaf:
                    break
                dec = parent - _gini_mass(pl, cl) - _gini_mass(pos - pl, cr)
                if dec > best:
                    best = dec
                    best_f = f
                    best_b = bb
        if best_f < 0:
            continue
        nl = 0
        nr = 0
        for i in range(s, e):
            r_ = idx[i]
            if Xb[r_, best_f] <= best_b:
                idx[s + nl] = r_
                nl += 1
            else:
                buf[nr] = r_
                nr += 1
        for i in range(nr):
            idx[s + nl + i] = buf[i]
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[nd] = best_f
        split_bin[nd] = best_b
        left[nd] = lc
        right[nd] = rc
        gain_out[nd] = best
        # push right first so the left subtree is expanded first
        st_node[top] = rc
        st_start[top] = s + nl
        st_end[top] = e
        st_depth[top] = d + 1
        top += 1
        st_node[top] = lc
        st_start[top] = s
        st_end[top] = s + nl
        st_depth[top] = d + 1
        top += 1
    return (feature[:n_nodes], split_bin[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], gain_out[:n_nodes])
