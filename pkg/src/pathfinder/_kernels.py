"""Numba kernels for graph search and construction.

Everything here operates on primitive arrays: the relation's float32
vector table, an int64 sorted member pk array, and an int32 adjacency
matrix of local member ids (-1 padded) with a parallel degree array.

All orderings are lexicographic on (distance, id) so results are fully
deterministic; ids are local member indices, and because members are
sorted by pk, local id order coincides with pk order.
"""

from __future__ import annotations

import numpy as np
from numba import njit

METRIC_SQEUCLIDEAN = 0
METRIC_NEG_INNER = 1


@njit(cache=True, nogil=True, inline="always")
def _before(d1, i1, d2, i2):
    if d1 != d2:
        return d1 < d2
    return i1 < i2


@njit(cache=True, nogil=True, inline="always")
def _dist_pk(vectors, pk, q, metric_code):
    s = 0.0
    if metric_code == METRIC_SQEUCLIDEAN:
        for j in range(q.shape[0]):
            d = np.float64(vectors[pk, j]) - np.float64(q[j])
            s += d * d
    else:
        for j in range(q.shape[0]):
            s -= np.float64(vectors[pk, j]) * np.float64(q[j])
    return s


# -- binary heaps on parallel (dist, id) arrays ---------------------------

@njit(cache=True, nogil=True)
def _min_push(hd, hi, n, d, i):
    hd[n] = d
    hi[n] = i
    c = n
    while c > 0:
        p = (c - 1) >> 1
        if _before(hd[c], hi[c], hd[p], hi[p]):
            hd[c], hd[p] = hd[p], hd[c]
            hi[c], hi[p] = hi[p], hi[c]
            c = p
        else:
            break
    return n + 1


@njit(cache=True, nogil=True)
def _min_pop(hd, hi, n):
    last = n - 1
    hd[0] = hd[last]
    hi[0] = hi[last]
    c = 0
    while True:
        l = 2 * c + 1
        if l >= last:
            break
        r = l + 1
        best = l
        if r < last and _before(hd[r], hi[r], hd[l], hi[l]):
            best = r
        if _before(hd[best], hi[best], hd[c], hi[c]):
            hd[c], hd[best] = hd[best], hd[c]
            hi[c], hi[best] = hi[best], hi[c]
            c = best
        else:
            break
    return last


@njit(cache=True, nogil=True)
def _max_push(hd, hi, n, d, i):
    hd[n] = d
    hi[n] = i
    c = n
    while c > 0:
        p = (c - 1) >> 1
        if _before(hd[p], hi[p], hd[c], hi[c]):
            hd[c], hd[p] = hd[p], hd[c]
            hi[c], hi[p] = hi[p], hi[c]
            c = p
        else:
            break
    return n + 1


@njit(cache=True, nogil=True)
def _max_pop(hd, hi, n):
    last = n - 1
    hd[0] = hd[last]
    hi[0] = hi[last]
    c = 0
    while True:
        l = 2 * c + 1
        if l >= last:
            break
        r = l + 1
        best = l
        if r < last and _before(hd[l], hi[l], hd[r], hi[r]):
            best = r
        if _before(hd[c], hi[c], hd[best], hi[best]):
            hd[c], hd[best] = hd[best], hd[c]
            hi[c], hi[best] = hi[best], hi[c]
            c = best
        else:
            break
    return last


# -- best-first search ----------------------------------------------------

@njit(cache=True, nogil=True)
def search_kernel(vectors, members, adj, deg, entry_local, q, L, K, mask, use_mask, metric_code):
    """Bounded best-first traversal from the entry point.

    Navigation keeps the L closest evaluated vertices (evicting the
    farthest on overflow) and never consults the filter, so filtered
    searches can traverse through failing vertices. A separate queue of
    size K collects the best filter-passing vertices among everything
    evaluated. Terminates when the closest unexpanded candidate is
    farther than the worst of the L navigation entries.

    Returns (res_ids, res_d, n_res, n_eval, expanded, n_expanded); ids
    are local, res arrays sorted ascending by (distance, id).
    """
    m = members.shape[0]
    visited = np.zeros(m, dtype=np.uint8)

    cand_d = np.empty(m + 1, dtype=np.float64)
    cand_i = np.empty(m + 1, dtype=np.int64)
    n_cand = 0

    top_d = np.empty(L + 1, dtype=np.float64)
    top_i = np.empty(L + 1, dtype=np.int64)
    n_top = 0

    res_d = np.empty(K + 1, dtype=np.float64)
    res_i = np.empty(K + 1, dtype=np.int64)
    n_res = 0

    expanded = np.empty(m, dtype=np.int64)
    n_expanded = 0

    d0 = _dist_pk(vectors, members[entry_local], q, metric_code)
    visited[entry_local] = 1
    n_eval = 1
    n_cand = _min_push(cand_d, cand_i, n_cand, d0, entry_local)
    n_top = _max_push(top_d, top_i, n_top, d0, entry_local)
    if not use_mask or mask[members[entry_local]]:
        n_res = _max_push(res_d, res_i, n_res, d0, entry_local)

    while n_cand > 0:
        d = cand_d[0]
        v = cand_i[0]
        n_cand = _min_pop(cand_d, cand_i, n_cand)
        if n_top == L and _before(top_d[0], top_i[0], d, v):
            break
        expanded[n_expanded] = v
        n_expanded += 1
        for k in range(deg[v]):
            u = adj[v, k]
            if visited[u]:
                continue
            visited[u] = 1
            du = _dist_pk(vectors, members[u], q, metric_code)
            n_eval += 1
            if n_top < L or _before(du, u, top_d[0], top_i[0]):
                n_cand = _min_push(cand_d, cand_i, n_cand, du, u)
                n_top = _max_push(top_d, top_i, n_top, du, u)
                if n_top > L:
                    n_top = _max_pop(top_d, top_i, n_top)
            if not use_mask or mask[members[u]]:
                if n_res < K or _before(du, u, res_d[0], res_i[0]):
                    n_res = _max_push(res_d, res_i, n_res, du, u)
                    if n_res > K:
                        n_res = _max_pop(res_d, res_i, n_res)

    out_d = np.empty(n_res, dtype=np.float64)
    out_i = np.empty(n_res, dtype=np.int64)
    total = n_res
    for k in range(total - 1, -1, -1):
        out_d[k] = res_d[0]
        out_i[k] = res_i[0]
        n_res = _max_pop(res_d, res_i, n_res)
    return out_i, out_d, total, n_eval, expanded, n_expanded


# -- robust pruning -------------------------------------------------------

@njit(cache=True, nogil=True)
def _sort_pairs(d, ids, n):
    for i in range(1, n):
        dv = d[i]
        iv = ids[i]
        j = i - 1
        while j >= 0 and _before(dv, iv, d[j], ids[j]):
            d[j + 1] = d[j]
            ids[j + 1] = ids[j]
            j -= 1
        d[j + 1] = dv
        ids[j + 1] = iv


@njit(cache=True, nogil=True)
def prune_kernel(vectors, members, cand_ids, cand_d, n_cand, v_local, alpha_factor, R, metric_code, out_ids):
    """Robust pruning: keep the closest candidate, drop every candidate it
    dominates (alpha_factor * d(kept, c) <= d(v, c)), repeat until R kept
    or candidates run out. Duplicate candidate ids self-eliminate because
    a kept vertex dominates its own copies at distance zero.

    cand arrays are reordered in place; returns the kept count with kept
    local ids written to out_ids.
    """
    _sort_pairs(cand_d, cand_ids, n_cand)
    pruned = np.zeros(n_cand, dtype=np.uint8)
    kept = 0
    for i in range(n_cand):
        if pruned[i]:
            continue
        p_star = cand_ids[i]
        out_ids[kept] = p_star
        kept += 1
        if kept == R:
            break
        for j in range(i + 1, n_cand):
            if pruned[j]:
                continue
            c = cand_ids[j]
            d_pc = _dist_pk(vectors, members[p_star], vectors[members[c]], metric_code)
            if alpha_factor * d_pc <= cand_d[j]:
                pruned[j] = 1
    return kept


# -- graph construction ---------------------------------------------------

@njit(cache=True, nogil=True)
def build_pass_kernel(vectors, members, adj, deg, entry_local, L_build, alpha_factor, metric_code):
    """One construction pass: for each vertex in pk order, search for its
    vector from the entry point, robust-prune the expanded set into its
    adjacency, then insert reverse edges with re-pruning on overflow.

    Mutates adj and deg in place; fully sequential so a fixed seed gives
    a bit-identical graph.
    """
    m = members.shape[0]
    R = adj.shape[1]
    no_mask = np.zeros(0, dtype=np.bool_)
    cand_ids = np.empty(m + R + 1, dtype=np.int64)
    cand_d = np.empty(m + R + 1, dtype=np.float64)
    out_ids = np.empty(R, dtype=np.int64)
    in_set = np.zeros(m, dtype=np.uint8)
    rev_ids = np.empty(R + 1, dtype=np.int64)
    rev_d = np.empty(R + 1, dtype=np.float64)
    rev_out = np.empty(R, dtype=np.int64)

    for v in range(m):
        q = vectors[members[v]]
        _, _, _, _, expanded, n_expanded = search_kernel(
            vectors, members, adj, deg, entry_local, q, L_build, 1, no_mask, False, metric_code
        )
        n_cand = 0
        for k in range(n_expanded):
            u = expanded[k]
            if u == v:
                continue
            in_set[u] = 1
            cand_ids[n_cand] = u
            cand_d[n_cand] = _dist_pk(vectors, members[u], q, metric_code)
            n_cand += 1
        for k in range(deg[v]):
            u = adj[v, k]
            if u == v or in_set[u]:
                continue
            in_set[u] = 1
            cand_ids[n_cand] = u
            cand_d[n_cand] = _dist_pk(vectors, members[u], q, metric_code)
            n_cand += 1
        for k in range(n_cand):
            in_set[cand_ids[k]] = 0

        if n_cand == 0:
            continue
        kept = prune_kernel(
            vectors, members, cand_ids, cand_d, n_cand, v, alpha_factor, R, metric_code, out_ids
        )
        for k in range(kept):
            adj[v, k] = out_ids[k]
        deg[v] = kept

        # reverse edges
        for k in range(kept):
            u = out_ids[k]
            present = False
            for j in range(deg[u]):
                if adj[u, j] == v:
                    present = True
                    break
            if present:
                continue
            if deg[u] < R:
                adj[u, deg[u]] = v
                deg[u] += 1
            else:
                qu = vectors[members[u]]
                n_rev = 0
                for j in range(deg[u]):
                    w = adj[u, j]
                    rev_ids[n_rev] = w
                    rev_d[n_rev] = _dist_pk(vectors, members[w], qu, metric_code)
                    n_rev += 1
                rev_ids[n_rev] = v
                rev_d[n_rev] = _dist_pk(vectors, members[v], qu, metric_code)
                n_rev += 1
                rev_kept = prune_kernel(
                    vectors, members, rev_ids, rev_d, n_rev, u, alpha_factor, R, metric_code, rev_out
                )
                for j in range(rev_kept):
                    adj[u, j] = rev_out[j]
                deg[u] = rev_kept
