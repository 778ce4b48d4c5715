"""Pure-Python/numpy implementations of the hot kernels.

Selected at import when the compiled extension is missing (or when
``MEMDEX_PURE_PYTHON=1``). Signatures and tie-breaking rules match
``_ckernels.pyx`` exactly; only the floating-point summation order inside a
single squared distance may differ.
"""

import heapq

import numpy as np

BACKEND = "python"

_POP8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


def sqdist_rows(data, query):
    diff = data - query
    return np.einsum("ij,ij->i", diff, diff)


def _select_k(d2, k):
    """Indices of the k smallest entries ordered by (d2, index)."""
    n = d2.shape[0]
    finite = np.isfinite(d2)
    n_ok = int(finite.sum())
    k = min(k, n_ok)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if k < n_ok:
        kth = np.partition(d2, k - 1)[k - 1]
        cand = np.flatnonzero(d2 <= kth)
    else:
        cand = np.flatnonzero(finite)
    order = np.lexsort((cand, d2[cand]))
    return cand[order[:k]].astype(np.int64)


def knn_exact(data, queries, k, owner, exclude):
    m = queries.shape[0]
    out_idx = np.full((m, k), -1, dtype=np.int64)
    out_d2 = np.full((m, k), np.inf)
    for qi in range(m):
        d2 = sqdist_rows(data, queries[qi])
        if exclude[qi] >= 0:
            d2[owner == exclude[qi]] = np.inf
        sel = _select_k(d2, k)
        out_idx[qi, : sel.shape[0]] = sel
        out_d2[qi, : sel.shape[0]] = d2[sel]
    return out_idx, out_d2


def kdtree_build(data, leaf_size, sample_size, rand):
    n, d = data.shape
    max_nodes = max(1, 2 * n)
    dims = np.full(max_nodes, -1, dtype=np.int64)
    vals = np.zeros(max_nodes)
    lefts = np.full(max_nodes, -1, dtype=np.int64)
    rights = np.full(max_nodes, -1, dtype=np.int64)
    los = np.zeros(max_nodes, dtype=np.int64)
    his = np.zeros(max_nodes, dtype=np.int64)
    perm = np.arange(n, dtype=np.int64)
    n_best = min(5, d)
    stack = [(0, 0, n)]
    next_id = 1
    while stack:
        node, lo, hi = stack.pop()
        los[node], his[node] = lo, hi
        cnt = hi - lo
        if cnt <= leaf_size:
            continue
        s = min(sample_size, cnt)
        sample = data[perm[lo:lo + s]]
        mean = sample.sum(axis=0) / s
        var = ((sample - mean) ** 2).sum(axis=0)
        top = np.lexsort((np.arange(d), -var))[:n_best]
        dim = int(top[int(rand[node]) % n_best])
        split = mean[dim]
        seg = perm[lo:hi]
        mask = data[seg, dim] < split
        nl = int(mask.sum())
        if nl == 0 or nl == cnt:
            nl = cnt // 2
        else:
            perm[lo:hi] = np.concatenate((seg[mask], seg[~mask]))
        dims[node], vals[node] = dim, split
        lefts[node], rights[node] = next_id, next_id + 1
        stack.append((next_id + 1, lo + nl, hi))
        stack.append((next_id, lo, lo + nl))
        next_id += 2
    return (perm, dims[:next_id].copy(), vals[:next_id].copy(), lefts[:next_id].copy(),
            rights[:next_id].copy(), los[:next_id].copy(), his[:next_id].copy())


def kdforest_search(data, queries, k, owner, exclude, perms, dims, vals, lefts, rights,
                    los, his, max_checks):
    m = queries.shape[0]
    n_trees = perms.shape[0]
    out_idx = np.full((m, k), -1, dtype=np.int64)
    out_d2 = np.full((m, k), np.inf)
    visited = np.zeros(data.shape[0], dtype=bool)
    for qi in range(m):
        q = queries[qi]
        ex = exclude[qi]
        # max-heap of the k best as (-d2, -idx)
        best = []
        branches = []
        touched = []
        checks = 0

        def worst():
            return -best[0][0] if len(best) == k else np.inf

        def descend(t, node, md):
            nonlocal checks
            dim_t, val_t = dims[t], vals[t]
            while dim_t[node] >= 0:
                diff = q[dim_t[node]] - val_t[node]
                if diff < 0:
                    near, far = lefts[t, node], rights[t, node]
                else:
                    near, far = rights[t, node], lefts[t, node]
                cut = md + diff * diff
                if len(best) < k or cut < worst():
                    heapq.heappush(branches, (cut, t, int(far)))
                node = near
            pts = perms[t, los[t, node]:his[t, node]]
            pts = pts[~visited[pts]]
            visited[pts] = True
            touched.append(pts)
            if ex >= 0:
                pts = pts[owner[pts] != ex]
            if pts.shape[0] == 0:
                return
            checks += pts.shape[0]
            d2 = sqdist_rows(data[pts], q)
            for dd, p in zip(d2.tolist(), pts.tolist()):
                if len(best) < k:
                    heapq.heappush(best, (-dd, -p))
                elif (dd, p) < (-best[0][0], -best[0][1]):
                    heapq.heapreplace(best, (-dd, -p))

        for t in range(n_trees):
            descend(t, 0, 0.0)
        while branches and (checks < max_checks or len(best) < k):
            md, t, node = heapq.heappop(branches)
            if len(best) == k and md > worst():
                break
            descend(t, node, md)
        for pts in touched:
            visited[pts] = False
        ranked = sorted((-nd, -ni) for nd, ni in best)
        for j, (dd, p) in enumerate(ranked):
            out_idx[qi, j] = p
            out_d2[qi, j] = dd
    return out_idx, out_d2


def hamming_matrix(a_packed, b_packed):
    x = np.bitwise_xor(a_packed[:, None, :], b_packed[None, :, :])
    return _POP8[x].sum(axis=-1)
