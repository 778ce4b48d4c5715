# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: brute-force and kd-forest neighbor search, Hamming distances.

Every loop runs without the GIL so callers can fan queries out over threads.
Semantics (tie rules, traversal order) mirror ``_pykernels.py``.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t, uint32_t, uint8_t
from libc.stdlib cimport malloc, calloc, realloc, free
from libc.math cimport INFINITY
from libc.string cimport memcpy

cnp.import_array()

BACKEND = "cython"

ctypedef int int32_stamp_t


cdef struct Branch:
    double cut
    int64_t tree
    int64_t node


cdef inline double _sqdist(const double* a, const double* b, Py_ssize_t d) noexcept nogil:
    cdef double acc = 0.0, t
    cdef Py_ssize_t j
    for j in range(d):
        t = a[j] - b[j]
        acc += t * t
    return acc


# -- bounded max-heap over (d2, idx); root is the current worst -------------

cdef inline bint _gt(double da, int64_t ia, double db, int64_t ib) noexcept nogil:
    return da > db or (da == db and ia > ib)


cdef void _res_sift_down(double* hd, int64_t* hi, Py_ssize_t pos, Py_ssize_t size) noexcept nogil:
    cdef Py_ssize_t child
    cdef double td
    cdef int64_t ti
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and _gt(hd[child + 1], hi[child + 1], hd[child], hi[child]):
            child += 1
        if _gt(hd[child], hi[child], hd[pos], hi[pos]):
            td = hd[pos]; hd[pos] = hd[child]; hd[child] = td
            ti = hi[pos]; hi[pos] = hi[child]; hi[child] = ti
            pos = child
        else:
            break


cdef void _res_push(double* hd, int64_t* hi, Py_ssize_t* size, Py_ssize_t k,
                    double d, int64_t i) noexcept nogil:
    cdef Py_ssize_t pos, parent
    if size[0] < k:
        pos = size[0]
        size[0] += 1
        hd[pos] = d; hi[pos] = i
        while pos > 0:
            parent = (pos - 1) // 2
            if _gt(hd[pos], hi[pos], hd[parent], hi[parent]):
                hd[pos], hd[parent] = hd[parent], hd[pos]
                hi[pos], hi[parent] = hi[parent], hi[pos]
                pos = parent
            else:
                break
    elif _gt(hd[0], hi[0], d, i):
        hd[0] = d; hi[0] = i
        _res_sift_down(hd, hi, 0, size[0])


cdef void _res_sort(double* hd, int64_t* hi, Py_ssize_t size) noexcept nogil:
    cdef Py_ssize_t end
    for end in range(size - 1, 0, -1):
        hd[0], hd[end] = hd[end], hd[0]
        hi[0], hi[end] = hi[end], hi[0]
        _res_sift_down(hd, hi, 0, end)


# -- min-heap of pending branches, ordered by (cut, tree, node) -------------

cdef inline bint _br_lt(Branch a, Branch b) noexcept nogil:
    if a.cut != b.cut:
        return a.cut < b.cut
    if a.tree != b.tree:
        return a.tree < b.tree
    return a.node < b.node


cdef int _br_push(Branch** heap, Py_ssize_t* size, Py_ssize_t* cap, Branch b) noexcept nogil:
    cdef Py_ssize_t pos, parent
    cdef Branch* grown
    cdef Branch tmp
    if size[0] == cap[0]:
        grown = <Branch*> realloc(heap[0], 2 * cap[0] * sizeof(Branch))
        if grown == NULL:
            return -1
        heap[0] = grown
        cap[0] *= 2
    pos = size[0]
    size[0] += 1
    heap[0][pos] = b
    while pos > 0:
        parent = (pos - 1) // 2
        if _br_lt(heap[0][pos], heap[0][parent]):
            tmp = heap[0][pos]; heap[0][pos] = heap[0][parent]; heap[0][parent] = tmp
            pos = parent
        else:
            break
    return 0


cdef Branch _br_pop(Branch* heap, Py_ssize_t* size) noexcept nogil:
    cdef Branch top = heap[0]
    cdef Branch tmp
    cdef Py_ssize_t pos = 0, child, n
    size[0] -= 1
    n = size[0]
    heap[0] = heap[n]
    while True:
        child = 2 * pos + 1
        if child >= n:
            break
        if child + 1 < n and _br_lt(heap[child + 1], heap[child]):
            child += 1
        if _br_lt(heap[child], heap[pos]):
            tmp = heap[pos]; heap[pos] = heap[child]; heap[child] = tmp
            pos = child
        else:
            break
    return top


def sqdist_rows(const double[:, ::1] data, const double[::1] query):
    cdef Py_ssize_t n = data.shape[0], d = data.shape[1], i
    out = np.empty(n)
    cdef double[::1] o = out
    if n == 0:
        return out
    with nogil:
        for i in range(n):
            o[i] = _sqdist(&data[i, 0], &query[0], d)
    return out


def knn_exact(const double[:, ::1] data, const double[:, ::1] queries, Py_ssize_t k,
              const int64_t[::1] owner, const int64_t[::1] exclude):
    cdef Py_ssize_t n = data.shape[0], d = data.shape[1], m = queries.shape[0]
    cdef Py_ssize_t qi, p, size, j
    cdef int64_t ex
    out_idx = np.full((m, k), -1, dtype=np.int64)
    out_d2 = np.full((m, k), np.inf)
    cdef int64_t[:, ::1] oi = out_idx
    cdef double[:, ::1] od = out_d2
    if n == 0 or m == 0 or k == 0:
        return out_idx, out_d2
    cdef double* hd = <double*> malloc(k * sizeof(double))
    cdef int64_t* hi = <int64_t*> malloc(k * sizeof(int64_t))
    if hd == NULL or hi == NULL:
        free(hd); free(hi)
        raise MemoryError()
    with nogil:
        for qi in range(m):
            ex = exclude[qi]
            size = 0
            for p in range(n):
                if ex >= 0 and owner[p] == ex:
                    continue
                _res_push(hd, hi, &size, k, _sqdist(&data[p, 0], &queries[qi, 0], d), p)
            _res_sort(hd, hi, size)
            for j in range(size):
                oi[qi, j] = hi[j]
                od[qi, j] = hd[j]
    free(hd); free(hi)
    return out_idx, out_d2


def kdtree_build(const double[:, ::1] data, Py_ssize_t leaf_size, Py_ssize_t sample_size,
                 const uint32_t[::1] rand):
    cdef Py_ssize_t n = data.shape[0], d = data.shape[1]
    cdef Py_ssize_t max_nodes = max(1, 2 * n)
    perm_a = np.arange(n, dtype=np.int64)
    dims_a = np.full(max_nodes, -1, dtype=np.int64)
    vals_a = np.zeros(max_nodes)
    lefts_a = np.full(max_nodes, -1, dtype=np.int64)
    rights_a = np.full(max_nodes, -1, dtype=np.int64)
    los_a = np.zeros(max_nodes, dtype=np.int64)
    his_a = np.zeros(max_nodes, dtype=np.int64)
    cdef int64_t[::1] perm = perm_a, dims = dims_a, lefts = lefts_a, rights = rights_a
    cdef int64_t[::1] los = los_a, his = his_a
    cdef double[::1] vals = vals_a
    cdef Py_ssize_t n_best = min(5, d)

    cdef double* mean = <double*> malloc(max(d, 1) * sizeof(double))
    cdef double* var = <double*> malloc(max(d, 1) * sizeof(double))
    cdef bint* chosen = <bint*> malloc(max(d, 1) * sizeof(bint))
    cdef int64_t* tmp = <int64_t*> malloc(max(n, 1) * sizeof(int64_t))
    cdef int64_t* stack = <int64_t*> malloc(3 * (max_nodes + 1) * sizeof(int64_t))
    if mean == NULL or var == NULL or chosen == NULL or tmp == NULL or stack == NULL:
        free(mean); free(var); free(chosen); free(tmp); free(stack)
        raise MemoryError()

    cdef Py_ssize_t sp = 0, next_id = 1, node, lo, hi, cnt, s, i, j, b, best_j, dim
    cdef Py_ssize_t nl, nr
    cdef double split, x, best_v
    with nogil:
        stack[0] = 0; stack[1] = 0; stack[2] = n
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[3 * sp]; lo = stack[3 * sp + 1]; hi = stack[3 * sp + 2]
            los[node] = lo; his[node] = hi
            cnt = hi - lo
            if cnt <= leaf_size:
                continue
            s = min(sample_size, cnt)
            for j in range(d):
                mean[j] = 0.0
                var[j] = 0.0
                chosen[j] = False
            for i in range(s):
                for j in range(d):
                    mean[j] += data[perm[lo + i], j]
            for j in range(d):
                mean[j] = mean[j] / s
            for i in range(s):
                for j in range(d):
                    x = data[perm[lo + i], j] - mean[j]
                    var[j] += x * x
            # rank-th highest variance, ties to the lower dimension
            dim = -1
            for b in range(<Py_ssize_t> (rand[node] % n_best) + 1):
                best_j = -1
                best_v = -INFINITY
                for j in range(d):
                    if not chosen[j] and var[j] > best_v:
                        best_v = var[j]
                        best_j = j
                chosen[best_j] = True
                dim = best_j
            split = mean[dim]
            nl = 0
            nr = 0
            for i in range(lo, hi):
                if data[perm[i], dim] < split:
                    nl += 1
            if nl == 0 or nl == cnt:
                nl = cnt // 2
            else:
                j = 0
                for i in range(lo, hi):
                    if data[perm[i], dim] < split:
                        tmp[j] = perm[i]
                        j += 1
                for i in range(lo, hi):
                    if not (data[perm[i], dim] < split):
                        tmp[j] = perm[i]
                        j += 1
                for i in range(cnt):
                    perm[lo + i] = tmp[i]
            dims[node] = dim
            vals[node] = split
            lefts[node] = next_id
            rights[node] = next_id + 1
            stack[3 * sp] = next_id + 1; stack[3 * sp + 1] = lo + nl; stack[3 * sp + 2] = hi
            sp += 1
            stack[3 * sp] = next_id; stack[3 * sp + 1] = lo; stack[3 * sp + 2] = lo + nl
            sp += 1
            next_id += 2
    free(mean); free(var); free(chosen); free(tmp); free(stack)
    return (perm_a, dims_a[:next_id].copy(), vals_a[:next_id].copy(),
            lefts_a[:next_id].copy(), rights_a[:next_id].copy(),
            los_a[:next_id].copy(), his_a[:next_id].copy())


cdef struct Forest:
    const double* data
    Py_ssize_t d
    const int64_t* owner
    const int64_t* perms
    const int64_t* dims
    const double* vals
    const int64_t* lefts
    const int64_t* rights
    const int64_t* los
    const int64_t* his
    Py_ssize_t n
    Py_ssize_t n_nodes


cdef int _descend(Forest* f, const double* q, int64_t ex, Py_ssize_t t, int64_t node, double md,
                  Py_ssize_t k, double* hd, int64_t* hi, Py_ssize_t* size,
                  Branch** heap, Py_ssize_t* hsize, Py_ssize_t* hcap,
                  int32_stamp_t* visited, int32_stamp_t stamp, Py_ssize_t* checks) noexcept nogil:
    cdef Py_ssize_t base = t * f.n_nodes
    cdef int64_t dim, near, far, p
    cdef double diff, cut, worst
    cdef Py_ssize_t i
    cdef Branch br
    while f.dims[base + node] >= 0:
        dim = f.dims[base + node]
        diff = q[dim] - f.vals[base + node]
        if diff < 0:
            near = f.lefts[base + node]; far = f.rights[base + node]
        else:
            near = f.rights[base + node]; far = f.lefts[base + node]
        cut = md + diff * diff
        worst = hd[0] if size[0] == k else INFINITY
        if size[0] < k or cut < worst:
            br.cut = cut; br.tree = t; br.node = far
            if _br_push(heap, hsize, hcap, br) != 0:
                return -1
        node = near
    for i in range(f.los[base + node], f.his[base + node]):
        p = f.perms[t * f.n + i]
        if visited[p] == stamp:
            continue
        visited[p] = stamp
        if ex >= 0 and f.owner[p] == ex:
            continue
        checks[0] += 1
        _res_push(hd, hi, size, k, _sqdist(f.data + p * f.d, q, f.d), p)
    return 0



def kdforest_search(const double[:, ::1] data, const double[:, ::1] queries, Py_ssize_t k,
                    const int64_t[::1] owner, const int64_t[::1] exclude,
                    const int64_t[:, ::1] perms, const int64_t[:, ::1] dims,
                    const double[:, ::1] vals, const int64_t[:, ::1] lefts,
                    const int64_t[:, ::1] rights, const int64_t[:, ::1] los,
                    const int64_t[:, ::1] his, Py_ssize_t max_checks):
    cdef Py_ssize_t n = data.shape[0], m = queries.shape[0], n_trees = perms.shape[0]
    out_idx = np.full((m, k), -1, dtype=np.int64)
    out_d2 = np.full((m, k), np.inf)
    cdef int64_t[:, ::1] oi = out_idx
    cdef double[:, ::1] od = out_d2
    if n == 0 or m == 0 or k == 0:
        return out_idx, out_d2
    cdef Forest f
    f.data = &data[0, 0]; f.d = data.shape[1]; f.owner = &owner[0]
    f.perms = &perms[0, 0]; f.dims = &dims[0, 0]; f.vals = &vals[0, 0]
    f.lefts = &lefts[0, 0]; f.rights = &rights[0, 0]; f.los = &los[0, 0]; f.his = &his[0, 0]
    f.n = n; f.n_nodes = dims.shape[1]

    cdef double* hd = <double*> malloc(k * sizeof(double))
    cdef int64_t* hi = <int64_t*> malloc(k * sizeof(int64_t))
    cdef Py_ssize_t hcap = 64
    cdef Branch* heap = <Branch*> malloc(hcap * sizeof(Branch))
    cdef int32_stamp_t* visited = <int32_stamp_t*> calloc(n, sizeof(int32_stamp_t))
    if hd == NULL or hi == NULL or heap == NULL or visited == NULL:
        free(hd); free(hi); free(heap); free(visited)
        raise MemoryError()
    cdef Py_ssize_t qi, t, size, hsize, checks, j
    cdef int failed = 0
    cdef Branch br
    cdef const double* q
    with nogil:
        for qi in range(m):
            q = &queries[qi, 0]
            size = 0
            hsize = 0
            checks = 0
            for t in range(n_trees):
                if _descend(&f, q, exclude[qi], t, 0, 0.0, k, hd, hi, &size, &heap, &hsize,
                            &hcap, visited, <int32_stamp_t> (qi + 1), &checks) != 0:
                    failed = 1
                    break
            while failed == 0 and hsize > 0 and (checks < max_checks or size < k):
                br = _br_pop(heap, &hsize)
                if size == k and br.cut > hd[0]:
                    break
                if _descend(&f, q, exclude[qi], br.tree, br.node, br.cut, k, hd, hi, &size,
                            &heap, &hsize, &hcap, visited, <int32_stamp_t> (qi + 1),
                            &checks) != 0:
                    failed = 1
            if failed:
                break
            _res_sort(hd, hi, size)
            for j in range(size):
                oi[qi, j] = hi[j]
                od[qi, j] = hd[j]
    free(hd); free(hi); free(heap); free(visited)
    if failed:
        raise MemoryError()
    return out_idx, out_d2


def hamming_matrix(const uint8_t[:, ::1] a_packed, const uint8_t[:, ::1] b_packed):
    cdef Py_ssize_t m = a_packed.shape[0], n = b_packed.shape[0], w = a_packed.shape[1]
    cdef Py_ssize_t i, j, c
    cdef int64_t acc
    cdef uint64_t wa, wb
    out = np.zeros((m, n), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    if w == 0:
        return out
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0
                c = 0
                while c + 8 <= w:
                    memcpy(&wa, &a_packed[i, c], 8)
                    memcpy(&wb, &b_packed[j, c], 8)
                    acc += __builtin_popcountll(wa ^ wb)
                    c += 8
                while c < w:
                    acc += __builtin_popcount(a_packed[i, c] ^ b_packed[j, c])
                    c += 1
                o[i, j] = acc
    return out


cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil
    int __builtin_popcount(unsigned int) nogil
