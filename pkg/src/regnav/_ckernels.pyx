# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: grid BFS, ray casting and map-equation node moves.

Mirrors ``regnav._pykernels`` exactly (argument conventions and iteration
order), so both backends return identical results.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, floor, log2, M_PI

cnp.import_array()


def bfs_field(const unsigned char[:, :] passable, int r0, int c0):
    cdef Py_ssize_t rows = passable.shape[0], cols = passable.shape[1]
    dist_arr = np.full((rows, cols), -1, dtype=np.int32)
    cdef int[:, :] dist = dist_arr
    if not passable[r0, c0]:
        return dist_arr
    cdef cnp.ndarray[cnp.int32_t, ndim=1] qr_arr = np.empty(rows * cols, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] qc_arr = np.empty(rows * cols, dtype=np.int32)
    cdef int[:] qr = qr_arr
    cdef int[:] qc = qc_arr
    cdef Py_ssize_t head = 0, tail = 0
    cdef int r, c, rr, cc, d, k
    cdef int dr[4]
    cdef int dc[4]
    dr[0] = -1; dr[1] = 1; dr[2] = 0; dr[3] = 0
    dc[0] = 0; dc[1] = 0; dc[2] = -1; dc[3] = 1
    dist[r0, c0] = 0
    qr[tail] = r0
    qc[tail] = c0
    tail += 1
    while head < tail:
        r = qr[head]
        c = qc[head]
        head += 1
        d = dist[r, c] + 1
        for k in range(4):
            rr = r + dr[k]
            cc = c + dc[k]
            if 0 <= rr < rows and 0 <= cc < cols and passable[rr, cc] and dist[rr, cc] < 0:
                dist[rr, cc] = d
                qr[tail] = rr
                qc[tail] = cc
                tail += 1
    return dist_arr


def cast_rays(const unsigned char[:, :] passable, double x, double y,
              const double[:] angles_deg, double cell, double max_dist, double step):
    cdef Py_ssize_t rows = passable.shape[0], cols = passable.shape[1]
    cdef Py_ssize_t n = angles_deg.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[:] out = out_arr
    cdef int n_steps = <int>(max_dist / step)
    cdef Py_ssize_t k
    cdef int i, r, c
    cdef double rad, dx, dy, d, hit
    for k in range(n):
        rad = angles_deg[k] * (M_PI / 180.0)
        dx = cos(rad)
        dy = sin(rad)
        hit = max_dist
        for i in range(1, n_steps + 1):
            d = i * step
            c = <int>floor((x + d * dx) / cell)
            r = <int>floor((y + d * dy) / cell)
            if r < 0 or r >= rows or c < 0 or c >= cols or not passable[r, c]:
                hit = d
                break
        out[k] = hit
    return out_arr


cdef inline double _plogp(double x) nogil:
    return x * log2(x) if x > 0.0 else 0.0


def move_nodes(const long long[:] indptr, const long long[:] indices, const double[:] weights,
               const double[:] node_flow, const double[:] node_exit,
               long long[:] module, const long long[:] order,
               double[:] module_flow, double[:] module_exit, long long[:] module_size,
               int max_sweeps):
    cdef Py_ssize_t n = node_flow.shape[0]
    cdef double total_exit = 0.0
    cdef Py_ssize_t i, k, j, sweep
    for i in range(n):
        total_exit += module_exit[i]
    free_arr = np.empty(n, dtype=np.int64)
    link_w_arr = np.zeros(n, dtype=np.float64)
    touched_arr = np.empty(n, dtype=np.int64)
    seen_arr = np.zeros(n, dtype=np.uint8)
    cdef long long[:] free = free_arr
    cdef double[:] link_w = link_w_arr
    cdef long long[:] touched = touched_arr
    cdef unsigned char[:] seen = seen_arr
    cdef Py_ssize_t n_free = 0, n_touched
    for i in range(n - 1, -1, -1):
        if module_size[i] == 0:
            free[n_free] = i
            n_free += 1
    cdef long long moves = 0, moved, alpha, a, b, m, best
    cdef double p, e, qa_old, fa_old, qa_new, fa_new, qb_old, fb_old, qb_new, fb_new
    cdef double new_total, delta, best_delta, best_qb, w_a
    cdef bint use_free
    for sweep in range(max_sweeps):
        moved = 0
        for j in range(order.shape[0]):
            alpha = order[j]
            a = module[alpha]
            n_touched = 0
            for k in range(indptr[alpha], indptr[alpha + 1]):
                m = module[indices[k]]
                if not seen[m]:
                    seen[m] = 1
                    touched[n_touched] = m
                    n_touched += 1
                    link_w[m] = 0.0
                link_w[m] += weights[k]
            w_a = link_w[a] if seen[a] else 0.0
            p = node_flow[alpha]
            e = node_exit[alpha]
            qa_old = module_exit[a]
            fa_old = module_flow[a]
            qa_new = qa_old - e + 2.0 * w_a
            fa_new = fa_old - p
            best_delta = -1e-10
            best = -1
            best_qb = 0.0
            use_free = module_size[a] > 1 and n_free > 0
            for i in range(n_touched + (1 if use_free else 0)):
                if i < n_touched:
                    b = touched[i]
                    if b == a:
                        continue
                    qb_new = module_exit[b] + e - 2.0 * link_w[b]
                else:
                    b = free[n_free - 1]
                    qb_new = module_exit[b] + e - 2.0 * 0.0
                qb_old = module_exit[b]
                fb_old = module_flow[b]
                fb_new = fb_old + p
                new_total = total_exit - qa_old - qb_old + qa_new + qb_new
                delta = (
                    _plogp(new_total)
                    - _plogp(total_exit)
                    - 2.0 * (_plogp(qa_new) + _plogp(qb_new) - _plogp(qa_old) - _plogp(qb_old))
                    + _plogp(qa_new + fa_new)
                    + _plogp(qb_new + fb_new)
                    - _plogp(qa_old + fa_old)
                    - _plogp(qb_old + fb_old)
                )
                if delta < best_delta:
                    best_delta = delta
                    best = b
                    best_qb = qb_new
            for i in range(n_touched):
                seen[touched[i]] = 0
            if best < 0:
                continue
            b = best
            if module_size[b] == 0:
                n_free -= 1
            total_exit = total_exit - qa_old - module_exit[b] + qa_new + best_qb
            module_exit[a] = qa_new
            module_flow[a] = fa_new
            module_size[a] -= 1
            if module_size[a] == 0:
                total_exit -= module_exit[a]
                module_exit[a] = 0.0
                module_flow[a] = 0.0
                free[n_free] = a
                n_free += 1
            module_exit[b] = best_qb
            module_flow[b] += p
            module_size[b] += 1
            module[alpha] = b
            moved += 1
        moves += moved
        if moved == 0:
            break
    return moves
