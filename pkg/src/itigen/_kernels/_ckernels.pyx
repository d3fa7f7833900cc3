# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementation of the fused prompt-loss kernel.

Same contract as ``_pykernels.prompt_losses``; arrays must already be
C-contiguous float64 / int64 (the package wrapper takes care of that).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, NAN, INFINITY

cnp.import_array()

ctypedef cnp.int64_t i64


def prompt_losses(const double[:, ::1] E, const double[::1] e_T,
                  const i64[:, ::1] combos, const i64[::1] sizes,
                  const double[:, ::1] delta_I, const double[:, ::1] feats,
                  const i64[::1] feat_attr, const i64[::1] feat_cat,
                  double lam, int sem_mode, bint use_dir, bint normalize):
    cdef Py_ssize_t P = E.shape[0], d = E.shape[1], M = sizes.shape[0]
    cdef Py_ssize_t n = feats.shape[0]
    cdef Py_ssize_t m, i, j, p, q, k, t, c, total_cats = 0, worst
    cdef double ci, cj, norm, dot, h, acc, w, l_sem = 0.0
    cdef double l_dir = NAN, l_cos = NAN, best

    grad_arr = np.zeros((P, d), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr

    offsets_arr = np.zeros(M + 1, dtype=np.int64)
    cdef i64[::1] offsets = offsets_arr
    for m in range(M):
        offsets[m + 1] = offsets[m] + sizes[m]
    total_cats = offsets[M]
    counts_arr = np.zeros(total_cats, dtype=np.float64)
    cdef double[::1] counts = counts_arr
    for q in range(P):
        for m in range(M):
            counts[offsets[m] + combos[q, m]] += 1.0

    dP_arr = np.zeros(d, dtype=np.float64)
    g_arr = np.zeros(d, dtype=np.float64)
    cdef double[::1] dP = dP_arr
    cdef double[::1] g = g_arr

    if use_dir:
        l_dir = 0.0
        p = 0
        for m in range(M):
            for i in range(sizes[m]):
                for j in range(i + 1, sizes[m]):
                    ci = 1.0 / counts[offsets[m] + i]
                    cj = 1.0 / counts[offsets[m] + j]
                    for t in range(d):
                        dP[t] = 0.0
                    for q in range(P):
                        c = combos[q, m]
                        if c == i:
                            for t in range(d):
                                dP[t] += E[q, t] * ci
                        elif c == j:
                            for t in range(d):
                                dP[t] -= E[q, t] * cj
                    if normalize:
                        norm = 0.0
                        for t in range(d):
                            norm += dP[t] * dP[t]
                        norm = sqrt(norm)
                        if norm < 1e-12:
                            l_dir += 1.0
                            p += 1
                            continue
                        dot = 0.0
                        for t in range(d):
                            dot += delta_I[p, t] * dP[t]
                        dot /= norm
                        l_dir += 1.0 - dot
                        for t in range(d):
                            g[t] = -(delta_I[p, t] - dot * dP[t] / norm) / norm
                    else:
                        dot = 0.0
                        for t in range(d):
                            dot += delta_I[p, t] * dP[t]
                            g[t] = -delta_I[p, t]
                        l_dir += 1.0 - dot
                    for q in range(P):
                        c = combos[q, m]
                        if c == i:
                            for t in range(d):
                                grad[q, t] += g[t] * ci
                        elif c == j:
                            for t in range(d):
                                grad[q, t] -= g[t] * cj
                    p += 1

    if n > 0:
        acc = 0.0
        for k in range(n):
            m = feat_attr[k]
            i = feat_cat[k]
            w = 1.0 / counts[offsets[m] + i]
            for q in range(P):
                if combos[q, m] != i:
                    continue
                dot = 0.0
                for t in range(d):
                    dot += feats[k, t] * E[q, t]
                acc += w * dot
                if not use_dir:
                    for t in range(d):
                        grad[q, t] -= feats[k, t] * w / n
        l_cos = 1.0 - acc / n

    s_arr = np.zeros(P, dtype=np.float64)
    cdef double[::1] s = s_arr
    for q in range(P):
        dot = 0.0
        for t in range(d):
            dot += E[q, t] * e_T[t]
        s[q] = dot

    for m in range(M):
        for i in range(sizes[m]):
            for j in range(i + 1, sizes[m]):
                if sem_mode == 0:
                    best = INFINITY
                    worst = -1
                    for q in range(P):
                        c = combos[q, m]
                        if (c == i or c == j) and s[q] < best:
                            best = s[q]
                            worst = q
                    h = lam - best
                    if worst >= 0 and h > 0:
                        l_sem += h
                        for t in range(d):
                            grad[worst, t] -= e_T[t]
                else:
                    for q in range(P):
                        c = combos[q, m]
                        if (c == i or c == j) and s[q] < lam:
                            l_sem += lam - s[q]
                            for t in range(d):
                                grad[q, t] -= e_T[t]

    return l_dir, l_cos, l_sem, grad_arr
