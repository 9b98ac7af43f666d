# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops for batched decision solving.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature, tie-breaking and return layout. ``egl_lab.kernels`` picks one at
import time.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

BACKEND = "cython"


cdef inline double _clamp01(double v) noexcept nogil:
    if v < 0.0:
        return 0.0
    if v > 1.0:
        return 1.0
    return v


def topk_indices(double[:, ::1] preds, int k):
    """Indices of the k largest entries per row, lowest index wins ties."""
    cdef Py_ssize_t s, n_rows = preds.shape[0], d = preds.shape[1]
    cdef Py_ssize_t i, j, best
    cdef double best_val
    if k < 1 or k > d:
        raise ValueError(f"k={k} outside [1, {d}]")
    out_arr = np.empty((n_rows, k), dtype=np.int64)
    taken_arr = np.zeros(d, dtype=np.uint8)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef cnp.uint8_t[::1] taken = taken_arr
    with nogil:
        for s in range(n_rows):
            for i in range(d):
                taken[i] = 0
            for j in range(k):
                best = -1
                best_val = 0.0
                for i in range(d):
                    if taken[i]:
                        continue
                    if best < 0 or preds[s, i] > best_val:
                        best = i
                        best_val = preds[s, i]
                taken[best] = 1
                out[s, j] = best
    return out_arr


def topk_values(double[:, ::1] preds, double[::1] labels, int k):
    """Objective under ``labels`` of the top-k decision induced by each row."""
    if labels.shape[0] != preds.shape[1]:
        raise ValueError("labels do not match the prediction length")
    idx = topk_indices(preds, k)
    cdef cnp.int64_t[:, ::1] chosen = idx
    cdef Py_ssize_t s, j, n_rows = preds.shape[0]
    out_arr = np.zeros(n_rows, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for s in range(n_rows):
            for j in range(k):
                out[s] += labels[chosen[s, j]]
    return out_arr


cdef double _subset_value(double[:, ::1] ctr, cnp.int64_t[:, ::1] combos,
                          Py_ssize_t c) noexcept nogil:
    cdef Py_ssize_t j, t, n_users = ctr.shape[1], k = combos.shape[1]
    cdef double total = 0.0, miss
    for j in range(n_users):
        miss = 1.0
        for t in range(k):
            miss *= 1.0 - _clamp01(ctr[combos[c, t], j])
        total += 1.0 - miss
    return total


def _check_combos(combos, m):
    arr = np.asarray(combos)
    if arr.shape[0] == 0 or arr.min() < 0 or arr.max() >= m:
        raise ValueError(f"subset indices must lie in [0, {m})")


def webadv_best_subsets(double[:, :, ::1] preds, cnp.int64_t[:, ::1] combos):
    """Index into ``combos`` of the best subset for every (M, N) prediction.

    ``combos`` must be listed in lexicographic order; the first maximiser
    wins so ties resolve to the lexicographically smallest subset.
    """
    cdef Py_ssize_t s, c, n_rows = preds.shape[0], n_combos = combos.shape[0]
    cdef Py_ssize_t best
    cdef double val, best_val
    _check_combos(combos, preds.shape[1])
    out_arr = np.empty(n_rows, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    with nogil:
        for s in range(n_rows):
            best = 0
            best_val = _subset_value(preds[s], combos, 0)
            for c in range(1, n_combos):
                val = _subset_value(preds[s], combos, c)
                if val > best_val:
                    best_val = val
                    best = c
            out[s] = best
    return out_arr


def webadv_subset_values(double[:, ::1] labels, cnp.int64_t[:, ::1] combos):
    """Objective of every subset in ``combos`` under one (M, N) CTR matrix."""
    cdef Py_ssize_t c, n_combos = combos.shape[0]
    _check_combos(combos, labels.shape[0])
    out_arr = np.empty(n_combos, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for c in range(n_combos):
            out[c] = _subset_value(labels, combos, c)
    return out_arr


cdef int _fw_solve(double[::1] yhat, double[:, ::1] q, double lam,
                   int max_iter, double gap_tol, double[::1] z, double[::1] qz,
                   double[::1] grad, double* gap_out) noexcept nogil:
    """Away-step Frank-Wolfe for max z'y - lam z'Qz on the simplex.

    Returns the iteration count, negative when the budget ran out.
    """
    cdef Py_ssize_t d = yhat.shape[0]
    cdef Py_ssize_t i, s_idx, v_idx, it
    cdef double zqz, gz, fw_gap, away_gap, dqd, dqz, gd, step, step_max
    cdef double gmax, gmin
    cdef bint away

    s_idx = 0
    for i in range(1, d):
        if yhat[i] > yhat[s_idx]:
            s_idx = i
    for i in range(d):
        z[i] = 0.0
        qz[i] = q[i, s_idx]
    z[s_idx] = 1.0
    zqz = q[s_idx, s_idx]

    for it in range(max_iter + 1):
        if it % 200 == 199:
            # refresh accumulated quantities against drift
            zqz = 0.0
            for i in range(d):
                qz[i] = 0.0
            for i in range(d):
                if z[i] != 0.0:
                    for s_idx in range(d):
                        qz[s_idx] += q[s_idx, i] * z[i]
            for i in range(d):
                zqz += z[i] * qz[i]

        gz = 0.0
        for i in range(d):
            grad[i] = yhat[i] - 2.0 * lam * qz[i]
            gz += grad[i] * z[i]
        s_idx = 0
        gmax = grad[0]
        v_idx = -1
        gmin = 0.0
        for i in range(d):
            if grad[i] > gmax:
                gmax = grad[i]
                s_idx = i
            if z[i] > 0.0 and (v_idx < 0 or grad[i] < gmin):
                gmin = grad[i]
                v_idx = i
        fw_gap = gmax - gz
        gap_out[0] = fw_gap
        if fw_gap <= gap_tol:
            return it
        if it == max_iter:
            break
        away_gap = gz - gmin
        away = away_gap > fw_gap and z[v_idx] < 1.0
        if away:
            # d = z - e_v
            step_max = z[v_idx] / (1.0 - z[v_idx])
            gd = away_gap
            dqz = zqz - qz[v_idx]
            dqd = zqz - 2.0 * qz[v_idx] + q[v_idx, v_idx]
        else:
            # d = e_s - z
            step_max = 1.0
            gd = fw_gap
            dqz = qz[s_idx] - zqz
            dqd = q[s_idx, s_idx] - 2.0 * qz[s_idx] + zqz
        if lam * dqd > 0.0:
            step = gd / (2.0 * lam * dqd)
            if step > step_max:
                step = step_max
        else:
            step = step_max

        zqz = zqz + 2.0 * step * dqz + step * step * dqd
        if away:
            for i in range(d):
                qz[i] = qz[i] + step * (qz[i] - q[i, v_idx])
                z[i] = z[i] * (1.0 + step)
            z[v_idx] -= step
            if step == step_max:
                z[v_idx] = 0.0
        else:
            for i in range(d):
                qz[i] = qz[i] + step * (q[i, s_idx] - qz[i])
                z[i] = z[i] * (1.0 - step)
            z[s_idx] += step
    return -max_iter


def frank_wolfe(double[::1] yhat, double[:, ::1] q, double lam,
                int max_iter, double gap_tol):
    """Solve one simplex QP; returns ``(z, gap, iterations, converged)``."""
    cdef Py_ssize_t d = yhat.shape[0]
    if q.shape[0] != d or q.shape[1] != d:
        raise ValueError("Q does not match the prediction length")
    z_arr = np.zeros(d)
    qz_arr = np.zeros(d)
    g_arr = np.zeros(d)
    cdef double[::1] z = z_arr
    cdef double[::1] qz = qz_arr
    cdef double[::1] g = g_arr
    cdef double gap = 0.0
    cdef int it
    with nogil:
        it = _fw_solve(yhat, q, lam, max_iter, gap_tol, z, qz, g, &gap)
    if it < 0:
        return z_arr, gap, -it, False
    return z_arr, gap, it, True


def frank_wolfe_batch(double[:, ::1] yhats, double[:, ::1] q, double lam,
                      int max_iter, double gap_tol):
    """Row-wise ``frank_wolfe``; returns ``(Z, gaps, iterations, converged)``."""
    cdef Py_ssize_t s, n_rows = yhats.shape[0], d = yhats.shape[1]
    if q.shape[0] != d or q.shape[1] != d:
        raise ValueError("Q does not match the prediction length")
    z_arr = np.zeros((n_rows, d))
    gaps_arr = np.zeros(n_rows)
    iters_arr = np.zeros(n_rows, dtype=np.int64)
    qz_arr = np.zeros(d)
    g_arr = np.zeros(d)
    cdef double[:, ::1] zs = z_arr
    cdef double[::1] gaps = gaps_arr
    cdef cnp.int64_t[::1] iters = iters_arr
    cdef double[::1] qz = qz_arr
    cdef double[::1] g = g_arr
    cdef double gap
    cdef int it
    with nogil:
        for s in range(n_rows):
            it = _fw_solve(yhats[s], q, lam, max_iter, gap_tol, zs[s], qz, g, &gap)
            gaps[s] = gap
            iters[s] = it
    converged = iters_arr >= 0
    return z_arr, gaps_arr, np.abs(iters_arr), converged
