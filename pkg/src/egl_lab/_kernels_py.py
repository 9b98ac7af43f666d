"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``.

Signatures, tie-breaking and outputs mirror the Cython module exactly.
"""

import numpy as np

BACKEND = "python"


def topk_indices(preds, k):
    preds = np.asarray(preds, dtype=np.float64)
    if k < 1 or k > preds.shape[1]:
        raise ValueError(f"k={k} outside [1, {preds.shape[1]}]")
    # stable sort on the negated values keeps the lowest index first on ties
    order = np.argsort(-preds, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k]).astype(np.int64)


def topk_values(preds, labels, k):
    if np.shape(labels)[0] != np.shape(preds)[1]:
        raise ValueError("labels do not match the prediction length")
    idx = topk_indices(preds, k)
    return np.asarray(labels, dtype=np.float64)[idx].sum(axis=1)


def _check_combos(combos, m):
    arr = np.asarray(combos)
    if arr.shape[0] == 0 or arr.min() < 0 or arr.max() >= m:
        raise ValueError(f"subset indices must lie in [0, {m})")


def _values_for_all(ctr, combos):
    # ctr: (S, M, N) already clamped; returns (S, C)
    miss = 1.0 - ctr[:, combos, :]  # (S, C, K, N)
    return (1.0 - miss.prod(axis=2)).sum(axis=2)


def webadv_best_subsets(preds, combos):
    ctr = np.clip(np.asarray(preds, dtype=np.float64), 0.0, 1.0)
    _check_combos(combos, ctr.shape[1])
    vals = _values_for_all(ctr, np.asarray(combos))
    # argmax returns the first maximiser, i.e. the lexicographically smallest
    return vals.argmax(axis=1).astype(np.int64)


def webadv_subset_values(labels, combos):
    ctr = np.clip(np.asarray(labels, dtype=np.float64), 0.0, 1.0)
    _check_combos(combos, ctr.shape[0])
    return _values_for_all(ctr[None], np.asarray(combos))[0]


def frank_wolfe(yhat, q, lam, max_iter, gap_tol):
    yhat = np.asarray(yhat, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = yhat.shape[0]
    if q.shape != (d, d):
        raise ValueError("Q does not match the prediction length")
    s = int(np.argmax(yhat))
    z = np.zeros(d)
    z[s] = 1.0
    qz = q[:, s].copy()
    zqz = q[s, s]
    gap = np.inf
    for it in range(max_iter + 1):
        if it % 200 == 199:
            qz = q @ z
            zqz = float(z @ qz)
        grad = yhat - 2.0 * lam * qz
        gz = float(grad @ z)
        s = int(np.argmax(grad))
        support = np.flatnonzero(z > 0.0)
        v = int(support[np.argmin(grad[support])])
        gap = grad[s] - gz
        if gap <= gap_tol:
            return z, gap, it, True
        if it == max_iter:
            break
        away_gap = gz - grad[v]
        away = away_gap > gap and z[v] < 1.0
        if away:
            step_max = z[v] / (1.0 - z[v])
            gd = away_gap
            dqz = zqz - qz[v]
            dqd = zqz - 2.0 * qz[v] + q[v, v]
        else:
            step_max = 1.0
            gd = gap
            dqz = qz[s] - zqz
            dqd = q[s, s] - 2.0 * qz[s] + zqz
        if lam * dqd > 0.0:
            step = min(gd / (2.0 * lam * dqd), step_max)
        else:
            step = step_max
        zqz = zqz + 2.0 * step * dqz + step * step * dqd
        if away:
            qz = qz + step * (qz - q[:, v])
            z = z * (1.0 + step)
            z[v] -= step
            if step == step_max:
                z[v] = 0.0
        else:
            qz = qz + step * (q[:, s] - qz)
            z = z * (1.0 - step)
            z[s] += step
    return z, gap, max_iter, False


def frank_wolfe_batch(yhats, q, lam, max_iter, gap_tol):
    yhats = np.asarray(yhats, dtype=np.float64)
    n = yhats.shape[0]
    zs = np.zeros_like(yhats)
    gaps = np.zeros(n)
    iters = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    for i in range(n):
        zs[i], gaps[i], iters[i], converged[i] = frank_wolfe(
            yhats[i], q, lam, max_iter, gap_tol
        )
    return zs, gaps, iters, converged
