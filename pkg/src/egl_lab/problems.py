"""Concrete decision problems: top-k selection, web advertising, portfolio."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import DecisionProblem
from .errors import CapabilityError, InputError, SolverError

MAX_EXACT_SITES = 20
MAX_ENUMERATION = 10**6


def topk_solve(preds, k):
    """Binary selection of the ``k`` largest entries, lowest index on ties."""
    preds = np.asarray(preds, dtype=np.float64).ravel()
    if not 1 <= k <= preds.size:
        raise InputError(f"K={k} must lie in [1, {preds.size}]")
    z = np.zeros(preds.size)
    z[kernels.topk_indices(np.ascontiguousarray(preds[None]), int(k))[0]] = 1.0
    return z


def _as_ctr(y_flat, m, n):
    y = np.asarray(y_flat, dtype=np.float64).ravel()
    if y.size != m * n:
        raise InputError(f"CTR vector has length {y.size}, expected {m}x{n}={m * n}")
    return np.clip(y.reshape(m, n), 0.0, 1.0)


def webadv_objective(z, y_flat, n_users=None):
    """Expected number of users clicking at least once on a chosen site.

    ``y_flat`` is the row-major (sites x users) CTR matrix; entries are
    clamped to [0, 1] first.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    m = z.size
    y = np.asarray(y_flat, dtype=np.float64).ravel()
    if n_users is None:
        if y.size % m:
            raise InputError(f"CTR vector of length {y.size} incompatible with {m} sites")
        n_users = y.size // m
    ctr = _as_ctr(y, m, n_users)
    miss = np.prod(1.0 - z[:, None] * ctr, axis=0)
    return float(np.sum(1.0 - miss))


def _greedy_sites(ctr, k):
    m, n = ctr.shape
    chosen = []
    miss = np.ones(n)
    for _ in range(k):
        best, best_gain = -1, -np.inf
        for i in range(m):
            if i in chosen:
                continue
            gain = float(np.sum(miss * ctr[i]))
            if gain > best_gain:
                best, best_gain = i, gain
        chosen.append(best)
        miss = miss * (1.0 - ctr[best])
    return sorted(chosen)


def site_combinations(m, k):
    return np.array(list(itertools.combinations(range(m), k)), dtype=np.int64).reshape(-1, k)


def webadv_solve(preds_flat, k, m, n, greedy=False):
    """Choose ``k`` of ``m`` sites.

    Exact mode enumerates every subset (lexicographically smallest wins
    ties); greedy mode adds the site with the largest marginal gain.
    """
    if not 1 <= k <= m:
        raise InputError(f"K={k} must lie in [1, M={m}]")
    ctr = _as_ctr(preds_flat, m, n)
    z = np.zeros(m)
    if greedy:
        z[_greedy_sites(ctr, k)] = 1.0
        return z
    if m > MAX_EXACT_SITES:
        raise CapabilityError(f"exact enumeration refused for M={m} > {MAX_EXACT_SITES}; use greedy")
    combos = site_combinations(m, k)
    best = kernels.webadv_best_subsets(np.ascontiguousarray(ctr[None]), combos)[0]
    z[combos[best]] = 1.0
    return z


def _check_simplex(z, tol=1e-8):
    if z.min() < -tol or abs(z.sum() - 1.0) > tol:
        raise InputError("decision is not on the probability simplex")


def portfolio_objective(z, y, q, lam):
    """Markowitz return-minus-risk ``z'y - lam z'Qz``."""
    z = np.asarray(z, dtype=np.float64).ravel()
    _check_simplex(z)
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != z.size:
        raise InputError(f"returns have length {y.size}, decision {z.size}")
    return float(z @ y - lam * z @ np.asarray(q) @ z)


@dataclass(frozen=True)
class SolverSettings:
    max_iter: int = 10000
    gap_tol: float = 1e-8


@dataclass
class PortfolioSolution:
    z: np.ndarray
    gap: float
    iterations: int


def portfolio_solve(preds, q, lam, settings=SolverSettings(), return_info=False):
    """Away-step Frank-Wolfe over the simplex.

    Raises ``SolverError`` (carrying the best iterate and its gap) when the
    duality gap is still above ``settings.gap_tol`` after ``max_iter`` steps.
    """
    if lam < 0:
        raise InputError("risk aversion must be non-negative")
    preds = np.ascontiguousarray(preds, dtype=np.float64).ravel()
    q = np.ascontiguousarray(q, dtype=np.float64)
    z, gap, iters, ok = kernels.frank_wolfe(preds, q, float(lam), int(settings.max_iter), float(settings.gap_tol))
    if not ok:
        raise SolverError(
            f"Frank-Wolfe stopped after {iters} iterations with gap {gap:.3e}",
            iterations=iters, best=z, gap=gap,
        )
    if return_info:
        return PortfolioSolution(z=z, gap=float(gap), iterations=int(iters))
    return z


class TopKProblem(DecisionProblem):
    name = "topk"

    def __init__(self, k, dim):
        if not 1 <= k <= dim:
            raise InputError(f"K={k} must lie in [1, D={dim}]")
        super().__init__(dim)
        self.k = int(k)

    def solve(self, preds):
        return topk_solve(self.check_dim(preds, "predictions"), self.k)

    def objective(self, z, labels):
        return float(np.asarray(z) @ np.asarray(labels, dtype=np.float64))

    def is_feasible(self, z):
        z = np.asarray(z)
        return bool(np.isin(z, (0.0, 1.0)).all() and z.sum() == self.k)

    def dq_batch(self, preds, labels):
        preds = np.ascontiguousarray(np.atleast_2d(preds), dtype=np.float64)
        return kernels.topk_values(preds, np.ascontiguousarray(labels, dtype=np.float64), self.k)

    def metadata(self):
        return {"domain": self.name, "dim": self.dim, "K": self.k}


class WebAdvertisingProblem(DecisionProblem):
    name = "webadv"

    def __init__(self, k=2, m=5, n=10, greedy=False):
        if not 1 <= k <= m:
            raise InputError(f"K={k} must lie in [1, M={m}]")
        if not greedy and m > MAX_EXACT_SITES:
            raise CapabilityError(f"exact mode supports M <= {MAX_EXACT_SITES}")
        super().__init__(m * n)
        self.k, self.m, self.n = int(k), int(m), int(n)
        self.greedy = bool(greedy)
        self.exact = not greedy
        self._combos = site_combinations(m, k) if not greedy else None

    def solve(self, preds):
        return webadv_solve(self.check_dim(preds, "predictions"), self.k, self.m, self.n, self.greedy)

    def objective(self, z, labels):
        return webadv_objective(z, labels, self.n)

    def is_feasible(self, z):
        z = np.asarray(z)
        return bool(z.size == self.m and np.isin(z, (0.0, 1.0)).all() and z.sum() == self.k)

    def dq_batch(self, preds, labels):
        if self.greedy:
            return super().dq_batch(preds, labels)
        preds = np.ascontiguousarray(np.atleast_2d(preds), dtype=np.float64)
        preds = preds.reshape(-1, self.m, self.n)
        best = kernels.webadv_best_subsets(preds, self._combos)
        values = kernels.webadv_subset_values(
            np.ascontiguousarray(np.asarray(labels, dtype=np.float64).reshape(self.m, self.n)),
            self._combos,
        )
        return values[best]

    def metadata(self):
        return {"domain": self.name, "dim": self.dim, "K": self.k, "M": self.m, "N": self.n,
                "greedy": self.greedy}


class PortfolioProblem(DecisionProblem):
    name = "portfolio"
    exact = False

    def __init__(self, q, lam=0.001, settings=SolverSettings()):
        q = np.ascontiguousarray(q, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise InputError("Q must be square")
        if np.abs(q - q.T).max() > 1e-9:
            raise InputError("Q must be symmetric")
        if np.linalg.eigvalsh(q).min() < -1e-9:
            raise InputError("Q must be positive semidefinite")
        if lam < 0:
            raise InputError("risk aversion must be non-negative")
        super().__init__(q.shape[0])
        self.q = q
        self.lam = float(lam)
        self.settings = settings

    def solve(self, preds):
        return portfolio_solve(self.check_dim(preds, "predictions"), self.q, self.lam, self.settings)

    def objective(self, z, labels):
        return portfolio_objective(z, labels, self.q, self.lam)

    def is_feasible(self, z):
        z = np.asarray(z)
        return bool(z.min() >= -1e-8 and abs(z.sum() - 1.0) <= 1e-8)

    def dq_batch(self, preds, labels):
        preds = np.ascontiguousarray(np.atleast_2d(preds), dtype=np.float64)
        zs, gaps, iters, ok = kernels.frank_wolfe_batch(
            preds, self.q, self.lam, int(self.settings.max_iter), float(self.settings.gap_tol)
        )
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            err = SolverError(
                f"Frank-Wolfe did not converge on row {bad} (gap {gaps[bad]:.3e})",
                iterations=int(iters[bad]), best=zs[bad], gap=float(gaps[bad]),
            )
            err.row = bad
            raise err
        labels = np.asarray(labels, dtype=np.float64)
        return zs @ labels - self.lam * np.einsum("si,ij,sj->s", zs, self.q, zs)

    def metadata(self):
        return {"domain": self.name, "dim": self.dim, "lambda": self.lam,
                "max_iter": self.settings.max_iter, "gap_tol": self.settings.gap_tol}


def enumerate_feasible(problem):
    """Every feasible decision of a finite problem, in lexicographic order."""
    if isinstance(problem, TopKProblem):
        m, k = problem.dim, problem.k
    elif isinstance(problem, WebAdvertisingProblem):
        m, k = problem.m, problem.k
    else:
        raise CapabilityError(f"cannot enumerate the feasible set of {type(problem).__name__}")
    if math.comb(m, k) > MAX_ENUMERATION:
        raise CapabilityError(f"C({m},{k}) exceeds the enumeration limit")
    out = []
    for combo in itertools.combinations(range(m), k):
        z = np.zeros(m)
        z[list(combo)] = 1.0
        out.append(z)
    return out
