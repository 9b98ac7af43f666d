"""Decision problems and decision-quality metrics.

A *decision problem* maps a prediction vector to a feasible decision and
scores decisions under the true labels. Everything else in the package
(sampling, loss fitting, evaluation) talks to problems only through
``solve``/``objective`` and their batched variants.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBaselineError, InputError

ATOL = 1e-9
DEGENERATE_DENOM = 1e-12
SPLITS = ("train", "validation", "test")


@dataclass
class PtoInstance:
    """One decision-making instance.

    ``features`` has one row per prediction group: a single label for the
    cubic and portfolio domains, a whole CTR row (N users) for a website in
    web advertising. ``labels`` is the flattened length-D target vector, so
    ``labels.size == features.shape[0] * outputs_per_group``.
    """

    labels: np.ndarray
    features: np.ndarray
    instance_id: str
    split: str = "train"
    time_index: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        self.features = feats
        if self.labels.size % feats.shape[0] != 0:
            raise InputError(
                f"{self.instance_id}: {self.labels.size} labels do not split "
                f"evenly over {feats.shape[0]} feature rows"
            )
        if not (np.isfinite(self.labels).all() and np.isfinite(feats).all()):
            raise InputError(f"{self.instance_id}: non-finite labels or features")
        if self.split not in SPLITS:
            raise InputError(f"unknown split {self.split!r}")

    @property
    def dim(self):
        return self.labels.size

    @property
    def outputs_per_group(self):
        return self.labels.size // self.features.shape[0]


class DecisionProblem(ABC):
    """Abstract ``argmax_z f(z; y_hat)`` over a feasible region.

    Subclasses implement ``solve`` and ``objective``; the batched helpers
    default to Python loops and are overridden where a kernel exists.
    """

    name = "abstract"
    exact = True

    def __init__(self, dim):
        self.dim = int(dim)

    @abstractmethod
    def solve(self, preds):
        """Return the decision ``z*(preds)``."""

    @abstractmethod
    def objective(self, z, labels):
        """Return ``f(z; labels)``."""

    def metadata(self):
        return {"domain": self.name, "dim": self.dim}

    def is_feasible(self, z):
        return True

    def check_dim(self, vec, what="vector"):
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != self.dim:
            raise InputError(f"{what} has length {vec.size}, expected {self.dim}")
        if not np.isfinite(vec).all():
            raise InputError(f"{what} has non-finite entries")
        return vec

    def dq_batch(self, preds, labels):
        """Decision quality of each row of ``preds`` under ``labels``."""
        preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
        return np.array([self.objective(self.solve(p), labels) for p in preds])

    def optimal_value(self, labels):
        labels = self.check_dim(labels, "labels")
        return float(self.objective(self.solve(labels), labels))


def decision_quality(problem, preds, labels):
    """``f(z*(preds); labels)``."""
    preds = problem.check_dim(preds, "predictions")
    labels = problem.check_dim(labels, "labels")
    return float(problem.objective(problem.solve(preds), labels))


def dq_regret(problem, preds, labels):
    """Decision-quality gap between perfect predictions and ``preds``."""
    return problem.optimal_value(labels) - decision_quality(problem, preds, labels)


def regret_batch(problem, preds, labels):
    """Vectorised ``dq_regret`` over rows of ``preds``."""
    labels = problem.check_dim(labels, "labels")
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    if preds.shape[1] != problem.dim:
        raise InputError(f"predictions have width {preds.shape[1]}, expected {problem.dim}")
    return problem.optimal_value(labels) - problem.dq_batch(preds, labels)


def baseline_draws(dim, rng_seed, num_baseline_draws=100):
    """Uniform [0, 1] predictions used as the zero point of normalized DQ."""
    if num_baseline_draws < 1:
        raise InputError("num_baseline_draws must be >= 1")
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(0.0, 1.0, size=(num_baseline_draws, dim))


def normalized_dq(problem, preds, labels, rng_seed=0, num_baseline_draws=100):
    """Affine rescaling of DQ: random predictions score 0, perfect ones 1."""
    preds = problem.check_dim(preds, "predictions")
    labels = problem.check_dim(labels, "labels")
    draws = baseline_draws(problem.dim, rng_seed, num_baseline_draws)
    random_dq = float(np.mean(problem.dq_batch(draws, labels)))
    best = problem.optimal_value(labels)
    denom = best - random_dq
    if abs(denom) < DEGENERATE_DENOM:
        raise DegenerateBaselineError(
            f"perfect and random DQ coincide ({best!r} vs {random_dq!r})"
        )
    return (decision_quality(problem, preds, labels) - random_dq) / denom


@dataclass
class NormalizedScore:
    """Mean normalized DQ over a set of instances, plus skipped ids."""

    mean: float
    values: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


def mean_normalized_dq(problem_for, instances, preds_for, seed=0, num_baseline_draws=100):
    """Average normalized DQ, skipping instances with a degenerate baseline.

    ``problem_for(instance)`` and ``preds_for(instance)`` supply the problem
    and prediction vector per instance. Each instance gets its own baseline
    stream derived from ``seed`` and its position.
    """
    values, skipped = [], []
    for pos, inst in enumerate(instances):
        problem = problem_for(inst)
        try:
            values.append(
                normalized_dq(
                    problem, preds_for(inst), inst.labels,
                    rng_seed=(seed, pos), num_baseline_draws=num_baseline_draws,
                )
            )
        except DegenerateBaselineError:
            skipped.append(inst.instance_id)
    mean = float(np.mean(values)) if values else float("nan")
    return NormalizedScore(mean=mean, values=values, skipped=skipped)
