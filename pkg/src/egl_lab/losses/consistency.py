"""Fisher-consistency machinery and the two-individual counterexample.

Two individuals A and B compete for one resource (top-1 selection). The
labels are ``(0, 0.55)`` ("blue") or ``(1, 0.55)`` ("orange") with equal
probability, so the regret-minimising decision is always B. Fitting one
scalar reweighting of the squared error per instance and predicting with the
weighted mean can nevertheless hand the resource to A.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import regret_batch
from ..errors import InputError
from ..problems import TopKProblem
from . import families as F
from .lodl import FitConfig, closed_form_scalar_weight, fit_lodl

Y_BLUE = (0.0, 0.55)
Y_ORANGE = (1.0, 0.55)
PROBS = (0.5, 0.5)
REPORTED_WEIGHTS = (0.385, 0.582)
REPORTED_PREDICTION = 0.602


def optimal_wmse_prediction(labels_with_probs, weights):
    """Minimiser of ``E[w^y (yhat - y)^2]``: the weight-tilted mean ``E[w y] / E[w]``."""
    ys = np.array([y for y, _ in labels_with_probs], dtype=np.float64)
    ps = np.array([p for _, p in labels_with_probs], dtype=np.float64)
    ws = np.asarray(weights, dtype=np.float64)
    if ws.shape != ys.shape:
        raise InputError("one weight per outcome is required")
    if abs(ps.sum() - 1.0) > 1e-9 or (ps < 0).any():
        raise InputError("probabilities must be non-negative and sum to 1")
    if (ws <= 0).any():
        raise InputError("weights must be positive")
    denom = float(ps @ ws)
    if denom <= 0:
        raise InputError("expected weight is zero")
    return float((ps * ws) @ ys / denom)


def counterexample_grid(kind="fixed15", num=25, seed=0):
    """Offsets added to ``y_A``: 15 evenly spaced points or uniform draws on [-1, 1]."""
    if kind == "fixed15":
        return np.linspace(-1.0, 1.0, 15)
    if kind == "uniform":
        return np.random.default_rng(seed).uniform(-1.0, 1.0, size=num)
    raise InputError(f"unknown noise grid {kind!r}")


@dataclass
class CounterexampleReport:
    grid: str
    offsets: list
    regret_table: dict
    closed_form_weights: tuple
    gd_weights: tuple
    fit: str
    weights: tuple
    y_hat_a: float
    chosen_individual: str
    optimal_individual: str
    is_consistent: bool
    reported: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _decision(y_hat_a, y_b=0.55):
    return "A" if y_hat_a > y_b else "B"


def run_counterexample(grid="fixed15", fit="closed_form", num=25, seed=0,
                       fit_config=None, reported_weights=REPORTED_WEIGHTS):
    """Sample, score, fit per-instance weights and check the induced decision."""
    if fit not in ("closed_form", "gradient_descent"):
        raise InputError(f"unknown fit procedure {fit!r}")
    problem = TopKProblem(1, 2)
    offsets = counterexample_grid(grid, num, seed)
    table, cf, gd = {}, [], []
    cfg = fit_config or FitConfig(lr=0.05, steps=3000, w_min=1e-6, init_noise=0.0, seed=seed)
    for name, y in (("blue", Y_BLUE), ("orange", Y_ORANGE)):
        y = np.array(y)
        preds = np.tile(y, (offsets.size, 1))
        preds[:, 0] += offsets
        regrets = regret_batch(problem, preds, y)
        table[name] = {"y_hat_a": preds[:, 0].tolist(), "regret": regrets.tolist()}
        cf.append(closed_form_scalar_weight(preds, y, regrets))
        params = fit_lodl(preds, y, regrets, F.LZ, cfg)
        gd.append(float(params.weights()[0]))
    weights = tuple(cf) if fit == "closed_form" else tuple(gd)
    outcomes = [(Y_BLUE[0], PROBS[0]), (Y_ORANGE[0], PROBS[1])]
    y_hat = optimal_wmse_prediction(outcomes, weights)
    mean_a = PROBS[0] * Y_BLUE[0] + PROBS[1] * Y_ORANGE[0]
    optimal = _decision(mean_a)
    chosen = _decision(y_hat)
    rep_y = optimal_wmse_prediction(outcomes, reported_weights)
    return CounterexampleReport(
        grid=grid,
        offsets=offsets.tolist(),
        regret_table=table,
        closed_form_weights=tuple(cf),
        gd_weights=tuple(gd),
        fit=fit,
        weights=weights,
        y_hat_a=y_hat,
        chosen_individual=chosen,
        optimal_individual=optimal,
        is_consistent=chosen == optimal,
        reported={
            "weights": tuple(reported_weights),
            "y_hat_a": rep_y,
            "chosen_individual": _decision(rep_y),
            "is_consistent": _decision(rep_y) == optimal,
        },
    )
