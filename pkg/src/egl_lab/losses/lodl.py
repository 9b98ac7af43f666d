"""Per-instance loss fitting (one loss per decision instance).

The fit objective of every instance is separable from the others, so all
instances are optimized jointly in one vectorised Adam loop; per-coordinate
Adam makes this identical to fitting them one at a time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import FittingError, InputError
from ..nn import Adam
from . import families as F


@dataclass
class FitConfig:
    lr: float = 0.05
    steps: int = 1000
    w_min: float = F.DEFAULT_W_MIN
    init_noise: float = 0.01
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def stack_samples(per_instance):
    """Pad ``[(preds (S_i, D), labels (D,), regrets (S_i,))]`` to dense arrays.

    Returns residuals (I, S, D), regrets (I, S) and a 0/1 mask (I, S).
    """
    if not per_instance:
        raise InputError("no instances to fit")
    s_max = max(p.shape[0] for p, _, _ in per_instance)
    d = per_instance[0][1].size
    n = len(per_instance)
    resid = np.zeros((n, s_max, d))
    regret = np.zeros((n, s_max))
    mask = np.zeros((n, s_max))
    for i, (preds, labels, regrets) in enumerate(per_instance):
        s = preds.shape[0]
        if s < 1:
            raise InputError("every instance needs at least one sample")
        if np.isnan(regrets).any():
            raise InputError("samples must have their regret filled before fitting")
        resid[i, :s] = preds - labels
        regret[i, :s] = regrets
        mask[i, :s] = 1.0
    return resid, regret, mask


def regret_scale(resid, regret, mask):
    """Per-instance weight that matches mean loss to mean regret under MSE."""
    sq = (resid ** 2).sum(-1) * mask
    denom = sq.sum(-1)
    num = (regret * mask).sum(-1)
    return np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)


def init_raw(family, scale, dim, w_min, rng, noise):
    """Raw parameters whose loss starts near ``scale * ||r||^2``."""
    n = scale.shape[0]
    excess = np.maximum(scale - w_min, 1e-3 * w_min)
    if family in F.WEIGHT_FAMILIES:
        shape = (n,) + F.raw_shape(family, dim)
        base = F.softplus_inv(excess).reshape((n,) + (1,) * (len(shape) - 1))
        return base + noise * rng.standard_normal(shape)
    root = np.sqrt(excess)[:, None, None]
    eye = np.eye(dim)[None]
    if family == F.QUAD:
        return root * (eye + noise * rng.standard_normal((n, dim, dim)))
    raw = noise * rng.standard_normal((n, 4, dim, dim))
    raw[:, 0] += eye[0]
    raw[:, 3] += eye[0]
    return root[:, None] * raw


def fit_error(family, raw, resid, regret, mask, w_min):
    eff = F.effective_from_raw(family, raw, w_min)
    vals = F.batched_values(family, eff, resid, w_min)
    err = (vals - regret) * mask
    counts = np.maximum(mask.sum(-1), 1.0)
    return (err ** 2).sum(-1) / counts


def fit_lodl_batch(resid, regret, mask, family, config=FitConfig()):
    """Fit one loss per instance; returns raw params (I, ...) and fit MSE (I,)."""
    family = F.canonical_family(family)
    if family == F.MSE:
        raise InputError("MSE has no parameters to fit")
    n, _, d = resid.shape
    rng = np.random.default_rng(config.seed)
    w_min = config.w_min
    raw = init_raw(family, regret_scale(resid, regret, mask), d, w_min, rng, config.init_noise)
    opt = Adam([raw])
    counts = np.maximum(mask.sum(-1), 1.0)[:, None]
    for step in range(config.steps):
        eff = F.effective_from_raw(family, raw, w_min)
        vals = F.batched_values(family, eff, resid, w_min)
        err = (vals - regret) * mask
        coef = 2.0 * err / counts
        graw = F.raw_grads(family, raw, F.batched_param_grads(family, eff, resid, coef, w_min))
        if not np.isfinite(graw).all():
            raise FittingError(f"non-finite gradient while fitting {family} at step {step}", step=step)
        opt.step([raw], [graw], config.lr)
    return raw, fit_error(family, raw, resid, regret, mask, w_min)


def fit_lodl(preds, labels, regrets, family, config=FitConfig()):
    """Fit a loss to one instance's ``(prediction, regret)`` samples.

    ``preds`` is (S, D). The returned params carry the final fit MSE in
    ``meta["fit_mse"]``.
    """
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64).ravel()
    regrets = np.asarray(regrets, dtype=np.float64).ravel()
    if preds.shape[0] != regrets.size:
        raise InputError("one regret per sample is required")
    resid, reg, mask = stack_samples([(preds, labels, regrets)])
    raw, mse = fit_lodl_batch(resid, reg, mask, family, config)
    return F.LossParams(family, raw[0], config.w_min, dim=labels.size,
                        meta={"fit_mse": float(mse[0])})


def closed_form_scalar_weight(preds, labels, regrets):
    """Least-squares ``w`` for ``regret ~ w * ||pred - label||^2``."""
    d2 = ((np.atleast_2d(preds) - np.asarray(labels)) ** 2).sum(-1)
    r = np.asarray(regrets, dtype=np.float64)
    return float((r * d2).sum() / (d2 ** 2).sum())
