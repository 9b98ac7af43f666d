"""Convex-by-construction loss families anchored at the true labels.

Parameters are stored *raw*: weight entries pass through
``w_min + softplus(theta)`` and quadratic factors are unconstrained, with
positive definiteness coming from the Gram construction. All batched helpers
take a leading instance axis ``I`` and sample axis ``S``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError

MSE = "mse"
LZ = "lz"
WMSE = "weighted_mse"
QUAD = "quadratic"
DWMSE = "directed_weighted_mse"
DQUAD = "directed_quadratic"
FAMILIES = (MSE, LZ, WMSE, QUAD, DWMSE, DQUAD)
LEARNED_FAMILIES = (LZ, WMSE, QUAD, DWMSE, DQUAD)
WEIGHT_FAMILIES = (LZ, WMSE, DWMSE)
QUAD_FAMILIES = (QUAD, DQUAD)

ALIASES = {
    "MSE": MSE, "LZ_scalar": LZ, "WeightedMSE": WMSE, "Quadratic": QUAD,
    "DirectedWeightedMSE": DWMSE, "DirectedQuadratic": DQUAD,
    "wmse": WMSE, "dwmse": DWMSE, "quad": QUAD, "dquad": DQUAD,
}

DEFAULT_W_MIN = 0.01


def canonical_family(name):
    name = ALIASES.get(name, name)
    if name not in FAMILIES:
        raise InputError(f"unknown loss family {name!r}")
    return name


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    # logistic sigmoid, written to avoid overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(y, 1e-300))))


def raw_shape(family, dim):
    return {
        MSE: (0,),
        LZ: (1,),
        WMSE: (dim,),
        DWMSE: (2, dim),
        QUAD: (dim, dim),
        DQUAD: (4, dim, dim),
    }[family]


@dataclass
class LossParams:
    """Raw parameters of one instance's learned loss."""

    family: str
    raw: np.ndarray
    w_min: float = DEFAULT_W_MIN
    dim: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.family = canonical_family(self.family)
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.w_min <= 0:
            raise InputError("w_min must be positive")
        if self.family == MSE:
            if self.dim <= 0:
                raise InputError("MSE params need an explicit dim")
        else:
            if self.family != LZ:
                self.dim = self.raw.shape[-1]
            elif self.dim <= 0:
                raise InputError("LZ params need an explicit dim")
            expected = raw_shape(self.family, self.dim)
            if self.raw.shape != expected:
                raise InputError(f"{self.family} params have shape {self.raw.shape}, expected {expected}")

    def weights(self):
        """Effective weights: scalar (LZ), (D,) or (2, D) for the directed variant."""
        if self.family not in WEIGHT_FAMILIES:
            raise InputError(f"{self.family} has no weight vector")
        return self.w_min + softplus(self.raw)

    def gram(self):
        """PSD matrix of the quadratic form: (D, D) or (2D, 2D) for the directed variant."""
        if self.family == QUAD:
            return self.raw.T @ self.raw
        if self.family == DQUAD:
            m = assemble_blocks(self.raw)
            return m.T @ m
        raise InputError(f"{self.family} has no quadratic form")

    def hessian(self, residual_signs=None):
        """Hessian of the loss in the prediction, for a given sign pattern."""
        d = self.dim
        if self.family == MSE:
            return 2.0 * np.eye(d)
        if self.family == LZ:
            return 2.0 * self.weights()[0] * np.eye(d)
        if self.family == WMSE:
            return 2.0 * np.diag(self.weights())
        if self.family == DWMSE:
            pos = _signs(residual_signs, d)
            w = self.weights()
            return 2.0 * np.diag(np.where(pos, w[0], w[1]))
        if self.family == QUAD:
            return 2.0 * (self.gram() + self.w_min * np.eye(d))
        pos = _signs(residual_signs, d)
        sel = np.zeros((2 * d, d))
        sel[np.arange(d)[pos], np.arange(d)[pos]] = 1.0
        sel[d + np.arange(d)[~pos], np.arange(d)[~pos]] = 1.0
        return 2.0 * (sel.T @ self.gram() @ sel + self.w_min * np.eye(d))


def _signs(residual_signs, d):
    if residual_signs is None:
        return np.ones(d, dtype=bool)
    return np.asarray(residual_signs) >= 0


def assemble_blocks(blocks):
    """``[[L++, L+-], [L-+, L--]]`` from stacked factors of shape (..., 4, D, D)."""
    top = np.concatenate([blocks[..., 0, :, :], blocks[..., 1, :, :]], axis=-1)
    bottom = np.concatenate([blocks[..., 2, :, :], blocks[..., 3, :, :]], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def split_blocks(mat):
    """Inverse of ``assemble_blocks`` for gradients, (..., 2D, 2D) -> (..., 4, D, D)."""
    d = mat.shape[-1] // 2
    return np.stack([mat[..., :d, :d], mat[..., :d, d:], mat[..., d:, :d], mat[..., d:, d:]], axis=-3)


def signed_parts(resid):
    """``[r+, r-]`` stacked on the last axis; zero residuals go to the '+' part."""
    pos = resid >= 0
    return np.concatenate([np.where(pos, resid, 0.0), np.where(pos, 0.0, resid)], axis=-1)


# --- single-instance evaluation ------------------------------------------------


def _check(params, preds, labels):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape[-1] != params.dim or labels.shape[-1] != params.dim:
        raise InputError(f"expected vectors of length {params.dim}, got {preds.shape} and {labels.shape}")
    return preds - labels


def loss_eval(params, preds, labels):
    """Loss value; ``preds`` may carry leading batch axes."""
    r = _check(params, preds, labels)
    fam = params.family
    if fam == MSE:
        return np.sum(r ** 2, axis=-1)
    if fam == LZ:
        return params.weights()[0] * np.sum(r ** 2, axis=-1)
    if fam == WMSE:
        return np.sum(params.weights() * r ** 2, axis=-1)
    if fam == DWMSE:
        w = params.weights()
        return np.sum(np.where(r >= 0, w[0], w[1]) * r ** 2, axis=-1)
    if fam == QUAD:
        lr = r @ params.raw.T
        return np.sum(lr ** 2, axis=-1) + params.w_min * np.sum(r ** 2, axis=-1)
    mu = signed_parts(r) @ assemble_blocks(params.raw).T
    return np.sum(mu ** 2, axis=-1) + params.w_min * np.sum(r ** 2, axis=-1)


def loss_grad(params, preds, labels):
    """Gradient of ``loss_eval`` with respect to the predictions."""
    r = _check(params, preds, labels)
    fam = params.family
    if fam == MSE:
        return 2.0 * r
    if fam == LZ:
        return 2.0 * params.weights()[0] * r
    if fam == WMSE:
        return 2.0 * params.weights() * r
    if fam == DWMSE:
        w = params.weights()
        return 2.0 * np.where(r >= 0, w[0], w[1]) * r
    if fam == QUAD:
        return 2.0 * (r @ params.gram()) + 2.0 * params.w_min * r
    d = params.dim
    gu = signed_parts(r) @ params.gram()
    pos = r >= 0
    return 2.0 * np.where(pos, gu[..., :d], gu[..., d:]) + 2.0 * params.w_min * r


# --- batched forms used for fitting ---------------------------------------------


def effective_from_raw(family, raw, w_min):
    """Map raw params (I, ...) to effective params (weights or factor matrices)."""
    if family in WEIGHT_FAMILIES:
        return w_min + softplus(raw)
    if family == DQUAD:
        return assemble_blocks(raw)
    return raw


def batched_values(family, eff, resid, w_min):
    """Loss values (I, S) for residuals (I, S, D) and effective params (I, ...)."""
    sq = resid ** 2
    if family == MSE:
        return sq.sum(-1)
    if family == LZ:
        return eff[:, :1] * sq.sum(-1)
    if family == WMSE:
        return np.einsum("isd,id->is", sq, eff)
    if family == DWMSE:
        pos = resid >= 0
        return (np.einsum("isd,id->is", sq * pos, eff[:, 0])
                + np.einsum("isd,id->is", sq * ~pos, eff[:, 1]))
    u = resid if family == QUAD else signed_parts(resid)
    lu = u @ np.swapaxes(eff, 1, 2)
    return (lu ** 2).sum(-1) + w_min * sq.sum(-1)


def batched_param_grads(family, eff, resid, coef, w_min):
    """Gradient of ``sum_{i,s} coef[i,s] * value[i,s]`` w.r.t. effective params."""
    sq = resid ** 2
    if family == LZ:
        return np.einsum("is,isd->i", coef, sq)[:, None]
    if family == WMSE:
        return np.einsum("is,isd->id", coef, sq)
    if family == DWMSE:
        pos = resid >= 0
        return np.stack([np.einsum("is,isd->id", coef, sq * pos),
                         np.einsum("is,isd->id", coef, sq * ~pos)], axis=1)
    u = resid if family == QUAD else signed_parts(resid)
    lu = u @ np.swapaxes(eff, 1, 2)
    return 2.0 * np.swapaxes(coef[..., None] * lu, 1, 2) @ u


def raw_grads(family, raw, eff_grad):
    """Chain rule from effective-parameter gradients back to raw params."""
    if family in WEIGHT_FAMILIES:
        return eff_grad * softplus_grad(raw)
    if family == DQUAD:
        return split_blocks(eff_grad)
    return eff_grad


class InstanceLosses:
    """Per-instance learned losses, usable as a training objective.

    ``value_and_grad(preds, batch)`` returns the mean loss over the batch and
    its gradient in the predictions; ``batch.index`` selects each row's
    parameters. The effective quantities (weights or Gram matrices) are
    precomputed once.
    """

    def __init__(self, family, raw, w_min=DEFAULT_W_MIN, dim=None):
        self.family = canonical_family(family)
        self.raw = np.asarray(raw, dtype=np.float64)
        self.w_min = float(w_min)
        if self.family in WEIGHT_FAMILIES:
            self.eff = effective_from_raw(self.family, self.raw, self.w_min)
        elif self.family in QUAD_FAMILIES:
            mats = effective_from_raw(self.family, self.raw, self.w_min)
            self.eff = np.transpose(mats, (0, 2, 1)) @ mats
        else:
            self.eff = None
        self.dim = dim if dim is not None else self.raw.shape[-1]

    @classmethod
    def from_params(cls, params_list):
        first = params_list[0]
        raw = np.stack([p.raw for p in params_list])
        return cls(first.family, raw, first.w_min, first.dim)

    def params(self, i):
        return LossParams(self.family, self.raw[i], self.w_min, dim=self.dim)

    def __len__(self):
        return self.raw.shape[0]

    def _terms(self, r, idx):
        fam = self.family
        if fam == MSE:
            return np.sum(r ** 2, -1), 2.0 * r
        if fam == LZ:
            w = self.eff[idx, 0][:, None]
            return (w * r ** 2).sum(-1), 2.0 * w * r
        if fam == WMSE:
            w = self.eff[idx]
            return (w * r ** 2).sum(-1), 2.0 * w * r
        if fam == DWMSE:
            w = self.eff[idx]
            sel = np.where(r >= 0, w[:, 0], w[:, 1])
            return (sel * r ** 2).sum(-1), 2.0 * sel * r
        gram = self.eff[idx]
        if fam == QUAD:
            gr = np.einsum("bjk,bk->bj", gram, r)
            val = (gr * r).sum(-1) + self.w_min * (r ** 2).sum(-1)
            return val, 2.0 * gr + 2.0 * self.w_min * r
        u = signed_parts(r)
        gu = np.einsum("bjk,bk->bj", gram, u)
        d = r.shape[-1]
        val = (gu * u).sum(-1) + self.w_min * (r ** 2).sum(-1)
        g = np.where(r >= 0, gu[:, :d], gu[:, d:])
        return val, 2.0 * g + 2.0 * self.w_min * r

    def values(self, preds, batch):
        return self._terms(preds - batch.labels, batch.index)[0]

    def value(self, preds, batch):
        return float(np.mean(self.values(preds, batch)))

    def value_and_grad(self, preds, batch):
        vals, g = self._terms(preds - batch.labels, batch.index)
        return float(np.mean(vals)), g / len(vals)
