"""Feature-based parameterization: a network from features to loss parameters.

Weight families evaluate the network once per label on that label's feature
vector. Quadratic families evaluate it on every ordered pair
``(x_i, x_j)`` (plus an ``i == j`` indicator) to produce factor entries
``L_ij``. Because parameters are a function of features alone, two labels
with identical features always receive identical parameters.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import CapabilityError, FittingError, InputError
from ..nn import Adam, Mlp
from . import families as F
from .lodl import regret_scale

logger = logging.getLogger(__name__)

HEADS = {F.WMSE: 1, F.DWMSE: 2, F.QUAD: 1, F.DQUAD: 4}


@dataclass
class FbpConfig:
    hidden: int = 500
    layers: int = 4
    lr: float = 1e-3
    epochs: int = 200
    batch_instances: int = 16
    patience: int | None = 20
    w_min: float = F.DEFAULT_W_MIN
    out_scale: float = 0.1
    diag_feature: bool = True
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def label_features(instance):
    """One feature vector per label: the group's row, plus a one-hot of the
    label's position inside the group when a group has several outputs."""
    feats = instance.features
    per = instance.outputs_per_group
    rows = np.repeat(feats, per, axis=0)
    if per == 1:
        return rows
    onehot = np.tile(np.eye(per), (feats.shape[0], 1))
    return np.concatenate([rows, onehot], axis=1)


class FbpNetwork:
    """Trained ``P_psi`` plus the input standardisation it was fitted with."""

    def __init__(self, family, net, w_min, feat_mean, feat_std, diag_feature=True, diag_offset=0.0):
        self.family = F.canonical_family(family)
        self.net = net
        self.w_min = float(w_min)
        self.feat_mean = np.asarray(feat_mean, dtype=np.float64)
        self.feat_std = np.asarray(feat_std, dtype=np.float64)
        self.diag_feature = bool(diag_feature)
        # added to the diagonal of the factor matrices so quadratic losses
        # start near a scaled MSE instead of near zero
        self.diag_offset = float(diag_offset)

    @property
    def heads(self):
        return HEADS[self.family]

    def network_inputs(self, label_feats):
        """Rows fed to the network for stacked label features (B, D, Fl)."""
        z = (label_feats - self.feat_mean) / self.feat_std
        b, d, f = z.shape
        if self.family in (F.WMSE, F.DWMSE):
            return z.reshape(b * d, f)
        left = np.broadcast_to(z[:, :, None, :], (b, d, d, f))
        right = np.broadcast_to(z[:, None, :, :], (b, d, d, f))
        parts = [left, right]
        if self.diag_feature:
            parts.append(np.broadcast_to(np.eye(d)[None, :, :, None], (b, d, d, 1)))
        return np.concatenate(parts, axis=-1).reshape(b * d * d, -1)

    def raw_from_outputs(self, out, b, d):
        if self.family == F.WMSE:
            return out.reshape(b, d)
        if self.family == F.DWMSE:
            return np.transpose(out.reshape(b, d, 2), (0, 2, 1))
        eye = self.diag_offset * np.eye(d)
        if self.family == F.QUAD:
            return out.reshape(b, d, d) + eye
        raw = np.moveaxis(out.reshape(b, d, d, 4), -1, 1)
        raw[:, 0] += eye
        raw[:, 3] += eye
        return raw

    def outputs_grad(self, graw, b, d):
        """Inverse of ``raw_from_outputs`` applied to a gradient."""
        if self.family == F.WMSE:
            return graw.reshape(b * d, 1)
        if self.family == F.DWMSE:
            return np.transpose(graw, (0, 2, 1)).reshape(b * d, 2)
        if self.family == F.QUAD:
            return graw.reshape(b * d * d, 1)
        return np.moveaxis(graw, 1, -1).reshape(b * d * d, 4)

    def raw_params(self, label_feats):
        """Raw loss parameters (B, ...) for stacked label features (B, D, Fl)."""
        label_feats = np.asarray(label_feats, dtype=np.float64)
        if label_feats.ndim == 2:
            label_feats = label_feats[None]
        if label_feats.shape[-1] != self.feat_mean.size:
            raise InputError(f"label features have width {label_feats.shape[-1]}, network expects "
                             f"{self.feat_mean.size}")
        b, d, _ = label_feats.shape
        out = self.net.forward(self.network_inputs(label_feats))
        return self.raw_from_outputs(out, b, d)


def induced_params(network, instance):
    """Loss parameters the network assigns to one instance."""
    lf = label_features(instance)
    raw = network.raw_params(lf[None])[0]
    return F.LossParams(network.family, raw, network.w_min, dim=instance.dim)


def induced_losses(network, instances):
    """``InstanceLosses`` for a list of instances, in order."""
    lf = np.stack([label_features(inst) for inst in instances])
    raw = np.concatenate([network.raw_params(lf[i:i + 32]) for i in range(0, len(lf), 32)])
    return F.InstanceLosses(network.family, raw, network.w_min, dim=instances[0].dim)


def _fit_terms(network, lf, resid, regret, mask, want_grad=True):
    b, d, _ = lf.shape
    x = network.network_inputs(lf)
    out, acts = network.net.forward_cached(x)
    raw = network.raw_from_outputs(out, b, d)
    fam = network.family
    eff = F.effective_from_raw(fam, raw, network.w_min)
    vals = F.batched_values(fam, eff, resid, network.w_min)
    err = (vals - regret) * mask
    total = mask.sum()
    loss = float((err ** 2).sum() / total)
    if not want_grad:
        return loss, None
    coef = 2.0 * err / total
    graw = F.raw_grads(fam, raw, F.batched_param_grads(fam, eff, resid, coef, network.w_min))
    grads = network.net.backward(acts, network.outputs_grad(graw, b, d))
    return loss, grads


def fit_fbp(train_data, family, config=FbpConfig(), val_data=None):
    """Train ``P_psi`` on pooled samples of many instances.

    ``train_data``/``val_data`` are tuples ``(label_feats (I, D, Fl),
    residuals (I, S, D), regrets (I, S), mask (I, S))``. Returns the network
    (best validation epoch restored when ``val_data`` is given) and a history
    dict.
    """
    family = F.canonical_family(family)
    if family not in HEADS:
        raise CapabilityError(f"feature-based parameterization is not defined for {family}")
    lf, resid, regret, mask = train_data
    if lf.shape[:2] != resid.shape[0:1] + resid.shape[2:3]:
        raise InputError(f"label features {lf.shape} do not match residuals {resid.shape}")
    rng = np.random.default_rng(config.seed)
    flat = lf.reshape(-1, lf.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    width_in = lf.shape[-1] if family in (F.WMSE, F.DWMSE) else 2 * lf.shape[-1] + int(config.diag_feature)
    widths = [width_in] + [config.hidden] * (config.layers - 1) + [HEADS[family]]
    net = Mlp(widths, seed=int(rng.integers(2**31)), out_scale=config.out_scale)
    excess = max(float(np.mean(regret_scale(resid, regret, mask))) - config.w_min, 1e-3 * config.w_min)
    offset = 0.0
    if family in (F.WMSE, F.DWMSE):
        net.biases[-1][:] = F.softplus_inv(excess)
    else:
        offset = float(np.sqrt(excess))
    network = FbpNetwork(family, net, config.w_min, mean, std, config.diag_feature, offset)

    params = net.params()
    opt = Adam(params)
    history = {"train": [], "val": [], "best_epoch": -1}
    best_val, best_params, bad = np.inf, None, 0
    n = lf.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_instances):
            rows = order[start:start + config.batch_instances]
            loss, grads = _fit_terms(network, lf[rows], resid[rows], regret[rows], mask[rows])
            if not np.isfinite(loss):
                raise FittingError(f"non-finite FBP fit loss in epoch {epoch}", step=epoch)
            opt.step(params, grads, config.lr)
            losses.append(loss)
        history["train"].append(float(np.mean(losses)))
        if val_data is not None:
            val = fbp_fit_error(network, val_data)
            history["val"].append(val)
            if val < best_val:
                best_val, bad = val, 0
                best_params = [p.copy() for p in params]
                history["best_epoch"] = epoch
            else:
                bad += 1
                if config.patience is not None and bad > config.patience:
                    break
    if best_params is not None:
        for p, best in zip(params, best_params):
            p[...] = best
    return network, history


def fbp_fit_error(network, data, chunk=32):
    """Mean squared gap between induced loss values and regrets."""
    lf, resid, regret, mask = data
    total, count = 0.0, 0.0
    for start in range(0, lf.shape[0], chunk):
        sl = slice(start, start + chunk)
        m = mask[sl]
        loss, _ = _fit_terms(network, lf[sl], resid[sl], regret[sl], m, want_grad=False)
        total += loss * m.sum()
        count += m.sum()
    return total / max(count, 1.0)
