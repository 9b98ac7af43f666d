"""Small dense feedforward networks with hand-written backpropagation.

Used both for the predictive model (linear or MLP, one forward pass per
prediction group) and for the loss-parameter network. Everything is float64
numpy; there is no general autograd, only the layer stack below.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import CapabilityError, ConfigError, InputError, TrainingError

CHECKPOINT_MAGIC = b"EGLMLP01"


class Mlp:
    """ReLU network ``widths[0] -> ... -> widths[-1]`` with identity output.

    A two-entry ``widths`` is a plain affine map ``x W + b``.
    """

    def __init__(self, widths, seed=0, out_scale=1.0):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise InputError(f"invalid layer widths {widths}")
        self.widths = widths
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / fan_in)
            if i == len(widths) - 2:
                bound *= out_scale
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self):
        return len(self.weights)

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params):
        params = list(params)
        self.weights = [np.array(p, dtype=np.float64) for p in params[0::2]]
        self.biases = [np.array(p, dtype=np.float64) for p in params[1::2]]

    def copy(self):
        return copy.deepcopy(self)

    def forward(self, x):
        return self.forward_cached(x)[0]

    __call__ = forward

    def forward_cached(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.widths[0]:
            raise InputError(f"input width {x.shape[-1]} != model width {self.widths[0]}")
        acts = [x]
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout):
        """Parameter gradients given ``d loss / d output``; same order as ``params``."""
        grads = [None] * (2 * self.n_layers)
        delta = dout
        for i in range(self.n_layers - 1, -1, -1):
            a_in = acts[i]
            grads[2 * i] = a_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0.0)
        return grads

    def input_grad(self, acts, dout):
        delta = dout
        for i in range(self.n_layers - 1, -1, -1):
            delta = delta @ self.weights[i].T
            if i > 0:
                delta = delta * (acts[i] > 0.0)
        return delta


def forward(model, x):
    return model.forward(x)


# --- batches and losses -------------------------------------------------------


@dataclass
class Batch:
    """A stack of instances: features (B, G, F), labels (B, D), row index (B,)."""

    features: np.ndarray
    labels: np.ndarray
    index: np.ndarray

    @classmethod
    def from_instances(cls, instances, index=None):
        feats = np.stack([inst.features for inst in instances])
        labels = np.stack([inst.labels for inst in instances])
        if index is None:
            index = np.arange(len(instances))
        return cls(feats, labels, np.asarray(index))

    def take(self, rows):
        return Batch(self.features[rows], self.labels[rows], self.index[rows])

    def __len__(self):
        return self.labels.shape[0]


def predict_batch(model, features):
    """Model outputs for stacked instances, flattened group-major to (B, D)."""
    b, g, f = features.shape
    return model.forward(features.reshape(b * g, f)).reshape(b, -1)


class MseLoss:
    """Mean over instances of the mean squared error across the D labels."""

    name = "mse"

    def value_and_grad(self, preds, batch):
        diff = preds - batch.labels
        b, d = diff.shape
        return float(np.mean(diff ** 2)), 2.0 * diff / (b * d)

    def value(self, preds, batch):
        return float(np.mean((preds - batch.labels) ** 2))


def grad(model, loss_fn, batch):
    """Mean batch loss and exact gradients w.r.t. every model parameter."""
    if not hasattr(loss_fn, "value_and_grad"):
        raise CapabilityError(f"loss {loss_fn!r} does not expose value_and_grad")
    b, g, f = batch.features.shape
    out, acts = model.forward_cached(batch.features.reshape(b * g, f))
    value, dpred = loss_fn.value_and_grad(out.reshape(b, -1), batch)
    return value, model.backward(acts, dpred.reshape(out.shape))


# --- optimizers and schedules -------------------------------------------------


def cyclic_lr(step, base_lr, max_lr, cycle_len):
    """Triangular cyclical learning rate: base at cycle ends, max mid-cycle."""
    if cycle_len < 2:
        raise InputError("cycle_len must be >= 2")
    if max_lr < base_lr:
        raise InputError("max_lr must be >= base_lr")
    pos = (step % cycle_len) / cycle_len
    frac = 1.0 - abs(2.0 * pos - 1.0)
    return base_lr + (max_lr - base_lr) * frac


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Sgd:
    def __init__(self, params):
        pass

    def step(self, params, grads, lr):
        for p, g in zip(params, grads):
            p -= lr * g


def make_optimizer(name, params):
    if name == "adam":
        return Adam(params)
    if name == "sgd":
        return Sgd(params)
    raise ConfigError(f"unknown optimizer {name!r}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    schedule: str = "constant"
    base_lr_frac: float = 0.1
    cycle_len: int = 100
    optimizer: str = "adam"
    batch_size: int = 32
    epochs: int = 100
    max_updates: int | None = None
    patience: int | None = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.patience is not None and self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.schedule not in ("constant", "cyclic"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def lr_at(self, step):
        if self.schedule == "cyclic":
            return cyclic_lr(step, self.lr * self.base_lr_frac, self.lr, self.cycle_len)
        return self.lr

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    updates: int = 0
    best_epoch: int = -1
    stopped_early: bool = False


def _batch_value(model, loss_fn, batch):
    preds = predict_batch(model, batch.features)
    if hasattr(loss_fn, "value"):
        return loss_fn.value(preds, batch)
    return loss_fn.value_and_grad(preds, batch)[0]


def train(model, train_batch, loss_fn, config, val_batch=None, val_loss_fn=None,
          callback=None):
    """Minibatch training with optional early stopping on validation loss.

    ``callback(model, update_count)`` fires after every parameter update and
    is used by the model-based sampler to grab checkpoints. When early
    stopping is active the parameters of the best validation epoch are
    restored before returning.
    """
    rng = np.random.default_rng(config.seed)
    params = model.params()
    opt = make_optimizer(config.optimizer, params)
    hist = TrainHistory()
    val_loss_fn = val_loss_fn or loss_fn
    n = len(train_batch)
    budget = config.max_updates if config.max_updates is not None else np.inf
    best_val, best_params, bad_epochs = np.inf, None, 0
    early = val_batch is not None and config.patience is not None

    for epoch in range(config.epochs):
        if hist.updates >= budget:
            break
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            if hist.updates >= budget:
                break
            sub = train_batch.take(order[start:start + config.batch_size])
            value, grads = grad(model, loss_fn, sub)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at update {hist.updates}", step=hist.updates)
            opt.step(params, grads, config.lr_at(hist.updates))
            hist.updates += 1
            losses.append(value)
            if callback is not None:
                callback(model, hist.updates)
        hist.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        if val_batch is not None:
            val = _batch_value(model, val_loss_fn, val_batch)
            hist.val_loss.append(float(val))
            if early:
                if val < best_val:
                    best_val, best_params, bad_epochs = val, [p.copy() for p in params], 0
                    hist.best_epoch = epoch
                else:
                    bad_epochs += 1
                    if bad_epochs > config.patience:
                        hist.stopped_early = True
                        break
    if early and best_params is not None:
        for p, best in zip(params, best_params):
            p[...] = best
    return model, hist


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(model, path):
    """Binary checkpoint: magic, layer count, widths, row-major float64 params."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(model.widths)))
        fh.write(struct.pack(f"<{len(model.widths)}I", *model.widths))
        for p in model.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not an egl_lab model checkpoint")
    (n,) = struct.unpack_from("<I", blob, 8)
    widths = list(struct.unpack_from(f"<{n}I", blob, 12))
    offset = 12 + 4 * n
    model = Mlp(widths, seed=0)
    params = []
    for p in model.params():
        count = p.size
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(p.shape)
        params.append(arr.astype(np.float64))
        offset += 8 * count
    if offset != len(blob):
        raise InputError(f"{path}: trailing bytes in checkpoint")
    model.set_params(params)
    return model
