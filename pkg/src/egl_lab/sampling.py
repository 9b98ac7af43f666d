"""Candidate predictions and their decision regrets.

Two samplers produce candidate prediction vectors per instance: Gaussian
perturbation of the true labels, and model-based sampling, which snapshots
predictive models at evenly spaced points of a plain MSE training run.
``build_loss_dataset`` then scores every candidate with the downstream
solver.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import regret_batch
from .errors import ConfigError, InputError, SolverError
from .nn import Batch, MseLoss, TrainConfig, predict_batch, train


@dataclass
class CandidateSample:
    instance_id: str
    preds: np.ndarray
    regret: float = float("nan")
    provenance: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_record(self, index):
        return {
            "instance_id": self.instance_id,
            "sample_index": index,
            "provenance": self.provenance,
            "preds": np.asarray(self.preds).tolist(),
            "regret": None if math.isnan(self.regret) else float(self.regret),
            "wall_time": float(self.wall_time),
        }

    @classmethod
    def from_record(cls, rec):
        regret = rec.get("regret")
        return cls(rec["instance_id"], np.array(rec["preds"], dtype=np.float64),
                   float("nan") if regret is None else float(regret),
                   rec.get("provenance", {}), rec.get("wall_time", 0.0))


@dataclass
class SamplerConfig:
    kind: str = "gaussian"
    k: int = 32
    sigma: float = 1.0
    num_models: int = 5
    lr: float = 0.1
    schedule: str = "constant"
    cycle_len: int = 100
    optimizer: str = "sgd"
    batch_size: int = 16
    total_updates: int = 50000
    updates_per_model: int | None = None
    include_step0: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "model_based"):
            raise ConfigError(f"unknown sampler kind {self.kind!r}")
        if self.k < 1:
            raise ConfigError("K must be >= 1")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.num_models < 1:
            raise ConfigError("num_models must be >= 1")

    def per_model_updates(self):
        if self.updates_per_model is not None:
            if self.updates_per_model * self.num_models > self.total_updates:
                raise ConfigError("updates_per_model * num_models exceeds the update budget")
            return self.updates_per_model
        return self.total_updates // self.num_models

    def to_dict(self):
        return asdict(self)


def gaussian_sample(instance, sigma, k, seed=0):
    """``k`` copies of the labels with i.i.d. ``N(0, sigma^2)`` noise added."""
    if sigma < 0:
        raise InputError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=(k, instance.dim)) * sigma
    preds = instance.labels[None, :] + noise
    return [CandidateSample(instance.instance_id, preds[j], provenance={"kind": "gaussian", "sigma": sigma})
            for j in range(k)]


def checkpoints_per_model(k, num_models):
    """Split ``k`` samples over models, remainder going to the earliest ones."""
    base, extra = divmod(k, num_models)
    return [base + (1 if m < extra else 0) for m in range(num_models)]


def checkpoint_steps(updates, count, include_step0=False):
    """Evenly spaced update counts at which a model is snapshotted."""
    if count == 0:
        return []
    if updates == 0:
        return [0] * count
    if updates < count:
        raise ConfigError(f"{updates} updates cannot host {count} distinct checkpoints")
    if include_step0:
        return [int(round(t * updates / count)) for t in range(count)]
    return [int(round(t * updates / count)) for t in range(1, count + 1)]


def model_based_sample(instances, train_instances, config, model_factory, k=None):
    """Snapshot predictions from several MSE-trained predictive models.

    ``model_factory(seed)`` returns a freshly initialised model. Every
    checkpoint predicts every instance in ``instances``; the result maps
    instance id to its list of candidates, ordered by (model, checkpoint).
    """
    k = config.k if k is None else k
    counts = checkpoints_per_model(k, config.num_models)
    updates = config.per_model_updates()
    train_batch = Batch.from_instances(train_instances)
    pred_batch = Batch.from_instances(instances)
    out = {inst.instance_id: [] for inst in instances}
    seeds = np.random.default_rng(config.seed).integers(0, 2**31, size=(config.num_models, 2))
    for m, count in enumerate(counts):
        if count == 0:
            continue
        steps = checkpoint_steps(updates, count, config.include_step0)
        model = model_factory(int(seeds[m, 0]))
        snaps = []

        def record(current, update_count, steps=steps, snaps=snaps):
            while len(snaps) < len(steps) and steps[len(snaps)] == update_count:
                snaps.append((update_count, predict_batch(current, pred_batch.features)))

        record(model, 0)
        if updates > 0 and len(snaps) < len(steps):
            epochs = math.ceil(updates * config.batch_size / max(len(train_batch), 1)) + 1
            cfg = TrainConfig(lr=config.lr, schedule=config.schedule, cycle_len=config.cycle_len,
                              optimizer=config.optimizer, batch_size=config.batch_size,
                              epochs=epochs, max_updates=updates, patience=None,
                              seed=int(seeds[m, 1]))
            train(model, train_batch, MseLoss(), cfg, callback=record)
        if len(snaps) != len(steps):
            raise ConfigError(f"model {m} produced {len(snaps)} of {len(steps)} checkpoints")
        for step, preds in snaps:
            for row, inst in enumerate(instances):
                out[inst.instance_id].append(CandidateSample(
                    inst.instance_id, preds[row].copy(),
                    provenance={"kind": "model", "model_index": m, "checkpoint_step": step}))
    return out


def sample_candidates(instances, config, train_instances=None, model_factory=None):
    """Dispatch on ``config.kind``; returns ``{instance_id: [CandidateSample]}``."""
    if config.kind == "gaussian":
        return {inst.instance_id: gaussian_sample(inst, config.sigma, config.k, seed=(config.seed, pos))
                for pos, inst in enumerate(instances)}
    if model_factory is None or train_instances is None:
        raise ConfigError("model-based sampling needs training instances and a model factory")
    return model_based_sample(instances, train_instances, config, model_factory)


@dataclass
class LossDataset:
    """Scored candidates for many instances plus a header describing them."""

    samples: dict
    header: dict = field(default_factory=dict)

    def instance_ids(self):
        return sorted(self.samples)

    def arrays(self, instances):
        """Residuals (I, S, D), regrets (I, S) and mask for ``instances`` in order."""
        from .losses.lodl import stack_samples

        rows = []
        for inst in instances:
            cands = self.samples[inst.instance_id]
            preds = np.stack([c.preds for c in cands])
            regrets = np.array([c.regret for c in cands])
            rows.append((preds, inst.labels, regrets))
        return stack_samples(rows)

    def total_wall_time(self):
        return float(sum(c.wall_time for cands in self.samples.values() for c in cands))

    def save(self, path):
        base = _strip(path)
        os.makedirs(os.path.dirname(base) or ".", exist_ok=True)
        with open(base + ".meta", "w") as fh:
            fh.write(json.dumps(self.header, sort_keys=True) + "\n")
        with open(base + ".data", "w") as fh:
            for iid in self.instance_ids():
                for j, cand in enumerate(self.samples[iid]):
                    fh.write(json.dumps(cand.to_record(j), sort_keys=True) + "\n")
        return base

    @classmethod
    def load(cls, path):
        base = _strip(path)
        with open(base + ".meta") as fh:
            header = json.loads(fh.readline())
        samples = {}
        with open(base + ".data") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    samples.setdefault(rec["instance_id"], []).append(CandidateSample.from_record(rec))
        return cls(samples, header)


def _strip(path):
    for ext in (".meta", ".data"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path


def build_loss_dataset(samples, instances, problem, parallelism=None, anchor=True, header=None):
    """Fill in regrets for every candidate (in place) and return a ``LossDataset``.

    ``problem`` is either a ``DecisionProblem`` or a callable mapping an
    instance to one. With ``anchor`` each instance also gets the candidate
    ``preds == labels`` with regret 0. Work fans out over instances with at
    most ``parallelism`` threads; results keep (instance_id, sample_index)
    order regardless.
    """
    by_id = {inst.instance_id: inst for inst in instances}
    missing = set(samples) - set(by_id)
    if missing:
        raise InputError(f"samples reference unknown instances: {sorted(missing)[:3]}")
    if parallelism is None:
        parallelism = int(os.environ.get("EGL_LAB_THREADS", "1"))
    problem_for = problem if callable(problem) and not hasattr(problem, "solve") else (lambda _inst: problem)

    def score(iid):
        inst = by_id[iid]
        cands = samples[iid]
        start = time.perf_counter()
        if cands:
            try:
                regrets = regret_batch(problem_for(inst), np.stack([c.preds for c in cands]), inst.labels)
            except SolverError as err:
                row = getattr(err, "row", None)
                raise SolverError(f"instance {iid} sample {row}: {err}", iterations=err.iterations,
                                  best=err.best, gap=err.gap) from err
        elapsed = time.perf_counter() - start
        per = elapsed / max(len(cands), 1)
        for c, r in zip(cands, regrets if cands else []):
            c.regret = float(r)
            c.wall_time = per
        if anchor:
            cands.append(CandidateSample(iid, inst.labels.copy(), 0.0, {"kind": "anchor"}, 0.0))
        return elapsed

    ids = sorted(samples)
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            times = list(pool.map(score, ids))
    else:
        times = [score(iid) for iid in ids]
    hdr = dict(header or {})
    hdr["step2_seconds"] = float(sum(times))
    hdr["anchor"] = bool(anchor)
    return LossDataset(samples, hdr)
