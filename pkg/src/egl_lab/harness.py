"""End-to-end experiments: sample, score, fit losses, train, evaluate.

A trial regenerates its dataset (fresh split) from the trial seed, runs the
configured method and scores the trained predictive model by mean
normalized DQ on the test and validation splits. ``run_experiment`` repeats
that over seeds and aggregates mean and standard error.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import datagen
from .core import mean_normalized_dq
from .datagen import DatasetSpec
from .errors import ConfigError, EglLabError
from .losses import families as F
from .losses.fbp import FbpConfig, fit_fbp, induced_losses, label_features
from .losses.lodl import FitConfig, fit_lodl_batch
from .nn import Batch, Mlp, MseLoss, TrainConfig, predict_batch, train
from .sampling import CandidateSample, SamplerConfig, build_loss_dataset, sample_candidates

logger = logging.getLogger(__name__)

METHODS = ("two_stage_mse", "lz_one_sample", "lodl", "egl_mbs", "egl_fbp", "egl_full")
MBS_METHODS = ("egl_mbs", "egl_full")
FBP_METHODS = ("egl_fbp", "egl_full")
STEPS = ("step1_sampling", "step2_dataset", "step3_loss", "step4_train")


@dataclass
class ModelSpec:
    """Predictive model: ``linear`` or a ReLU MLP with ``hidden_layers`` hidden layers."""

    kind: str = "mlp"
    hidden: int = 500
    hidden_layers: int = 1

    def build(self, in_width, out_width, seed):
        if self.kind == "linear":
            return Mlp([in_width, out_width], seed=seed)
        if self.kind == "mlp":
            return Mlp([in_width] + [self.hidden] * self.hidden_layers + [out_width], seed=seed)
        raise ConfigError(f"unknown model kind {self.kind!r}")


def _build(cls, data):
    if isinstance(data, cls):
        return copy.deepcopy(data)
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec("cubic", 150))
    method: str = "egl_full"
    family: str = F.DWMSE
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    fit: FitConfig = field(default_factory=FitConfig)
    fbp: FbpConfig = field(default_factory=FbpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mse_train: TrainConfig = field(default_factory=TrainConfig)
    num_trials: int = 10
    seeds: list = field(default_factory=list)
    num_baseline_draws: int = 100
    lam: float = 0.001
    parallelism: int | None = None

    def __post_init__(self):
        self.dataset = _build(DatasetSpec, self.dataset)
        self.sampler = _build(SamplerConfig, self.sampler)
        self.model = _build(ModelSpec, self.model)
        self.fit = _build(FitConfig, self.fit)
        self.fbp = _build(FbpConfig, self.fbp)
        self.train = _build(TrainConfig, self.train)
        self.mse_train = _build(TrainConfig, self.mse_train)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        self.family = F.canonical_family(self.family)
        if self.method in ("lodl", "egl_mbs", "egl_fbp", "egl_full") and self.family not in (
                F.WMSE, F.DWMSE, F.QUAD, F.DQUAD):
            raise ConfigError(f"method {self.method} needs a learned family, got {self.family}")
        if not self.seeds:
            self.seeds = list(range(self.num_trials))
        if len(self.seeds) != self.num_trials:
            raise ConfigError("seeds must have exactly num_trials entries")
        expected = "model_based" if self.method in MBS_METHODS else "gaussian"
        if self.method in ("lodl", "egl_fbp", "egl_mbs", "egl_full") and self.sampler.kind != expected:
            self.sampler = _build(SamplerConfig, {**asdict(self.sampler), "kind": expected})

    def to_dict(self):
        out = asdict(self)
        out["dataset"] = self.dataset.to_dict()
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown ExperimentConfig keys: {sorted(unknown)}")
        return cls(**data)

    def with_updates(self, **changes):
        data = self.to_dict()
        for key, val in changes.items():
            if isinstance(val, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **val}
            else:
                data[key] = val
        return ExperimentConfig.from_dict(data)


def load_config(path):
    with open(path) as fh:
        try:
            return ExperimentConfig.from_dict(json.load(fh))
        except (TypeError, json.JSONDecodeError) as err:
            raise ConfigError(f"{path}: {err}") from err


# --- one trial -------------------------------------------------------------------


@dataclass
class TrialResult:
    seed: int
    test_dq: float = float("nan")
    val_dq: float = float("nan")
    val_mse: float = float("nan")
    timings: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    error: str | None = None
    extra: dict = field(default_factory=dict)


def _model_factory(config, dataset):
    inst = dataset.instances[0]
    in_w, out_w = inst.features.shape[1], inst.outputs_per_group
    return lambda seed: config.model.build(in_w, out_w, seed)


def _instance_losses_lodl(config, loss_ds, instances, seed):
    resid, regret, mask = loss_ds.arrays(instances)
    fit_cfg = _build(FitConfig, {**asdict(config.fit), "seed": seed})
    family = F.LZ if config.method == "lz_one_sample" else config.family
    raw, fit_mse = fit_lodl_batch(resid, regret, mask, family, fit_cfg)
    return F.InstanceLosses(family, raw, fit_cfg.w_min, dim=instances[0].dim), float(np.mean(fit_mse))


def _fbp_arrays(loss_ds, instances):
    resid, regret, mask = loss_ds.arrays(instances)
    lf = np.stack([label_features(inst) for inst in instances])
    return lf, resid, regret, mask


def run_trial(config, seed):
    """One seeded repetition; stage errors are captured in ``result.error``."""
    result = TrialResult(seed=seed)
    timings = {k: 0.0 for k in STEPS}
    try:
        spec = _build(DatasetSpec, {**config.dataset.to_dict(), "seed": seed})
        dataset = datagen.generate(spec)
        problem = datagen.make_problem(dataset, lam=config.lam)
        train_set, val_set, test_set = (dataset.split(s) for s in ("train", "validation", "test"))
        factory = _model_factory(config, dataset)
        rng = np.random.default_rng(seed)
        model_seed, sampler_seed, train_seed, fit_seed = (int(s) for s in rng.integers(0, 2**31, 4))
        train_b = Batch.from_instances(train_set)
        val_b = Batch.from_instances(val_set) if val_set else None
        mse_cfg = _build(TrainConfig, {**asdict(config.mse_train), "seed": train_seed})

        if config.method in ("two_stage_mse", "lz_one_sample"):
            t0 = time.perf_counter()
            model, _ = train(factory(model_seed), train_b, MseLoss(), mse_cfg, val_batch=val_b)
            timings["step4_train"] += time.perf_counter() - t0
            if val_b is not None:
                result.val_mse = MseLoss().value(predict_batch(model, val_b.features), val_b)

        if config.method != "two_stage_mse":
            fit_set = train_set + val_set
            t0 = time.perf_counter()
            if config.method == "lz_one_sample":
                preds = predict_batch(model, Batch.from_instances(fit_set).features)
                samples = {inst.instance_id: [CandidateSample(inst.instance_id, preds[i],
                                                              provenance={"kind": "mse_model"})]
                           for i, inst in enumerate(fit_set)}
                anchor = False
            else:
                scfg = _build(SamplerConfig, {**asdict(config.sampler), "seed": sampler_seed})
                samples = sample_candidates(fit_set, scfg, train_instances=train_set, model_factory=factory)
                anchor = True
            timings["step1_sampling"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            loss_ds = build_loss_dataset(samples, fit_set, problem, parallelism=config.parallelism,
                                         anchor=anchor)
            timings["step2_dataset"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            if config.method in FBP_METHODS:
                fbp_cfg = _build(FbpConfig, {**asdict(config.fbp), "seed": fit_seed})
                net, hist = fit_fbp(_fbp_arrays(loss_ds, train_set), config.family, fbp_cfg,
                                    val_data=_fbp_arrays(loss_ds, val_set) if val_set else None)
                train_losses = induced_losses(net, train_set)
                val_losses = induced_losses(net, val_set) if val_set else None
                result.extra["fbp_best_epoch"] = hist["best_epoch"]
            else:
                all_losses, fit_mse = _instance_losses_lodl(config, loss_ds, fit_set, fit_seed)
                n_tr = len(train_set)
                train_losses = F.InstanceLosses(all_losses.family, all_losses.raw[:n_tr],
                                                all_losses.w_min, dim=all_losses.dim)
                val_losses = (F.InstanceLosses(all_losses.family, all_losses.raw[n_tr:],
                                               all_losses.w_min, dim=all_losses.dim)
                              if val_set else None)
                result.extra["lodl_fit_mse"] = fit_mse
            timings["step3_loss"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            step4 = _build(TrainConfig, {**asdict(config.train), "seed": train_seed})
            model, _ = train(factory(model_seed), train_b, train_losses, step4, val_batch=val_b,
                             val_loss_fn=val_losses)
            timings["step4_train"] += time.perf_counter() - t0

        def scorer(instances, salt):
            if not instances:
                return float("nan"), []
            preds = predict_batch(model, Batch.from_instances(instances).features)
            lookup = {inst.instance_id: preds[i] for i, inst in enumerate(instances)}
            score = mean_normalized_dq(lambda _i: problem, instances, lambda i: lookup[i.instance_id],
                                       seed=(seed, salt), num_baseline_draws=config.num_baseline_draws)
            return score.mean, score.skipped

        result.test_dq, skipped_test = scorer(test_set, 1)
        result.val_dq, skipped_val = scorer(val_set, 2)
        result.skipped = skipped_test + skipped_val
        if skipped_test or skipped_val:
            logger.warning("seed %s: skipped %d degenerate instances", seed, len(result.skipped))
    except EglLabError as err:
        result.error = f"{type(err).__name__}: {err}"
        logger.debug("trial %s failed\n%s", seed, traceback.format_exc())
    result.timings = timings
    return result


# --- aggregation -----------------------------------------------------------------


def mean_sem(values):
    vals = np.asarray([v for v in values if v is not None and not math.isnan(v)], dtype=np.float64)
    if vals.size == 0:
        return float("nan"), float("nan")
    if vals.size == 1:
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))


@dataclass
class ExperimentReport:
    name: str
    method: str
    family: str
    config: dict
    trials: list
    summary: dict = field(default_factory=dict)
    failed: bool = False

    def compute_summary(self):
        ok = [t for t in self.trials if t.error is None]
        summary = {}
        for key in ("test_dq", "val_dq", "val_mse"):
            mean, sem = mean_sem([getattr(t, key) for t in ok])
            summary[key] = {"mean": mean, "sem": sem}
        summary["timings"] = {k: mean_sem([t.timings.get(k, 0.0) for t in self.trials])[0] for k in STEPS}
        summary["completed"] = len(ok)
        summary["aborted"] = len(self.trials) - len(ok)
        self.summary = summary
        self.failed = summary["aborted"] * 2 > len(self.trials)
        return self

    def to_dict(self, include_timing=True):
        out = {
            "name": self.name, "method": self.method, "family": self.family,
            "config": self.config, "failed": self.failed,
            "trials": [asdict(t) for t in self.trials],
            "summary": copy.deepcopy(self.summary),
        }
        if not include_timing:
            for t in out["trials"]:
                t.pop("timings", None)
            out["summary"].pop("timings", None)
            cfg = out["config"]
            cfg.pop("parallelism", None)
        return out

    @classmethod
    def from_dict(cls, data):
        trials = [TrialResult(**t) for t in data.get("trials", [])]
        rep = cls(data["name"], data["method"], data["family"], data.get("config", {}), trials,
                  data.get("summary", {}), data.get("failed", False))
        return rep

    def mean(self, key="test_dq"):
        return self.summary[key]["mean"]

    def sem(self, key="test_dq"):
        return self.summary[key]["sem"]


def run_experiment(config, progress=None, workers=None):
    """Run every seed of ``config``; returns an ``ExperimentReport``.

    Trials are independent, so with ``workers > 1`` (default:
    ``EGL_LAB_THREADS``) they run on a thread pool. Results keep seed order.
    """
    if workers is None:
        workers = int(os.environ.get("EGL_LAB_THREADS", "1"))

    def one(seed):
        res = run_trial(config, seed)
        if progress is not None:
            progress(config, res)
        return res

    if workers > 1 and len(config.seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(one, config.seeds))
    else:
        trials = [one(seed) for seed in config.seeds]
    report = ExperimentReport(config.name, config.method, config.family, config.to_dict(), trials)
    return report.compute_summary()


def dumps_report(report, include_timing=True):
    return json.dumps(report.to_dict(include_timing), sort_keys=True, indent=1,
                      default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# --- step timing -----------------------------------------------------------------


def step_timing_summary(reports):
    """Per-method Step 1/2/3/4 and total seconds (mean over trials)."""
    if isinstance(reports, ExperimentReport):
        reports = [reports]
    rows = []
    for rep in reports:
        if not rep.summary:
            rep.compute_summary()
        t = rep.summary.get("timings", {}) or {}
        row = {"method": rep.method, "family": rep.family, "name": rep.name}
        for k in STEPS:
            row[k] = float(t.get(k, 0.0) or 0.0)
        row["total"] = sum(row[k] for k in STEPS)
        rows.append(row)
    return rows


def format_table(rows, columns):
    """Aligned plain-text table."""
    text = [[str(c) for c in columns]]
    for row in rows:
        text.append([_fmt(row.get(c, "")) for c in columns])
    widths = [max(len(r[i]) for r in text) for i in range(len(columns))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in text]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(val):
    if isinstance(val, float):
        if math.isnan(val):
            return "nan"
        return f"{val:.4f}" if abs(val) >= 1e-3 or val == 0 else f"{val:.3e}"
    return str(val)


def step2_scaling(domain="webadv", sample_counts=(32, 2048), seed=0, num_instances=150,
                  parallelism=1):
    """Step-2 wall time for Gaussian samples at several per-instance counts."""
    spec = DatasetSpec(domain=domain, num_instances=num_instances, seed=seed,
                       n=10 if domain == "webadv" else 50, k=2 if domain == "webadv" else 1)
    dataset = datagen.generate(spec)
    problem = datagen.make_problem(dataset)
    fit_set = dataset.split("train") + dataset.split("validation")
    sigma = 0.1 if domain in ("webadv", "portfolio") else 1.0
    out = {}
    for k in sample_counts:
        samples = sample_candidates(fit_set, SamplerConfig(kind="gaussian", k=k, sigma=sigma, seed=seed))
        t0 = time.perf_counter()
        build_loss_dataset(samples, fit_set, problem, parallelism=parallelism)
        out[k] = time.perf_counter() - t0
    return out
