"""Synthetic dataset generators, train/validation/test splitting and file I/O.

Datasets are written as ``<name>.meta`` (one JSON header line) plus
``<name>.data`` (one JSON record per instance). Portfolio datasets also carry
their correlation matrix in ``<name>.q`` as a dense text matrix.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import PtoInstance
from .errors import InputError

GENERATOR_VERSION = "egl-lab-datagen/1"
DOMAINS = ("cubic", "cubic_hard", "webadv", "portfolio")
DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)


@dataclass
class DatasetSpec:
    domain: str
    num_instances: int
    seed: int = 0
    n: int = 50  # cubic resources / web-adv users
    m: int = 5  # web-adv sites
    k: int = 1  # resources or sites to pick
    d: int = 50  # portfolio stocks
    history_len: int = 10
    fractions: tuple = DEFAULT_FRACTIONS
    split_mode: str = "iid"
    ctr_alpha: float = 2.0
    ctr_beta: float = 5.0
    n_factors: int = 4
    noise_scale: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise InputError(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        self.fractions = tuple(float(f) for f in self.fractions)
        check_fractions(self.fractions)
        if self.split_mode not in ("iid", "temporal"):
            raise InputError(f"unknown split mode {self.split_mode!r}")

    def to_dict(self):
        out = asdict(self)
        out["fractions"] = list(self.fractions)
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class Dataset:
    instances: list
    spec: DatasetSpec
    version: str = GENERATOR_VERSION
    q: np.ndarray | None = None

    def split(self, name):
        return [inst for inst in self.instances if inst.split == name]

    def by_id(self):
        return {inst.instance_id: inst for inst in self.instances}

    def __len__(self):
        return len(self.instances)


def check_fractions(fractions):
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError(f"split fractions {fractions} must be 3 non-negative values summing to 1")


def cubic_labels(x, variant="standard"):
    slope = {"standard": 6.5, "hard": 7.5}[variant]
    return 10.0 * x ** 3 - slope * x


def gen_cubic(num_instances, n=50, variant="standard", seed=0):
    """Features ``x ~ U[-1, 1]`` with cubic labels, one scalar per resource."""
    if n < 1:
        raise InputError("N must be >= 1")
    if variant not in ("standard", "hard"):
        raise InputError(f"unknown cubic variant {variant!r}")
    rng = np.random.default_rng(seed)
    domain = "cubic" if variant == "standard" else "cubic_hard"
    spec = DatasetSpec(domain=domain, num_instances=num_instances, seed=seed, n=n, k=1)
    instances = []
    for i in range(num_instances):
        x = rng.uniform(-1.0, 1.0, size=n)
        instances.append(PtoInstance(cubic_labels(x, variant), x[:, None], f"{domain}-{i:05d}",
                                     time_index=i))
    return Dataset(instances, spec)


def gen_webadv(num_instances, n_users=10, m_sites=5, seed=0, k=2, ctr_alpha=2.0,
               ctr_beta=5.0, zero_ctr=False):
    """CTR matrices with features ``x_m = A y_m`` for one random ``A`` per dataset.

    ``zero_ctr`` forces every CTR to zero (debugging the feature map).
    """
    if n_users < 1 or m_sites < 1:
        raise InputError("need at least one user and one site")
    rng = np.random.default_rng(seed)
    mix = rng.uniform(0.0, 1.0, size=(n_users, n_users))
    spec = DatasetSpec(domain="webadv", num_instances=num_instances, seed=seed, n=n_users,
                       m=m_sites, k=k, ctr_alpha=ctr_alpha, ctr_beta=ctr_beta,
                       extra={"zero_ctr": bool(zero_ctr)})
    instances = []
    for i in range(num_instances):
        ctr = rng.beta(ctr_alpha, ctr_beta, size=(m_sites, n_users))
        if zero_ctr:
            ctr = np.zeros_like(ctr)
        feats = ctr @ mix.T  # row m is A @ y_m
        instances.append(PtoInstance(ctr.ravel(), feats, f"webadv-{i:05d}", time_index=i))
    return Dataset(instances, spec)


def psd_project(mat, max_shift=0.1):
    """Symmetrise and clip negative eigenvalues; refuse large corrections."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    shift = max(0.0, -vals.min())
    if shift > max_shift:
        raise InputError(f"PSD projection would shift eigenvalues by {shift:.3f} > {max_shift}")
    clipped = np.clip(vals, 0.0, None)
    out = (vecs * clipped) @ vecs.T
    return 0.5 * (out + out.T)


def gen_portfolio(num_instances, d_stocks=50, history_len=10, seed=0, n_factors=4,
                  noise_scale=1.0, factor_ar=0.6, idio_ar=0.3, vol=0.01):
    """Returns from an autoregressive latent-factor model.

    Instance ``t`` has one feature row per stock (its previous
    ``history_len`` returns) and the next-step returns as labels. ``Q`` is the
    correlation matrix of the whole generated return panel.
    """
    if d_stocks < 2 or history_len < 1:
        raise InputError("need at least 2 stocks and history_len >= 1")
    rng = np.random.default_rng(seed)
    burn = 50
    steps = burn + history_len + num_instances
    loadings = rng.normal(0.0, 1.0, size=(d_stocks, n_factors))
    factors = np.zeros((steps, n_factors))
    idio = np.zeros((steps, d_stocks))
    for t in range(1, steps):
        factors[t] = factor_ar * factors[t - 1] + rng.normal(0.0, 1.0, size=n_factors)
        idio[t] = idio_ar * idio[t - 1] + noise_scale * rng.normal(0.0, 1.0, size=d_stocks)
    returns = vol * (factors @ loadings.T / np.sqrt(n_factors) + idio)
    returns = returns[burn:]
    if np.allclose(returns.std(axis=0), 0.0):
        raise InputError("degenerate return panel")
    q = psd_project(np.corrcoef(returns, rowvar=False))
    spec = DatasetSpec(domain="portfolio", num_instances=num_instances, seed=seed, d=d_stocks,
                       history_len=history_len, n_factors=n_factors, noise_scale=noise_scale,
                       split_mode="temporal")
    instances = []
    for i in range(num_instances):
        t = history_len + i
        feats = returns[t - history_len:t].T  # (stocks, history)
        instances.append(PtoInstance(returns[t], feats, f"portfolio-{i:05d}", time_index=i))
    return Dataset(instances, spec, q=q)


def split_counts(n, fractions):
    check_fractions(fractions)
    # the small slack keeps e.g. 150 * (2/15) from flooring to 19
    n_train = min(n, int(math.floor(n * fractions[0] + 0.5 + 1e-9)))
    n_val = min(n - n_train, int(math.floor(n * fractions[1] + 1e-9)))
    return n_train, n_val, n - n_train - n_val


def split_dataset(dataset, fractions=DEFAULT_FRACTIONS, mode="iid", seed=0):
    """Assign ``split`` fields in place and return the dataset.

    Train gets ``round-half-up(n * f_train)``, validation
    ``floor(n * f_val)`` and test the remainder. Temporal mode keeps time
    order (train earliest); iid mode shuffles with ``seed`` first.
    """
    fractions = tuple(float(f) for f in fractions)
    n = len(dataset.instances)
    if n < sum(1 for f in fractions if f > 0):
        raise InputError(f"{n} instances cannot fill {fractions}")
    counts = split_counts(n, fractions)
    if mode == "temporal":
        order = sorted(range(n), key=lambda i: dataset.instances[i].time_index)
    elif mode == "iid":
        order = list(np.random.default_rng(seed).permutation(n))
    else:
        raise InputError(f"unknown split mode {mode!r}")
    names = ["train"] * counts[0] + ["validation"] * counts[1] + ["test"] * counts[2]
    for pos, idx in enumerate(order):
        dataset.instances[idx].split = names[pos]
    dataset.spec = replace(dataset.spec, fractions=fractions, split_mode=mode)
    return dataset


def generate(spec):
    """Build and split a dataset from a ``DatasetSpec``."""
    if spec.domain in ("cubic", "cubic_hard"):
        ds = gen_cubic(spec.num_instances, spec.n,
                       "standard" if spec.domain == "cubic" else "hard", spec.seed)
    elif spec.domain == "webadv":
        ds = gen_webadv(spec.num_instances, spec.n, spec.m, spec.seed, k=spec.k,
                        ctr_alpha=spec.ctr_alpha, ctr_beta=spec.ctr_beta,
                        zero_ctr=spec.extra.get("zero_ctr", False))
    else:
        ds = gen_portfolio(spec.num_instances, spec.d, spec.history_len, spec.seed,
                           n_factors=spec.n_factors, noise_scale=spec.noise_scale)
    ds.spec = replace(spec, extra=dict(spec.extra))
    mode = "temporal" if spec.domain == "portfolio" else spec.split_mode
    return split_dataset(ds, spec.fractions, mode, spec.seed)


# --- serialization -------------------------------------------------------------


def instance_record(inst):
    return {
        "instance_id": inst.instance_id,
        "split": inst.split,
        "time_index": int(inst.time_index),
        "labels": inst.labels.tolist(),
        "features": inst.features.tolist(),
    }


def instance_from_record(rec):
    return PtoInstance(np.array(rec["labels"]), np.array(rec["features"]),
                       rec["instance_id"], rec["split"], rec.get("time_index", 0))


def save_dataset(dataset, out_dir, name):
    """Write ``name.meta``/``name.data`` (and ``name.q``) under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, name)
    header = {"version": dataset.version, "spec": dataset.spec.to_dict(),
              "num_instances": len(dataset.instances), "has_q": dataset.q is not None}
    with open(base + ".meta", "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
    with open(base + ".data", "w") as fh:
        for inst in dataset.instances:
            fh.write(json.dumps(instance_record(inst), sort_keys=True) + "\n")
    if dataset.q is not None:
        np.savetxt(base + ".q", dataset.q, fmt="%.17g")
    return base


def load_dataset(path):
    """Load a dataset from ``<base>``, ``<base>.meta`` or ``<base>.data``."""
    base = path
    for ext in (".meta", ".data", ".q"):
        if base.endswith(ext):
            base = base[: -len(ext)]
    with open(base + ".meta") as fh:
        header = json.loads(fh.readline())
    with open(base + ".data") as fh:
        instances = [instance_from_record(json.loads(line)) for line in fh if line.strip()]
    if len(instances) != header["num_instances"]:
        raise InputError(f"{base}: header announces {header['num_instances']} instances, "
                         f"found {len(instances)}")
    ids = [inst.instance_id for inst in instances]
    if len(set(ids)) != len(ids):
        raise InputError(f"{base}: duplicate instance ids")
    q = np.loadtxt(base + ".q", ndmin=2) if header.get("has_q") else None
    spec = DatasetSpec.from_dict(header["spec"])
    return Dataset(instances, spec, header["version"], q)


def make_problem(dataset_or_spec, q=None, lam=0.001, settings=None):
    """Decision problem matching a dataset's domain and shapes."""
    from .problems import PortfolioProblem, SolverSettings, TopKProblem, WebAdvertisingProblem

    spec = getattr(dataset_or_spec, "spec", dataset_or_spec)
    if spec.domain in ("cubic", "cubic_hard"):
        return TopKProblem(spec.k, spec.n)
    if spec.domain == "webadv":
        return WebAdvertisingProblem(spec.k, spec.m, spec.n)
    q = q if q is not None else getattr(dataset_or_spec, "q", None)
    if q is None:
        raise InputError("portfolio problems need the dataset's Q matrix")
    return PortfolioProblem(q, lam, settings or SolverSettings())
