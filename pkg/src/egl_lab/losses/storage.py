"""Fitted-loss files.

``<base>.loss`` is line-delimited JSON: a header line (format version,
kind, family, ``w_min``, dimension) followed, for per-instance fits, by one
``{"instance_id", "raw"}`` record per instance. Feature-based fits store the
network in ``<base>.ckpt`` and its input standardisation in the header.
"""

from __future__ import annotations

import json
import os

import numpy as np

from ..errors import InputError
from ..nn import load_checkpoint, save_checkpoint
from . import families as F
from .fbp import FbpNetwork

LOSS_FORMAT = "egl-lab-loss/1"


def _base(path):
    for ext in (".loss", ".ckpt"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path


def save_instance_losses(path, losses, instance_ids):
    """Per-instance parameters, one record per instance id (in the given order)."""
    if len(instance_ids) != len(losses):
        raise InputError("one instance id per fitted loss is required")
    base = _base(path)
    os.makedirs(os.path.dirname(base) or ".", exist_ok=True)
    header = {"format": LOSS_FORMAT, "kind": "lodl", "family": losses.family,
              "w_min": losses.w_min, "dim": losses.dim, "count": len(losses)}
    with open(base + ".loss", "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for iid, raw in zip(instance_ids, losses.raw):
            fh.write(json.dumps({"instance_id": iid, "raw": raw.tolist()}) + "\n")
    return base + ".loss"


def save_fbp(path, network, dim):
    base = _base(path)
    os.makedirs(os.path.dirname(base) or ".", exist_ok=True)
    save_checkpoint(network.net, base + ".ckpt")
    header = {"format": LOSS_FORMAT, "kind": "fbp", "family": network.family,
              "w_min": network.w_min, "dim": dim, "checkpoint": os.path.basename(base) + ".ckpt",
              "feat_mean": network.feat_mean.tolist(), "feat_std": network.feat_std.tolist(),
              "diag_feature": network.diag_feature, "diag_offset": network.diag_offset}
    with open(base + ".loss", "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
    return base + ".loss"


def load_loss(path):
    """Returns ``("lodl", {instance_id: raw}, header)`` or ``("fbp", FbpNetwork, header)``."""
    base = _base(path)
    with open(base + ".loss") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != LOSS_FORMAT:
            raise InputError(f"{base}.loss: unsupported loss format {header.get('format')!r}")
        if header["kind"] == "lodl":
            raws = {}
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    raws[rec["instance_id"]] = np.asarray(rec["raw"], dtype=np.float64)
            if len(raws) != header["count"]:
                raise InputError(f"{base}.loss: expected {header['count']} records, got {len(raws)}")
            return "lodl", raws, header
    if header["kind"] != "fbp":
        raise InputError(f"{base}.loss: unknown loss kind {header['kind']!r}")
    net = load_checkpoint(os.path.join(os.path.dirname(base), header["checkpoint"]))
    network = FbpNetwork(header["family"], net, header["w_min"], header["feat_mean"],
                         header["feat_std"], header["diag_feature"], header.get("diag_offset", 0.0))
    return "fbp", network, header


def losses_for(loaded, instances):
    """``InstanceLosses`` for ``instances`` from a ``load_loss`` result."""
    from .fbp import induced_losses

    kind, payload, header = loaded
    if kind == "fbp":
        return induced_losses(payload, instances)
    missing = [inst.instance_id for inst in instances if inst.instance_id not in payload]
    if missing:
        raise InputError(f"fitted loss file lacks instances {missing[:3]}")
    raw = np.stack([payload[inst.instance_id] for inst in instances])
    return F.InstanceLosses(header["family"], raw, header["w_min"], dim=header["dim"])
