"""Pre-baked reproduction bundles with threshold checks.

Each bundle runs a grid of (domain, method, family) cells through
``run_experiment`` and evaluates a handful of pass/fail checks on the
aggregated numbers. ``write_outputs`` emits a CSV of cells, an aligned text
table with the checks, and a JSON file holding every per-trial value.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError
from .harness import ExperimentConfig, ExperimentReport, dumps_report, format_table, run_experiment
from .losses import families as F
from .losses.consistency import run_counterexample

logger = logging.getLogger(__name__)

BUNDLES = ("table1_cubic", "table1_hard", "table2_ablation", "table4_mse", "counterexample")
LEARNED = (F.DQUAD, F.DWMSE, F.QUAD, F.WMSE)
DIRECTED = (F.DWMSE, F.DQUAD)
ABLATION_METHODS = ("lodl", "egl_mbs", "egl_fbp", "egl_full")


def base_config(domain):
    """The shipped desk-scale configuration for ``domain``."""
    try:
        text = resources.files("egl_lab").joinpath("configs", f"{domain}.json").read_text()
    except FileNotFoundError as err:
        raise ConfigError(f"no shipped config for domain {domain!r}") from err
    return ExperimentConfig.from_dict(json.loads(text))


def cell_config(domain, method, family=F.DWMSE, trials=None):
    cfg = base_config(domain)
    changes = {"method": method, "family": family, "name": f"{domain}/{method}/{family}"}
    if trials is not None:
        changes.update(num_trials=trials, seeds=list(range(trials)))
    return cfg.with_updates(**changes)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class ReproResult:
    name: str
    cells: dict = field(default_factory=dict)  # (domain, method, family) -> ExperimentReport
    checks: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def cell(self, domain, method, family):
        return self.cells[(domain, method, F.canonical_family(family))]

    def rows(self):
        out = []
        for (domain, method, family), rep in self.cells.items():
            row = {"domain": domain, "method": method, "family": family,
                   "test_dq": rep.mean("test_dq"), "test_sem": rep.sem("test_dq"),
                   "val_dq": rep.mean("val_dq"), "val_sem": rep.sem("val_dq"),
                   "val_mse": rep.mean("val_mse"),
                   "completed": rep.summary["completed"], "aborted": rep.summary["aborted"]}
            row.update(rep.summary["timings"])
            out.append(row)
        return out


def run_cells(specs, trials=None, progress=None):
    """Run ``[(domain, method, family)]`` cells; returns ``{cell: report}``."""
    cells = {}
    for domain, method, family in specs:
        family = F.canonical_family(family)
        logger.info("running %s/%s/%s", domain, method, family)
        cells[(domain, method, family)] = run_experiment(cell_config(domain, method, family, trials),
                                                         progress=progress)
    return cells


def best_by_validation(cells, domain, method, families):
    """The family whose mean validation DQ is highest, and its report."""
    reps = [(fam, cells[(domain, method, F.canonical_family(fam))]) for fam in families]
    return max(reps, key=lambda item: _nan_low(item[1].mean("val_dq")))


def _nan_low(val):
    return -np.inf if np.isnan(val) else val


def _fmt_cell(rep, key="test_dq"):
    return f"{rep.mean(key):.3f} +/- {rep.sem(key):.3f}"


# --- individual bundles ---------------------------------------------------------


def table1(domain, trials=None, families=LEARNED, progress=None):
    specs = [(domain, "two_stage_mse", F.MSE), (domain, "lz_one_sample", F.LZ)]
    specs += [(domain, "lodl", fam) for fam in families]
    specs += [(domain, "egl_full", fam) for fam in DIRECTED]
    name = "table1_cubic" if domain == "cubic" else "table1_hard"
    result = ReproResult(name, run_cells(specs, trials, progress))
    result.checks = table1_checks(result.cells, domain, families)
    return result


def table1_checks(cells, domain, families=LEARNED):
    checks = []
    egl_fam, egl = best_by_validation(cells, domain, "egl_full", DIRECTED)
    if domain == "cubic":
        two = cells[(domain, "two_stage_mse", F.MSE)]
        checks.append(Check("two_stage_mse below zero", two.mean("test_dq") < 0,
                            f"test DQ {_fmt_cell(two)}"))
        checks.append(Check("egl_full at least 0.7", egl.mean("test_dq") >= 0.7,
                            f"{egl_fam}: {_fmt_cell(egl)}"))
    else:
        worst = [(fam, cells[(domain, "lodl", F.canonical_family(fam))]) for fam in families]
        ok = all(rep.mean("test_dq") <= 0 for _, rep in worst)
        detail = ", ".join(f"{fam}: {_fmt_cell(rep)}" for fam, rep in worst)
        checks.append(Check("lodl with gaussian samples at most 0 for every family", ok, detail))
        checks.append(Check("egl_full at least 0.5", egl.mean("test_dq") >= 0.5,
                            f"{egl_fam}: {_fmt_cell(egl)}"))
    return checks


def table2(trials=None, families=LEARNED, domains=("cubic", "webadv", "portfolio"), progress=None):
    specs = [(d, m, fam) for d in domains for m in ABLATION_METHODS for fam in families]
    result = ReproResult("table2_ablation", run_cells(specs, trials, progress))
    result.checks = table2_checks(result.cells, families, domains)
    return result


def table2_checks(cells, families=LEARNED, domains=("cubic", "webadv", "portfolio")):
    checks = []
    for domain in domains:
        key = "val_dq" if domain == "portfolio" else "test_dq"
        lodl_fam, lodl = best_by_validation(cells, domain, "lodl", families)
        egl_fam, egl = best_by_validation(cells, domain, "egl_full", families)
        detail = (f"egl_full ({egl_fam}) {_fmt_cell(egl, key)} vs lodl ({lodl_fam}) "
                  f"{_fmt_cell(lodl, key)} on {key.split('_')[0]}")
        if domain == "cubic":
            ok = egl.mean(key) - lodl.mean(key) > 0.5
            checks.append(Check("cubic: egl_full beats lodl by more than 0.5", ok, detail))
        else:
            ok = egl.mean(key) >= lodl.mean(key) - lodl.sem(key)
            checks.append(Check(f"{domain}: egl_full within one SEM of lodl or better", ok, detail))
    return checks


def table4(trials=None, progress=None):
    domains = ("cubic", "cubic_hard", "webadv", "portfolio")
    result = ReproResult("table4_mse", run_cells([(d, "two_stage_mse", F.MSE) for d in domains],
                                                  trials, progress))
    result.checks = table4_checks(result.cells)
    return result


def table4_checks(cells):
    mse = {d: cells[(d, "two_stage_mse", F.MSE)].mean("val_mse")
           for d in ("cubic", "cubic_hard", "webadv", "portfolio")}
    ok = min(mse["cubic"], mse["cubic_hard"]) > max(mse["webadv"], mse["portfolio"])
    detail = ", ".join(f"{d}: {v:.4g}" for d, v in mse.items())
    return [Check("cubic validation MSE exceeds web-adv and portfolio", ok, detail)]


def counterexample():
    result = ReproResult("counterexample")
    closed = run_counterexample("fixed15", fit="closed_form")
    gd = run_counterexample("fixed15", fit="gradient_descent")
    uniform = run_counterexample("uniform", fit="closed_form", num=25, seed=0)
    result.extra = {"grid15_closed_form": closed.to_dict(), "grid15_gradient_descent": gd.to_dict(),
                    "uniform25_closed_form": uniform.to_dict()}
    regrets = set()
    for table in closed.regret_table.values():
        regrets.update(round(r, 12) for r in table["regret"])
    result.checks.append(Check("regret table values lie in {0, 0.45, 0.55}",
                               regrets <= {0.0, 0.45, 0.55}, f"distinct regrets {sorted(regrets)}"))
    rep = closed.reported
    result.checks.append(Check(
        "reported weights send the resource to A",
        abs(rep["y_hat_a"] - 0.602) <= 1e-3 and rep["chosen_individual"] == "A",
        f"y_hat_A = {rep['y_hat_a']:.4f}, chosen {rep['chosen_individual']}"))
    return result


def run_bundle(name, trials=None, families=None, progress=None):
    if name not in BUNDLES:
        raise ConfigError(f"unknown reproduction {name!r}; expected one of {BUNDLES}")
    fams = tuple(F.canonical_family(f) for f in families) if families else LEARNED
    if name == "table1_cubic":
        return table1("cubic", trials, fams, progress)
    if name == "table1_hard":
        return table1("cubic_hard", trials, fams, progress)
    if name == "table2_ablation":
        return table2(trials, fams, progress=progress)
    if name == "table4_mse":
        return table4(trials, progress)
    return counterexample()


# --- output ---------------------------------------------------------------------

CSV_COLUMNS = ("domain", "method", "family", "test_dq", "test_sem", "val_dq", "val_sem", "val_mse",
               "completed", "aborted", "step1_sampling", "step2_dataset", "step3_loss", "step4_train")


def render_text(result):
    parts = [f"reproduction: {result.name}"]
    rows = result.rows()
    if rows:
        parts.append(format_table(rows, ("domain", "method", "family", "test_dq", "test_sem",
                                         "val_dq", "val_sem", "val_mse")))
    if result.name == "counterexample":
        for key, rep in result.extra.items():
            parts.append(f"{key}: weights (blue, orange) = ({rep['weights'][0]:.4f}, "
                         f"{rep['weights'][1]:.4f}), y_hat_A = {rep['y_hat_a']:.4f}, "
                         f"chosen {rep['chosen_individual']}, consistent {rep['is_consistent']}")
        table = result.extra["grid15_closed_form"]["regret_table"]
        for colour, rec in table.items():
            pairs = " ".join(f"{a:+.2f}:{r:.2f}" for a, r in zip(rec["y_hat_a"], rec["regret"]))
            parts.append(f"{colour} (y_hat_A:regret) {pairs}")
    parts.append("checks:")
    parts.extend("  " + c.line() for c in result.checks)
    return "\n".join(parts) + "\n"


def write_outputs(result, out_dir):
    """Write ``<name>.csv``, ``<name>.txt`` and ``<name>.json`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, result.name)
    with open(base + ".csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in result.rows():
            writer.writerow(row)
    with open(base + ".txt", "w") as fh:
        fh.write(render_text(result))
    payload = {
        "name": result.name,
        "passed": result.passed,
        "checks": [c.__dict__ for c in result.checks],
        "cells": [json.loads(dumps_report(rep)) for rep in result.cells.values()],
        "extra": result.extra,
    }
    with open(base + ".json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return [base + ext for ext in (".csv", ".txt", ".json")]


def load_reports(path):
    """Experiment reports from a single-report JSON or a reproduction JSON."""
    with open(path) as fh:
        data = json.load(fh)
    if "cells" in data:
        return [ExperimentReport.from_dict(c) for c in data["cells"]]
    return [ExperimentReport.from_dict(data)]
