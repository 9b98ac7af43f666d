"""``egl-lab`` command line.

Exit codes: 0 success, 1 other failure, 2 configuration or input error,
3 solver error, 4 a reproduction missed its acceptance thresholds.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import datagen
from .errors import CapabilityError, ConfigError, EglLabError, InputError, SolverError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER, EXIT_THRESHOLD = 0, 1, 2, 3, 4

logger = logging.getLogger("egl_lab")


def _model_spec(args):
    from .harness import ModelSpec

    return ModelSpec(kind=args.model, hidden=args.hidden, hidden_layers=args.hidden_layers)


def _add_model_args(p):
    p.add_argument("--model", choices=("linear", "mlp"), default="mlp")
    p.add_argument("--hidden", type=int, default=500)
    p.add_argument("--hidden-layers", type=int, default=1)


def _factory(args, dataset):
    inst = dataset.instances[0]
    spec = _model_spec(args)
    return lambda seed: spec.build(inst.features.shape[1], inst.outputs_per_group, seed)


def _fit_split(dataset):
    return dataset.split("train") + dataset.split("validation")


def cmd_generate(args):
    fractions = tuple(float(f) for f in args.fractions.split(","))
    spec = datagen.DatasetSpec(domain=args.domain, num_instances=args.instances, seed=args.seed,
                               n=args.n, m=args.m, k=args.k, d=args.d, history_len=args.history_len,
                               fractions=fractions)
    ds = datagen.generate(spec)
    base = datagen.save_dataset(ds, args.out, args.name or f"{args.domain}-s{args.seed}")
    print(base)
    return EXIT_OK


def cmd_sample(args):
    from .sampling import SamplerConfig, build_loss_dataset, sample_candidates

    ds = datagen.load_dataset(args.data)
    cfg = SamplerConfig(kind=args.sampler, k=args.k, sigma=args.sigma, num_models=args.num_models,
                        lr=args.lr, optimizer=args.optimizer, batch_size=args.batch_size,
                        total_updates=args.updates, include_step0=args.include_step0, seed=args.seed)
    instances = _fit_split(ds)
    samples = sample_candidates(instances, cfg, train_instances=ds.split("train"),
                                model_factory=_factory(args, ds))
    problem = datagen.make_problem(ds, lam=args.lam)
    header = {"dataset": args.data, "sampler": cfg.to_dict(), "problem": problem.metadata()}
    lds = build_loss_dataset(samples, instances, problem, header=header)
    print(lds.save(args.out))
    return EXIT_OK


def cmd_fit_loss(args):
    from .losses import families as F
    from .losses.fbp import FbpConfig, fit_fbp, label_features
    from .losses.lodl import FitConfig, fit_lodl_batch
    from .losses.storage import save_fbp, save_instance_losses
    from .sampling import LossDataset

    ds = datagen.load_dataset(args.data)
    lds = LossDataset.load(args.samples)
    family = F.canonical_family(args.family)
    if args.method == "lodl":
        instances = [inst for inst in _fit_split(ds) if inst.instance_id in lds.samples]
        resid, regret, mask = lds.arrays(instances)
        cfg = FitConfig(lr=args.lr, steps=args.steps, w_min=args.w_min, seed=args.seed)
        raw, fit_mse = fit_lodl_batch(resid, regret, mask, family, cfg)
        losses = F.InstanceLosses(family, raw, args.w_min, dim=instances[0].dim)
        path = save_instance_losses(args.out, losses, [i.instance_id for i in instances])
        logger.info("mean fit MSE %.6g", float(np.mean(fit_mse)))
    else:
        def arrays(insts):
            resid, regret, mask = lds.arrays(insts)
            return np.stack([label_features(i) for i in insts]), resid, regret, mask

        train_set, val_set = ds.split("train"), ds.split("validation")
        cfg = FbpConfig(hidden=args.fbp_hidden, layers=args.fbp_layers, lr=args.lr,
                        epochs=args.epochs, w_min=args.w_min, seed=args.seed)
        net, _ = fit_fbp(arrays(train_set), family, cfg, arrays(val_set) if val_set else None)
        path = save_fbp(args.out, net, ds.instances[0].dim)
    print(path)
    return EXIT_OK


def cmd_train(args):
    from .losses.storage import load_loss, losses_for
    from .nn import Batch, MseLoss, TrainConfig, save_checkpoint, train

    ds = datagen.load_dataset(args.data)
    train_set, val_set = ds.split("train"), ds.split("validation")
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, patience=args.patience,
                      batch_size=args.batch_size, seed=args.seed)
    if args.loss:
        loaded = load_loss(args.loss)
        loss_fn = losses_for(loaded, train_set)
        val_fn = losses_for(loaded, val_set) if val_set else None
    else:
        loss_fn, val_fn = MseLoss(), None
    model = _factory(args, ds)(args.seed)
    val_b = Batch.from_instances(val_set) if val_set else None
    model, hist = train(model, Batch.from_instances(train_set), loss_fn, cfg, val_batch=val_b,
                        val_loss_fn=val_fn)
    save_checkpoint(model, args.out)
    logger.info("trained for %d updates", hist.updates)
    print(args.out)
    return EXIT_OK


def cmd_evaluate(args):
    from .core import mean_normalized_dq
    from .nn import Batch, load_checkpoint, predict_batch

    ds = datagen.load_dataset(args.data)
    problem = datagen.make_problem(ds, lam=args.lam)
    instances = ds.split(args.split)
    if not instances:
        raise InputError(f"split {args.split!r} is empty")
    model = load_checkpoint(args.model)
    preds = predict_batch(model, Batch.from_instances(instances).features)
    lookup = {inst.instance_id: preds[i] for i, inst in enumerate(instances)}
    score = mean_normalized_dq(lambda _i: problem, instances, lambda i: lookup[i.instance_id],
                               seed=args.seed, num_baseline_draws=args.draws)
    print(json.dumps({"split": args.split, "mean_normalized_dq": score.mean,
                      "instances": len(score.values), "skipped": score.skipped}))
    return EXIT_OK


def cmd_experiment(args):
    from .harness import dumps_report, load_config, run_experiment

    cfg = load_config(args.config)
    if args.trials is not None:
        cfg = cfg.with_updates(num_trials=args.trials, seeds=list(range(args.trials)))
    report = run_experiment(cfg, progress=_progress)
    text = dumps_report(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    s = report.summary
    print(f"{cfg.name}: test DQ {s['test_dq']['mean']:.4f} +/- {s['test_dq']['sem']:.4f}, "
          f"validation DQ {s['val_dq']['mean']:.4f} +/- {s['val_dq']['sem']:.4f}, "
          f"{s['completed']} of {len(report.trials)} trials completed")
    if report.failed:
        errors = [t.error for t in report.trials if t.error]
        print("experiment failed: " + "; ".join(errors[:3]), file=sys.stderr)
        if any(e.startswith("SolverError") for e in errors):
            return EXIT_SOLVER
        return EXIT_FAIL
    return EXIT_OK


def cmd_repro(args):
    from .repro import render_text, run_bundle, write_outputs

    families = args.families.split(",") if args.families else None
    result = run_bundle(args.name, trials=args.trials, families=families, progress=_progress)
    paths = write_outputs(result, args.out)
    sys.stdout.write(render_text(result))
    for p in paths:
        print(p)
    return EXIT_OK if result.passed else EXIT_THRESHOLD


def cmd_timing(args):
    from .harness import STEPS, format_table, step_timing_summary
    from .repro import load_reports

    rows = step_timing_summary(load_reports(args.report))
    print(format_table(rows, ("name", "method", "family") + STEPS + ("total",)))
    return EXIT_OK


def _progress(config, result):
    if result.error:
        logger.warning("%s seed %s aborted: %s", config.name, result.seed, result.error)
    else:
        logger.info("%s seed %s: test DQ %.4f", config.name, result.seed, result.test_dq)


def build_parser():
    parser = argparse.ArgumentParser(prog="egl-lab", description="Learned decision losses toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--domain", required=True, choices=datagen.DOMAINS)
    p.add_argument("--instances", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name")
    p.add_argument("--n", type=int, default=None, help="resources (cubic) or users (web-adv)")
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--d", type=int, default=50)
    p.add_argument("--history-len", type=int, default=10)
    p.add_argument("--fractions", default="0.7,0.15,0.15")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sample", help="draw candidate predictions and score their regrets")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sampler", choices=("gaussian", "model_based"), default="gaussian")
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--num-models", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--updates", type=int, default=2400)
    p.add_argument("--include-step0", action="store_true")
    p.add_argument("--lam", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    _add_model_args(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fit-loss", help="fit learned losses to scored samples")
    p.add_argument("--data", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--family", default="directed_weighted_mse")
    p.add_argument("--method", choices=("lodl", "fbp"), default="lodl")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--w-min", type=float, default=0.01)
    p.add_argument("--fbp-hidden", type=int, default=64)
    p.add_argument("--fbp-layers", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_loss)

    p = sub.add_parser("train", help="train a predictive model on MSE or a fitted loss")
    p.add_argument("--data", required=True)
    p.add_argument("--loss", help="fitted loss file; MSE when omitted")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    _add_model_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="mean normalized DQ of a trained model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--lam", type=float, default=0.001)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run a configured multi-seed experiment")
    esub = p.add_subparsers(dest="action", required=True)
    run = esub.add_parser("run")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="report JSON path")
    run.add_argument("--trials", type=int, default=None)
    run.set_defaults(func=cmd_experiment)

    p = sub.add_parser("repro", help="run a reproduction bundle")
    p.add_argument("name")
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--families", default=None, help="comma-separated loss families")
    p.set_defaults(func=cmd_repro)

    p = sub.add_parser("timing", help="per-step wall time table of a report")
    p.add_argument("report")
    p.set_defaults(func=cmd_timing)
    return parser


def _apply_defaults(args):
    if args.command == "generate":
        cubic = args.domain in ("cubic", "cubic_hard")
        if args.n is None:
            args.n = 50 if cubic else 10
        if args.k is None:
            args.k = 1 if cubic else 2
    if args.command == "fit-loss" and args.lr is None:
        args.lr = 0.05 if args.method == "lodl" else 1e-3


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    _apply_defaults(args)
    try:
        return args.func(args)
    except (ConfigError, InputError, CapabilityError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as err:
        print(f"solver error: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except (EglLabError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
