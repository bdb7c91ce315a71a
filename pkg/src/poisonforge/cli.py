"""Command-line entry point.

Subcommands: synth-data, ingest, attack, hyperopt, eval, matrix, export.
Every run ends with one machine-readable JSON summary line on stdout.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import data as data_mod
from . import experiments as exp
from . import hyperopt, models
from .linalg import RngStream


def _summary(event, **fields):
    print(json.dumps({"event": event, **fields}, sort_keys=True))


def _apply_overrides(cfg, args):
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["out_dir"] = args.out
    if getattr(args, "reps", None) is not None:
        updates["repetitions"] = args.reps
    return dataclasses.replace(cfg, **updates) if updates else cfg


def cmd_synth_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "gauss2d":
        train, val = data_mod.gen_synthetic(
            args.train_per_class, args.val_per_class, RngStream(args.seed)
        )
        data_mod.write_feature_file(out / "gauss2d_train.csv", train.X, train.y)
        data_mod.write_feature_file(out / "gauss2d_val.csv", val.X, val.y)
        files = ["gauss2d_train.csv", "gauss2d_val.csv"]
    elif args.kind == "images":
        paths = data_mod.make_idx_standin(
            out, seed=args.seed, n_pool_per_class=args.pool_per_class,
            n_test_per_class=args.test_per_class, noise=args.noise,
        )
        files = [p.name for p in paths]
    else:
        path = out / "features.bin"
        data_mod.make_feature_standin(
            path, seed=args.seed, n_pool_per_class=args.pool_per_class,
            n_test_per_class=args.test_per_class, m=args.features,
            separation=args.separation,
        )
        files = [path.name, path.name + ".json"]
    _summary("synth-data", kind=args.kind, out=str(out), files=files)
    return 0


def cmd_ingest(args):
    manifest = data_mod.DatasetManifest.from_json(Path(args.manifest).read_text())
    train, val, test = data_mod.build_datasets(manifest, seed=args.seed)
    _summary(
        "ingest",
        source=manifest.source,
        n_train=len(train), n_val=len(val), n_test=len(test),
        n_features=train.n_features,
        train_classes=train.class_counts,
        val_classes=val.class_counts,
        test_classes=test.class_counts,
        feature_min=float(train.X.min()), feature_max=float(train.X.max()),
    )
    return 0


def cmd_attack(args):
    cfg = _apply_overrides(exp.load_config(args.config), args)
    mode = _pick_mode(cfg, args.mode)
    rows, snapshots, hyper0 = exp.run_cell(cfg, args.rep, mode)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_groups = len(hyper0.values)
    table = exp.trace_table(snapshots)
    if table.size:
        exp.write_csv(
            out / f"trace_{cfg.name}_{mode.name}_rep{args.rep}.csv", "trace",
            exp.trace_columns(n_groups), table.tolist(),
            extra=f"groups={n_groups}",
        )
    exp.write_csv(
        out / f"attack_{cfg.name}_{mode.name}_rep{args.rep}.csv", "metrics",
        exp.metrics_columns(n_groups),
        [exp.metrics_row_values(r) for r in rows],
        extra=f"groups={n_groups}",
    )
    _summary(
        "attack", name=cfg.name, mode=mode.name, rep=args.rep,
        fractions=[s.fraction for s in snapshots],
        final_lambda=list(snapshots[-1].hyper.values) if snapshots
        else list(hyper0.values),
        out=str(out),
    )
    return 0


def cmd_hyperopt(args):
    cfg = _apply_overrides(exp.load_config(args.config), args)
    rep_seed = exp._rep_seed(cfg, args.rep)
    train, val, _ = data_mod.build_datasets(cfg.dataset, seed=rep_seed)
    spec = cfg.model_spec(train.n_features)
    atk = cfg.attack
    rng = RngStream(rep_seed)
    grid = hyperopt.LambdaGrid.default(seed=rep_seed)
    lam_clean, errors = hyperopt.cv_grid_lambda(
        spec, train, grid, atk.t_inner, atk.eta, rng=rng.child("cv")
    )
    hyper, _ = hyperopt.learn_lambda_rmd(
        spec, train, val, atk.lam_init, atk.t_lambda, atk.beta, atk.t_inner,
        atk.eta, lam_box=atk.lam_box, rng=rng.child("rmd"),
        patience=atk.patience, restarts=atk.restarts,
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "lambda_clean": lam_clean,
        "cv_grid": list(grid.values),
        "cv_errors": errors,
        "lambda_rmd": list(hyper.values),
    }
    (out / f"hyperopt_{cfg.name}_rep{args.rep}.json").write_text(
        json.dumps(payload, indent=2)
    )
    _summary("hyperopt", name=cfg.name, rep=args.rep,
             lambda_clean=lam_clean, lambda_rmd=list(hyper.values))
    return 0


def cmd_eval(args):
    cfg = _apply_overrides(exp.load_config(args.config), args)
    rep_seed = exp._rep_seed(cfg, args.rep)
    train, val, test = data_mod.build_datasets(cfg.dataset, seed=rep_seed)
    spec = cfg.model_spec(train.n_features)
    lam = np.full(models.n_lambda_groups(spec), args.lam)
    rng = RngStream(rep_seed).child("eval-cli")
    res = exp.evaluate(spec, train, test, lam, cfg.eval.eta_tr,
                       cfg.eval.batch, cfg.eval.epochs, rng)
    _summary(
        "eval", name=cfg.name, rep=args.rep, lam=args.lam,
        test_error=res.test_error, fpr=res.fpr, fnr=res.fnr,
        val_error=models.zero_one_error(spec, val, res.w),
    )
    return 0


def cmd_matrix(args):
    cfg = _apply_overrides(exp.load_config(args.config), args)
    if cfg.long_running and not args.long_running:
        raise exp.ConfigError(
            f"config {cfg.name} is a long-running profile; pass --long-running"
        )
    summary = exp.run_matrix(cfg, parallel=args.parallel)
    _summary("matrix", **summary)
    return 0 if summary["failures"] == 0 else 1


def cmd_export(args):
    cfg = _apply_overrides(exp.load_config(args.config), args)
    mode = _pick_mode(cfg, args.mode)
    rows, snapshots, _ = exp.run_cell(cfg, args.rep, mode)
    if not snapshots:
        raise exp.ConfigError("nothing to export: empty poison schedule")
    snap = snapshots[args.fraction_index]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.model_spec(snap.poisoned_train.n_features)
    ev_rng = RngStream(exp._rep_seed(cfg, args.rep)).child(
        f"eval-{mode.name}-{snap.n_poison}"
    )
    w = exp.sgd_train(spec, snap.poisoned_train, snap.hyper.values,
                      cfg.eval.eta_tr, cfg.eval.batch, cfg.eval.epochs, ev_rng)
    hist_path = out / f"hist_{cfg.name}_{mode.name}_rep{args.rep}.csv"
    exp.emit_histograms(spec, w, args.bins, hist_path)
    exported = [str(hist_path)]
    if args.height and args.width:
        all_xp = np.vstack([b.X_p for b in snap.batches])
        paths = exp.export_poison_images(
            all_xp, args.height, args.width, out / "poison_images",
            prefix=f"{cfg.name}_{mode.name}",
        )
        exported += [str(p) for p in paths]
    _summary("export", name=cfg.name, mode=mode.name,
             fraction=snap.fraction, files=len(exported))
    return 0


def _pick_mode(cfg, name):
    if name is None:
        return cfg.modes[0]
    for m in cfg.modes:
        if m.name == name:
            return m
    raise exp.ConfigError(f"mode {name!r} not in config "
                          f"({', '.join(m.name for m in cfg.modes)})")


def build_parser():
    p = argparse.ArgumentParser(prog="poisonforge")
    sub = p.add_subparsers(dest="command", required=True)

    sd = sub.add_parser("synth-data", help="generate synthetic datasets")
    sd.add_argument("--kind", choices=("gauss2d", "images", "features"),
                    default="gauss2d")
    sd.add_argument("--seed", type=int, default=0)
    sd.add_argument("--out", required=True)
    sd.add_argument("--train-per-class", type=int, default=16)
    sd.add_argument("--val-per-class", type=int, default=32)
    sd.add_argument("--pool-per-class", type=int, default=800)
    sd.add_argument("--test-per-class", type=int, default=977)
    sd.add_argument("--noise", type=float, default=0.18)
    sd.add_argument("--features", type=int, default=2048)
    sd.add_argument("--separation", type=float, default=4.0)
    sd.set_defaults(func=cmd_synth_data)

    ing = sub.add_parser("ingest", help="load a dataset manifest, print stats")
    ing.add_argument("--manifest", required=True)
    ing.add_argument("--seed", type=int, default=None)
    ing.set_defaults(func=cmd_ingest)

    atk = sub.add_parser("attack", help="run one attack cell")
    atk.add_argument("--config", required=True)
    atk.add_argument("--mode", default=None)
    atk.add_argument("--rep", type=int, default=0)
    atk.add_argument("--seed", type=int, default=None)
    atk.add_argument("--out", default=None)
    atk.set_defaults(func=cmd_attack)

    hyp = sub.add_parser("hyperopt", help="lambda via CV grid and via descent")
    hyp.add_argument("--config", required=True)
    hyp.add_argument("--rep", type=int, default=0)
    hyp.add_argument("--seed", type=int, default=None)
    hyp.add_argument("--out", default=None)
    hyp.set_defaults(func=cmd_hyperopt)

    ev = sub.add_parser("eval", help="clean-train evaluation at a fixed lambda")
    ev.add_argument("--config", required=True)
    ev.add_argument("--rep", type=int, default=0)
    ev.add_argument("--lam", type=float, default=-8.0)
    ev.add_argument("--seed", type=int, default=None)
    ev.set_defaults(func=cmd_eval)

    mtx = sub.add_parser("matrix", help="run the full experiment matrix")
    mtx.add_argument("--config", required=True)
    mtx.add_argument("--seed", type=int, default=None)
    mtx.add_argument("--out", default=None)
    mtx.add_argument("--parallel", type=int, default=1)
    mtx.add_argument("--reps", type=int, default=None)
    mtx.add_argument("--long-running", action="store_true")
    mtx.set_defaults(func=cmd_matrix)

    ex = sub.add_parser("export", help="histograms and poison-point images")
    ex.add_argument("--config", required=True)
    ex.add_argument("--mode", default=None)
    ex.add_argument("--rep", type=int, default=0)
    ex.add_argument("--fraction-index", type=int, default=-1)
    ex.add_argument("--bins", type=int, default=60)
    ex.add_argument("--height", type=int, default=0)
    ex.add_argument("--width", type=int, default=0)
    ex.add_argument("--seed", type=int, default=None)
    ex.add_argument("--out", default=None)
    ex.set_defaults(func=cmd_export)
    return p


def cli_main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except exp.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (data_mod.IdxFormatError, FileNotFoundError, OSError,
            json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())
