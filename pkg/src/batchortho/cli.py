"""Command line entry point: gradcheck, whiten, train, compare.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 data error, 4 numerical abort.
"""
import argparse
import csv
import json
import os
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import load_idx
from .errors import (
    BatchOrthoError,
    IdxFormatError,
    SpecError,
    TrainingDivergedError,
)
from .gradcheck import check_layer, reports_to_csv
from .layers.compose import LayerParams, LayerState, layer_forward
from .layers.stats import batch_cov, center
from .nn.checkpoint import load_tensors, save_net
from .nn.train import METRIC_FIELDS, AlphaSchedule, SgdSchedule, TrainConfig, train
from .plots import plot_metrics
from .spec import parse_spec

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

OUT_ENV = "BATCHORTHO_OUT"
DATA_ENV = "BATCHORTHO_DATA"
IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
AUDIT_SPECS = ("BN", "BN->W", "BN->W->G", "ZCA", "ZCAM", "ZCAE", "ZCAcorr",
               "ZCAcorr->W", "ZCAcorr->W->G", "LDL", "LDLcorr", "PLDLP")


class ConfigError(Exception):
    pass


def _spec(text, args):
    try:
        return parse_spec(text).with_constants(args.eps, args.k, args.c)
    except SpecError as exc:
        raise ConfigError(f"bad layer spec {text!r}: {exc}") from exc


def _seeds(text):
    """``"7"`` -> [7]; ``"0-19"`` -> [0..19]; ``"1,4,9"`` -> [1, 4, 9]."""
    out = []
    for part in text.split(","):
        m = re.fullmatch(r"\s*(\d+)\s*(?:-\s*(\d+)\s*)?", part)
        if not m:
            raise ConfigError(f"bad seed list {text!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) else lo
        out.extend(range(lo, hi + 1))
    return out


def _out_dir(args, name):
    root = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / name
    root.mkdir(parents=True, exist_ok=True)
    return root


def _write_config(out, args, **extra):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _add_constants(p):
    p.add_argument("--eps", type=float, help="override the layer's eps")
    p.add_argument("--k", type=float, help="override the eigen-gap clip K")
    p.add_argument("--c", type=float, help="override the max-mode factor c")


def cmd_gradcheck(args):
    specs = [_spec(s, args) for s in (args.spec or AUDIT_SPECS)]
    seeds = _seeds(args.seeds)
    reports = []
    for spec in specs:
        for n in args.n:
            for m in args.m:
                for seed in seeds:
                    reports.extend(check_layer(spec, n, m, seed, tol=args.tol,
                                               clamped=args.clamped))
    text = reports_to_csv(reports)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    failed = [r for r in reports if not r.passed]
    worst = max(reports, key=lambda r: r.max_rel_err)
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed; "
          f"worst {worst.max_rel_err:.3e} ({worst.spec} {worst.group} N={worst.n} "
          f"M={worst.m} seed={worst.seed})", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_CHECK


def read_matrix(path):
    """N x M matrix from a CSV (one row per channel) or a checkpoint container."""
    path = Path(path)
    if path.suffix == ".zip":
        tensors, _ = load_tensors(path)
        if "X" in tensors:
            return tensors["X"]
        if len(tensors) == 1:
            return next(iter(tensors.values()))
        raise ConfigError(f"{path}: expected a tensor named 'X'")
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_matrix(path, a):
    np.savetxt(path, a, delimiter=",", fmt="%.17g")


def whiten_matrix(x, spec):
    """Whiten one batch; rank deficiency without a ridge is absorbed by clamping.

    Returns ``(z, cov_z, stats)``.
    """
    xc, _ = center(x)
    lam = np.linalg.eigvalsh(batch_cov(xc))
    tiny = x.shape[0] * np.finfo(float).eps * max(float(lam.max()), 1e-300)
    clamped = int(np.sum(lam < tiny))
    used = spec
    if clamped and spec.eps < tiny:
        used = replace(spec, eps=tiny)
    params = LayerParams.init(used, x.shape[0])
    z, _ = layer_forward(used, x, params, LayerState(), "train")
    cov = batch_cov(center(z)[0])
    off = cov - np.diag(np.diag(cov))
    stats = {"spec": spec.name, "N": x.shape[0], "M": x.shape[1],
             "max_offdiag": float(np.abs(off).max()) if x.shape[0] > 1 else 0.0,
             "clamped": clamped, "eps_used": used.eps}
    return z, cov, stats


def cmd_whiten(args):
    spec = _spec(args.spec, args)
    try:
        x = read_matrix(args.input)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read {args.input}: {exc}", file=sys.stderr)
        return EXIT_DATA
    z, cov, stats = whiten_matrix(x, spec)
    out = _out_dir(args, "whiten")
    _write_config(out, args)
    write_matrix(out / "Z.csv", z)
    write_matrix(out / "cov.csv", cov)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def _dataset_paths(args):
    base = Path(args.data_dir or os.environ.get(DATA_ENV, "data"))
    paths = {}
    for key, default in IDX_NAMES.items():
        given = getattr(args, key)
        paths[key] = Path(given) if given else base / default
    return paths


def _load_data(args):
    p = _dataset_paths(args)
    tr = load_idx(p["train_images"], p["train_labels"])
    te = load_idx(p["test_images"], p["test_labels"])
    if args.subset:
        n_train, n_test = args.subset
        tr, te = tr.subset(n_train), te.subset(n_test)
    return tr, te


def _train_config(args, spec_text):
    sched = SgdSchedule(rules=args.dataset)
    overrides = {k: v for k, v in (("lr", args.lr), ("momentum", args.momentum),
                                    ("batch", args.batch), ("plateau_patience", args.patience))
                 if v is not None}
    sched = replace(sched, **overrides)
    spec = _spec(spec_text, args)
    return TrainConfig(db=args.dataset, spec=spec.name, epochs=args.epochs, seed=args.seed,
                       augment=args.augment, schedule=sched,
                       alpha=AlphaSchedule.parse(args.alpha_schedule))


def _run_one(config, tr, te, out, log):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    result = train(config, tr, te, log=log)
    (out / "metrics.csv").write_text(result.metrics_csv())
    plot_metrics([out / "metrics.csv"], out / "curves.png", labels=[config.spec])
    save_net(out / "checkpoint.zip", result.net, config.spec)
    return result


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_train(args):
    config = _train_config(args, args.spec)
    tr, te = _load_data(args)
    out = _out_dir(args, "train")
    result = _run_one(config, tr, te, out, _log)
    final = result.final()
    print(f"final val error {final['error_rate']:.4f} loss {final['loss']:.4f} -> {out}")
    return EXIT_OK


def _slug(text):
    return re.sub(r"[^A-Za-z0-9.]+", "_", text).strip("_")


RANK_FIELDS = ("rank", "spec", "val_error", "val_loss", "train_loss", "epochs", "status")


def cmd_compare(args):
    if len(args.spec) < 2:
        raise ConfigError("compare needs at least two --spec values")
    configs = [_train_config(args, s) for s in args.spec]
    tr, te = _load_data(args)
    out = _out_dir(args, "compare")
    _write_config(out, args)
    rows, combined, csvs, labels = [], [], [], []
    for i, config in enumerate(configs):
        run_dir = out / f"{i:02d}_{_slug(config.spec)}"
        _log(f"[{i + 1}/{len(configs)}] {config.spec}")
        try:
            result = _run_one(config, tr, te, run_dir, _log)
        except (BatchOrthoError, FloatingPointError) as exc:
            rows.append({"spec": config.spec, "val_error": "", "val_loss": "",
                         "train_loss": "", "epochs": "", "status": f"failed: {exc}"})
            continue
        csvs.append(run_dir / "metrics.csv")
        labels.append(config.spec)
        for r in result.history:
            combined.append({"spec": config.spec, **r})
        v, t = result.final("val"), result.final("train")
        rows.append({"spec": config.spec, "val_error": v["error_rate"], "val_loss": v["loss"],
                     "train_loss": t["loss"], "epochs": v["epoch"], "status": "ok"})
    ok = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: r["val_error"])
    ranked = ok + [r for r in rows if r["status"] != "ok"]
    with open(out / "ranking.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RANK_FIELDS, lineterminator="\n")
        w.writeheader()
        for k, r in enumerate(ranked, start=1):
            w.writerow({"rank": k, **r})
    if combined:
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=("spec",) + METRIC_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()}
                        for r in combined)
        plot_metrics(csvs, out / "curves.png", labels=labels)
    print(f"{'rank':>4}  {'spec':<28} {'val err':>8} {'val loss':>9}  status")
    for k, r in enumerate(ranked, start=1):
        err = f"{100 * r['val_error']:.2f}%" if r["status"] == "ok" else "-"
        loss = f"{r['val_loss']:.4f}" if r["status"] == "ok" else "-"
        print(f"{k:>4}  {r['spec']:<28} {err:>8} {loss:>9}  {r['status']}")
    return EXIT_OK if ok else EXIT_NUMERIC


def _subset(text):
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("subset must be TRAIN,TEST counts") from exc
    return a, b


def _add_training(p):
    p.add_argument("--dataset", choices=("mnist", "svhn"), default="mnist")
    p.add_argument("--data-dir", help=f"directory with the four IDX files (default ${DATA_ENV})")
    p.add_argument("--train-images")
    p.add_argument("--train-labels")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--subset", type=_subset, help="TRAIN,TEST sample counts, e.g. 10000,2000")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", action="store_true", help="random zoom/rotation of training images")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--patience", type=int, help="epochs without val-loss improvement")
    p.add_argument("--alpha-schedule", default="0.9:0.99",
                   help="running-covariance factor, 'a' or 'start:end' ramped over epochs")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    _add_constants(p)


def build_parser():
    parser = argparse.ArgumentParser(prog="batchortho", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference audit of layer gradients")
    p.add_argument("--spec", action="append", help="layer spec (repeatable; default: all)")
    p.add_argument("--n", type=int, nargs="+", default=[3, 5, 8])
    p.add_argument("--m", type=int, nargs="+", default=[16, 32])
    p.add_argument("--seeds", default="0-19", help="e.g. 0-19 or 1,4,9")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--clamped", action="store_true", help="force eigenvalue clamping (ZCAM/ZCAE)")
    p.add_argument("--out", help="CSV path (default stdout)")
    _add_constants(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("whiten", help="whiten an N x M matrix file")
    p.add_argument("input", help="CSV (one row per channel) or checkpoint .zip")
    p.add_argument("--spec", default="ZCA(0,inf)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/whiten)")
    _add_constants(p)
    p.set_defaults(func=cmd_whiten)

    p = sub.add_parser("train", help="train the reference net")
    p.add_argument("--spec", default="BN")
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="train several layer specs and rank them")
    p.add_argument("--spec", action="append", default=[], help="layer spec (give two or more)")
    _add_training(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdxFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        if exc.__cause__ is not None:
            print(f"  cause: {exc.__cause__}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
