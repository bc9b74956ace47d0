"""Command-line interface: fit, predict, outliers and simulate."""

from __future__ import annotations

import argparse
import math
import os
import sys
import warnings

import numpy as np

from . import simlab
from .estimator import DEFAULT_ALPHA_GRID, DEFAULT_LAMBDA_GRID, EnetLTSConfig, fit_enetlts
from .fileio import StoredModel, atomic_write_text, csv_text, load_features, load_training, read_model, write_model

THREADS_ENV = "ENETLTS_THREADS"


def parse_grid(text: str) -> tuple:
    """Comma-separated values, or ``lo:hi:step`` for an inclusive range."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"range {text!r} must look like lo:hi:step")
        lo, hi, step = (float(v) for v in parts)
        if not step > 0:
            raise argparse.ArgumentTypeError("range step must be positive")
        m = int(math.floor((hi - lo) / step + 1e-9))
        return tuple(round(lo + k * step, 12) for k in range(m + 1))
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse grid {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def thread_budget(flag) -> int:
    """Worker count: the flag wins over the environment, default 1."""
    if flag is not None:
        n = flag
    else:
        env = os.environ.get(THREADS_ENV, "").strip()
        try:
            n = int(env) if env else 1
        except ValueError:
            raise SystemExit(f"error: {THREADS_ENV}={env!r} is not an integer")
    if n < 1:
        raise SystemExit("error: thread budget must be at least 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="enetlts", description="Robust sparse multinomial regression (enet-LTS).")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a labelled CSV")
    f.add_argument("--data", required=True)
    f.add_argument("--label", required=True, help="name of the class label column")
    f.add_argument("--alpha-grid", type=parse_grid, default=DEFAULT_ALPHA_GRID)
    f.add_argument("--lambda-grid", type=parse_grid, default=DEFAULT_LAMBDA_GRID)
    f.add_argument("--h-frac", type=float, default=0.75)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--threads", type=int, default=None)
    f.add_argument("--n-starts", type=int, default=500, help="elemental random starts")
    f.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="class predictions and probabilities")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--raw", action="store_true", help="use the raw (not reweighted) estimator")
    p.add_argument("--out", required=True)

    o = sub.add_parser("outliers", help="per-row outlyingness diagnostics")
    o.add_argument("--model", required=True)
    o.add_argument("--data", required=True)
    o.add_argument("--sort", action="store_true", help="most outlying rows first")
    o.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="replication study on the simulation settings")
    s.add_argument("--settings", type=_int_list, default=[1, 2, 3, 4, 5])
    s.add_argument("--eps", type=_float_list, default=[0.0, 0.1, 0.2])
    s.add_argument("--scenario", type=_str_list, default=["info"])
    s.add_argument("--reps", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--methods", type=_str_list, default=list(simlab.METHODS))
    s.add_argument("--alpha-grid", type=parse_grid, default=DEFAULT_ALPHA_GRID)
    s.add_argument("--lambda-grid", type=parse_grid, default=DEFAULT_LAMBDA_GRID)
    s.add_argument("--n-starts", type=int, default=500)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--out", required=True, help="output directory")
    return ap


def cmd_fit(args) -> int:
    data, features, classes = load_training(args.data, args.label)
    config = EnetLTSConfig(
        alpha_grid=args.alpha_grid,
        lambda_grid=args.lambda_grid,
        h_fraction=args.h_frac,
        seed=args.seed,
        n_starts=args.n_starts,
        n_jobs=thread_budget(args.threads),
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_enetlts(data, config)
    model = StoredModel.from_fit(fit, classes, features, args.label)
    write_model(args.out, model)
    nz = (np.abs(fit.coef[1:]) > 0).sum(axis=0)
    train_mcr = float(np.mean(fit.predict(data.X) != data.labels))
    print(f"alpha_opt={fit.alpha_opt!r} lambda_opt={fit.lambda_opt!r} lambda_upd={fit.lambda_upd!r}")
    print("nonzero slopes per class: " + ", ".join(f"{c}={int(k)}" for c, k in zip(classes, nz)))
    print(f"n_w={fit.n_w} flagged_outliers={data.n - fit.n_w} training_mcr={train_mcr!r}")
    for note in fit.notes:
        print(f"note: {note}")
    return 0


def cmd_predict(args) -> int:
    model = read_model(args.model)
    X, _ = load_features(args.data, model.features, model.label_column)
    P = model.predict_proba(X, raw=args.raw)
    pred = np.argmax(P, axis=1)
    header = ["row", "predicted"] + [f"prob_{c}" for c in model.classes]
    rows = [[i + 1, model.classes[pred[i]]] + list(P[i]) for i in range(X.shape[0])]
    atomic_write_text(args.out, csv_text(header, rows))
    return 0


def cmd_outliers(args) -> int:
    model = read_model(args.model)
    X, labels = load_features(args.data, model.features, model.label_column, need_labels=True, classes=model.classes)
    rd, rds, w, dev = model.outlyingness(X, labels)
    order = np.arange(X.shape[0])
    if args.sort:
        order = np.lexsort((order, -rds))
    header = ["row", "group", "rd", "rd_scaled", "weight", "deviance"]
    rows = [[i + 1, model.classes[labels[i] - 1], rd[i], rds[i], int(w[i]), dev[i]] for i in order]
    atomic_write_text(args.out, csv_text(header, rows))
    return 0


def cmd_simulate(args) -> int:
    for s in args.settings:
        simlab.make_setting(s)
    for sc in args.scenario:
        if sc not in simlab.SCENARIOS:
            raise ValueError(f"unknown scenario {sc!r}; choose from {simlab.SCENARIOS}")
    config = EnetLTSConfig(alpha_grid=args.alpha_grid, lambda_grid=args.lambda_grid, n_starts=args.n_starts)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = simlab.run_study(
            args.settings, args.eps, args.scenario, args.reps, args.seed,
            methods=tuple(args.methods), config=config, n_jobs=thread_budget(args.threads),
        )
    os.makedirs(args.out, exist_ok=True)
    header = list(simlab.RESULT_HEADER) + ["error"]
    atomic_write_text(os.path.join(args.out, "results.csv"), csv_text(header, [[r[h] for h in header] for r in rows]))
    agg = simlab.aggregate(rows)
    aheader = ["setting", "epsilon", "scenario", "method", "n_reps"]
    aheader += [f"{m}_{s}" for m in simlab.METRICS for s in ("mean", "se")]
    atomic_write_text(os.path.join(args.out, "aggregate.csv"), csv_text(aheader, [[r[h] for h in aheader] for r in agg]))
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} result rows, {len(agg)} aggregate rows, {failed} failed")
    return 0


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "outliers": cmd_outliers, "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
