"""Command-line front end: fit, evaluate, simulate, stats, compare.

Every subcommand writes machine-readable output to its --out path (written
atomically, so errors never leave partial files) and a short human summary
to stdout. Exit status is 0 on success, nonzero with a one-line diagnostic
on stderr otherwise.
"""
from __future__ import annotations

import argparse
import datetime as dt
import os
import sys

import numpy as np

from . import evaluation, inference, models
from .data import PanelError, ReturnPanel, SplitSpec, load_panel, moments, save_panel
from .inference import TrainingConfig, TrainingDiverged
from .models import ModelError


def _write_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _parse_date(s: str) -> dt.date:
    try:
        return dt.date.fromisoformat(s)
    except ValueError:
        raise PanelError(f"bad date {s!r}; expected YYYY-MM-DD") from None


def cmd_fit(args) -> int:
    panel = load_panel(args.panel, mode=args.mode)
    spec = models.spec_from_name(args.model, n_x=len(panel.symbols))
    config = TrainingConfig.from_file(args.config) if args.config else TrainingConfig()
    if args.epochs is not None:
        config = config.with_overrides(epochs=args.epochs)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    result = inference.fit(spec, panel, config)
    models.save_model(args.out, spec, result.params)
    if args.curve:
        lines = [f"{i}\t{v!r}" for i, v in enumerate(result.curve)]
        _write_atomic(args.curve, "\n".join(lines) + "\n")
    print(
        f"fit {spec.name}: {config.epochs} epochs, best epoch {result.best_epoch} "
        f"with VLB {result.curve[result.best_epoch]:.3f} -> {args.out}"
    )
    return 0


def cmd_evaluate(args) -> int:
    panel = load_panel(args.panel)
    spec, params = models.load_model(args.modelfile)
    if spec.n_x != len(panel.symbols):
        raise ModelError(f"model has n_x={spec.n_x}, panel has {len(panel.symbols)} symbols")
    split = SplitSpec(_parse_date(args.split))
    tr, te = evaluation.evaluate_split(
        spec, params, panel, split, L=args.mc, seed=args.seed
    )
    rows = [tr, te]
    text = evaluation.rows_to_text(rows)
    if args.out:
        _write_atomic(args.out, text)
    _print_rows(rows)
    return 0


def cmd_simulate(args) -> int:
    spec, params = models.load_model(args.params)
    want = models.spec_from_name(args.model, n_x=spec.n_x)
    if want.family != spec.family or want.n_z != spec.n_z:
        raise ModelError(
            f"--model {args.model} does not match the model file ({spec.name})"
        )
    x_path, _ = models.simulate(spec, params, T=args.days, seed=args.seed)
    start = dt.date(2000, 1, 3)
    panel = ReturnPanel(
        dates=[start + dt.timedelta(days=k) for k in range(args.days)],
        symbols=[f"S{i:03d}" for i in range(spec.n_x)],
        returns=x_path,
    )
    save_panel(panel, args.out)
    print(f"simulated {args.days} days of {spec.name} ({spec.n_x} assets) -> {args.out}")
    return 0


def cmd_stats(args) -> int:
    panel = load_panel(args.panel)
    reports = moments(panel)
    header = "symbol,min,q1,q2,q3,max,m1,m2,m3,m4"
    lines = [header]
    for r in reports:
        lines.append(
            ",".join(
                [r.symbol]
                + [repr(v) for v in (r.min, r.q1, r.q2, r.q3, r.max, r.m1, r.m2, r.m3, r.m4)]
            )
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_atomic(args.out, text)
    print(header)
    for r in reports:
        print(
            f"{r.symbol}  min={r.min:.5g} q1={r.q1:.5g} q2={r.q2:.5g} q3={r.q3:.5g} "
            f"max={r.max:.5g} m1={r.m1:.5g} m2={r.m2:.5g} m3={r.m3:.5g} m4={r.m4:.5g}"
        )
    return 0


def cmd_compare(args) -> int:
    panel = load_panel(args.panel)
    fitted = []
    for path in args.modelfiles:
        spec, params = models.load_model(path)
        fitted.append((spec, params))
    split = SplitSpec(_parse_date(args.split))
    rows = evaluation.compare(fitted, panel, split, L=args.mc, seed=args.seed)
    text = evaluation.rows_to_text(rows)
    if args.out:
        _write_atomic(args.out, text)
    _print_rows(rows)
    return 0


def _print_rows(rows) -> None:
    print(f"{'model':<12} {'split':<6} {'mll/day':>10} {'vlb/day':>10} {'stderr':>8}")
    for r in rows:
        print(
            f"{r.model:<12} {r.split:<6} {r.mll_per_day:>10.4f} "
            f"{r.vlb_per_day:>10.4f} {r.mll_stderr:>8.4f}"
        )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="factorlab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a return panel")
    p.add_argument("panel")
    p.add_argument("--model", required=True, help="family name, e.g. APT(1) or M-NNFM(2)")
    p.add_argument("--config", help="JSON training config file")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--curve", help="optional per-epoch VLB curve file")
    p.add_argument("--mode", default="returns", choices=["returns", "prices"])
    p.add_argument("--epochs", type=int, help="override config epochs")
    p.add_argument("--seed", type=int, help="override config seed")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score a fitted model on a train/test split")
    p.add_argument("panel")
    p.add_argument("modelfile")
    p.add_argument("--split", required=True, help="dividing date, YYYY-MM-DD")
    p.add_argument("--mc", type=int, default=256, help="importance-sampling paths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional CSV output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="sample a synthetic panel from a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True, help="model file with the generator parameters")
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stats", help="per-series summary statistics of a panel")
    p.add_argument("panel")
    p.add_argument("--out", help="optional CSV output")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("compare", help="comparison table over several fitted models")
    p.add_argument("panel")
    p.add_argument("modelfiles", nargs="+")
    p.add_argument("--split", required=True)
    p.add_argument("--mc", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional CSV output")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ModelError, PanelError, TrainingDiverged, ValueError, OSError) as err:
        print(f"factorlab: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
