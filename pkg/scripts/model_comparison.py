#!/usr/bin/env python3
"""Synthetic model-comparison experiment.

Simulates a stochastic-volatility panel, fits a configurable slate of
families to the training window, and writes a train/test comparison table
plus the winning model's posterior factor path.

Example:
    python scripts/model_comparison.py --out results/ --epochs 200 \
        --models "APT(1)" "L-SVFM(1)" "NNFM(1)"
"""
import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from factorlab import evaluation, inference, models
from factorlab.data import SplitSpec, make_fixture, save_panel


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="comparison_out")
    ap.add_argument("--truth", default="L-SVFM(1)", help="generating family")
    ap.add_argument("--days", type=int, default=1000)
    ap.add_argument("--assets", type=int, default=10)
    ap.add_argument("--train-frac", type=float, default=0.75)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--mc", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument(
        "--models",
        nargs="+",
        default=["APT(1)", "L-SVFM(1)", "SR-SVFM(1)", "NNFM(1)", "M-NNFM(1)"],
    )
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    fx = make_fixture(args.truth, T=args.days, n_x=args.assets, seed=args.seed)
    save_panel(fx.panel, os.path.join(args.out, "panel.csv"))
    cut = int(args.days * args.train_frac)
    split = SplitSpec(fx.panel.dates[cut])
    print(f"truth={args.truth}  T={args.days}  n_x={args.assets}  "
          f"train/test = {cut}/{args.days - cut}")

    fitted = []
    for name in args.models:
        spec = models.spec_from_name(name, args.assets)
        cfg = inference.TrainingConfig(epochs=args.epochs, seed=args.seed)
        t0 = time.time()
        res = inference.fit(spec, fx.panel.returns[:cut], cfg)
        print(f"  fit {name:10s} best epoch {res.best_epoch:4d} "
              f"VLB {max(res.curve):12.2f}  ({time.time() - t0:.0f}s)")
        models.save_model(os.path.join(args.out, f"{name}.json"), spec, res.params)
        fitted.append((spec, res.params))

    rows = evaluation.compare(fitted, fx.panel, split, L=args.mc, seed=args.seed)
    table = evaluation.rows_to_text(rows)
    with open(os.path.join(args.out, "comparison.csv"), "w") as fh:
        fh.write(table)

    print(f"\n{'model':<12} {'split':<6} {'mll/day':>10} {'vlb/day':>10} {'stderr':>8}")
    best = None
    for r in rows:
        print(f"{r.model:<12} {r.split:<6} {r.mll_per_day:>10.4f} "
              f"{r.vlb_per_day:>10.4f} {r.mll_stderr:>8.4f}")
        if r.split == "test" and (best is None or r.mll_per_day > best[1]):
            best = (r.model, r.mll_per_day)

    winner_spec, winner_params = next(
        (s, p) for s, p in fitted if s.name == best[0]
    )
    fp = evaluation.factor_path(winner_spec, winner_params, fx.panel)
    with open(os.path.join(args.out, "factor_path.csv"), "w") as fh:
        fh.write(evaluation.factor_path_to_text(fp))
    print(f"\nbest test MLL/day: {best[0]} ({best[1]:.4f}); "
          f"factor path -> {args.out}/factor_path.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
