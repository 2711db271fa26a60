"""Desk-scale ablation grid plus manual-weight sweep; writes per-seed and median MAEs.

    python3 scripts/run_ablation.py --out results/ablation
"""
import argparse
import json
import logging
from pathlib import Path

from ccmd.experiments import GRID, SWEEP_WEIGHTS, GridConfig, run_grid, sweep_rows, write_sweep_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/ablation"))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--n-train", type=int, default=5000)
    ap.add_argument("--n-val", type=int, default=1000)
    ap.add_argument("--extra", default="naive_last", help="comma-separated extra variants")
    ap.add_argument("--no-sweep", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = GridConfig(n_train=args.n_train, n_val=args.n_val, seeds=tuple(range(args.seeds)), epochs=args.epochs)
    variants = GRID + tuple(v for v in args.extra.split(",") if v)
    weights = () if args.no_sweep else SWEEP_WEIGHTS
    res = run_grid(cfg, variants, weights)

    args.out.mkdir(parents=True, exist_ok=True)
    res.to_csv(args.out / "grid.csv")
    summary = {"config": cfg.to_dict(), "medians": res.medians(),
               "grid_minutes": res.seconds_for(["teacher", *GRID]) / 60, "total_minutes": res.seconds / 60}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    if weights:
        write_sweep_csv(sweep_rows(res, weights), args.out / "sweep.csv")
    for name, v in res.medians().items():
        print(f"{name:>12} {v:.4f}")


if __name__ == "__main__":
    main()
