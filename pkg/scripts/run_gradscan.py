"""Virtual-token gradient growth with molecule size, summed and coordinated atom loss.

    python3 scripts/run_gradscan.py --out results/gradscan
"""
import argparse
from pathlib import Path

from ccmd.gradscan import DEFAULT_N, scaling_scan, write_scan

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--out", type=Path, default=Path("results/gradscan"))
ap.add_argument("--seeds", type=int, default=5)
ap.add_argument("--molecules", type=int, default=20)
args = ap.parse_args()

args.out.mkdir(parents=True, exist_ok=True)
results = []
for weighted in (False, True):
    for arch in ("transformer", "gin"):
        r = scaling_scan(arch, DEFAULT_N, args.seeds, args.molecules, weighted=weighted)
        results.append(r)
        per_layer = ", ".join(f"L{l} {v['slope']:+.2f}" for l, v in r.per_layer.items())
        tag = "coordinated" if weighted else "summed"
        print(f"{arch:>11} {tag:>11}: slope {r.fit['slope']:+.3f} R2 {r.fit['r2']:.3f}  ({per_layer})")
write_scan(results, args.out / "scan.csv", args.out / "fits.json")
