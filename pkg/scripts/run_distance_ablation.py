#!/usr/bin/env python3
"""Fixed-distance vs fixed-range pairing: held-out SSIM averaged over seeds."""
import argparse
import logging

from cslicegen.experiments import distance_direction

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--steps", type=int, default=300)
ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")
r = distance_direction(seeds=tuple(args.seeds), steps=args.steps)
for mode in ("fixed_distance", "fixed_range"):
    for d, v in r[mode].items():
        print(f"{mode:15s} {d:5.0f} mm  SSIM {v:.4f}")
print(f"{r['seconds']:.0f} s")
