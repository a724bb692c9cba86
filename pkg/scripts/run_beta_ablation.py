#!/usr/bin/env python3
"""Train at several adversarial weights and compare the sharpness of generated slices."""
import argparse
import logging

from cslicegen.experiments import beta_direction

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--steps", type=int, default=700)
ap.add_argument("--betas", type=float, nargs="+", default=[0.0, 0.01])
ap.add_argument("--subjects", type=int, default=50)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")
r = beta_direction(n_train=args.subjects, steps=args.steps, betas=tuple(args.betas), seed=args.seed)
print(f"target slices: mean gradient magnitude {r['target_grad']:.5f}")
for beta, g in r["grad"].items():
    print(f"beta={beta:g}: mean gradient magnitude {g:.5f}")
