#!/usr/bin/env python3
"""Overfit 8 fixed phantom pairs and report the final reconstruction loss."""
import argparse
import logging

from cslicegen.experiments import overfit_sanity

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--steps", type=int, default=2000)
ap.add_argument("--beta", type=float, default=0.01)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")
r = overfit_sanity(steps=args.steps, beta=args.beta, seed=args.seed)
print(f"final l_recon {r['final_l_recon']:.4f} after {args.steps} steps ({r['seconds']:.0f} s)")
