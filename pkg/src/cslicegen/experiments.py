"""Desk-scale experiment protocols shared by ``scripts/`` and the acceptance suite.

Every protocol is a pure function of its arguments (seeds included) and returns
a plain dict of the measured quantities plus wall-clock seconds.
"""

from __future__ import annotations

import logging
import time
from dataclasses import replace

import numpy as np

from .harmonize import cv_analysis, harmonize_series, pairwise_nmi_analysis
from .metrics import mean_gradient_magnitude
from .model import ModelConfig, generate_batch
from .phantom import PhantomConfig, cohort_subject_seed, generate_cohort, generate_volume
from .trainer import (PairDataset, TrainConfig, build_dataset, run_distance_ablation, train,
                      unknown_distance_test_pairs, with_pairs)

log = logging.getLogger(__name__)


def phantom_volumes(seed, n_subjects, n_slices=40, offset=0):
    """Volumes for subjects ``offset .. offset + n_subjects - 1`` of a seeded population."""
    return [generate_volume(PhantomConfig(seed=cohort_subject_seed(seed, offset + i),
                                          n_slices=n_slices))
            for i in range(n_subjects)]


def phantom_dataset(seed, n_subjects, n_slices=40, mode="unknown_distance", offset=0):
    vols = phantom_volumes(seed, n_subjects, n_slices, offset)
    return build_dataset(vols, [v.nominal_target_index() for v in vols], mode)


def overfit_sanity(steps=2000, n_pairs=8, beta=0.01, seed=0, model_config=None) -> dict:
    """Memorize ``n_pairs`` fixed (condition, target) pairs, one per subject."""
    ds = phantom_dataset(seed + 100, n_pairs)
    rng = np.random.default_rng(seed)
    pick = [int(rng.choice(np.flatnonzero(ds.pairs[:, 0] == s))) for s in range(n_pairs)]
    ds = replace(ds, pairs=ds.pairs[pick])
    cfg = TrainConfig(max_steps=steps, batch_size=n_pairs, beta=beta, augment=False, seed=seed)
    t0 = time.time()
    _, hist = train(cfg, ds, model_config or ModelConfig.desk())
    return {"final_l_recon": hist[-1]["l_recon"], "seconds": time.time() - t0,
            "history": hist}


def _generated_sharpness(state, test: PairDataset, seed) -> float:
    cond, _ = test.images(np.arange(len(test)))
    gens = generate_batch(state, cond, seed=seed)
    return float(np.mean([mean_gradient_magnitude(g) for g in gens]))


def beta_direction(n_train=50, n_test=10, steps=700, betas=(0.0, 0.01), seed=0, n_slices=20,
                   batch_size=8, model_config=None) -> dict:
    """Mean gradient magnitude of x_gen after matched training at each beta."""
    train_ds = phantom_dataset(seed, n_train, n_slices)
    test_ds = unknown_distance_test_pairs(phantom_dataset(seed, n_test, n_slices, offset=n_train),
                                          15.0)
    out = {"grad": {}, "target_grad": None}
    _, tgt = test_ds.images(np.arange(len(test_ds)))
    out["target_grad"] = float(np.mean([mean_gradient_magnitude(t) for t in tgt]))
    t0 = time.time()
    for beta in betas:
        cfg = TrainConfig(max_steps=steps, batch_size=batch_size, beta=float(beta), seed=seed)
        state, _ = train(cfg, train_ds, model_config or ModelConfig.desk())
        out["grad"][float(beta)] = _generated_sharpness(state, test_ds, seed)
        log.info("beta=%g grad=%.5f", beta, out["grad"][float(beta)])
    out["seconds"] = time.time() - t0
    return out


def distance_direction(seeds=(0, 1, 2), steps=300, n_train=12, n_test=4, n_slices=40,
                       batch_size=8, beta=0.0, model_config=None) -> dict:
    """SSIM per (mode, distance) averaged over seeds for the two directional checks.

    All arms share ``beta``; 0 keeps the twelve training runs inside a CPU budget.
    """
    base = phantom_dataset(1000, n_train, n_slices)
    test = phantom_dataset(1000, n_test, n_slices, offset=n_train)
    cfg = TrainConfig(max_steps=steps, batch_size=batch_size, beta=beta)
    t0 = time.time()
    fd = run_distance_ablation(cfg, base, test, (3.0, 75.0), model_config or ModelConfig.desk(),
                               modes=("fixed_distance",), seeds=seeds, metrics=("SSIM",))
    fr = run_distance_ablation(cfg, base, test, (30.0, 75.0), model_config or ModelConfig.desk(),
                               modes=("fixed_range",), seeds=seeds, metrics=("SSIM",))
    return {"fixed_distance": {d: fd.value("fixed_distance", d, "SSIM") for d in (3.0, 75.0)},
            "fixed_range": {d: fr.value("fixed_range", d, "SSIM") for d in (30.0, 75.0)},
            "rows": fd.rows + fr.rows, "seconds": time.time() - t0}


def harmonization_direction(n_subjects=60, n_train=30, steps=1500, seed=0, n_slices=28,
                            near_zero_fraction=0.0, batch_size=8, method="threshold",
                            model_config=None) -> dict:
    """Train on phantom volumes, harmonize a jittered cohort, compare fat-area CVs."""
    t0 = time.time()
    train_ds = phantom_dataset(seed + 500, n_train, n_slices)
    cfg = TrainConfig(max_steps=steps, batch_size=batch_size, seed=seed)
    state, _ = train(cfg, train_ds, model_config or ModelConfig.desk())
    t_train = time.time() - t0
    cohort = generate_cohort(seed + 900, n_subjects, near_zero_fraction=near_zero_fraction)
    results = [harmonize_series(state, s, seed=seed, method=method) for s in cohort]
    report = cv_analysis(results)
    nmi_high = pairwise_nmi_analysis(results, subset={r[0] for r in report.rows if r[1]})
    return {"report": report, "results": results, "nmi_high_jitter": nmi_high,
            "train_seconds": t_train, "seconds": time.time() - t0}
