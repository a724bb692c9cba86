"""Optimization loop, fine-tuning, pairing protocols and the ablation harnesses."""

from __future__ import annotations

import logging
import math
import re
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import io
from .errors import ConfigError, DataError, NumericError, TrainingDiverged
from .losses import (LossBreakdown, compose, gan_standard, gan_wgan_gp, gradient_penalty,
                     kl_loss_logvar, l1_loss)
from .metrics import (default_extractor, lpips, mean_gradient_magnitude, nmi, psnr, ssim)
from .model import (ModelConfig, ModelState, generate_batch, load_checkpoint,  # noqa: F401
                    save_checkpoint)
from .preprocess import apply_augmentation, sample_augmentation, window_hu

log = logging.getLogger(__name__)

PAIRING_KINDS = ("unknown_distance", "fixed_distance", "fixed_range")
_MODE_RE = re.compile(r"^\s*(\w+)\s*(?:\(\s*([-+0-9.eE]+)\s*(?:mm)?\s*\))?\s*$")


@dataclass(frozen=True)
class PairingMode:
    kind: str = "unknown_distance"
    distance_mm: float = 0.0

    @classmethod
    def parse(cls, text) -> "PairingMode":
        if isinstance(text, PairingMode):
            return text
        m = _MODE_RE.match(str(text))
        if not m or m.group(1) not in PAIRING_KINDS:
            raise ConfigError("pairing_mode", f"cannot parse {text!r}")
        kind, d = m.group(1), m.group(2)
        if kind != "unknown_distance" and d is None:
            raise ConfigError("pairing_mode", f"{kind} needs a distance, e.g. {kind}(30)")
        return cls(kind, float(d) if d is not None else 0.0)

    def __str__(self):
        return self.kind if self.kind == "unknown_distance" else f"{self.kind}({self.distance_mm:g})"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    finetune_learning_rate: float = 1e-5
    batch_size: int = 8
    max_steps: int = 20000
    disc_steps_per_gen_step: int = 1
    seed: int = 0
    beta: float = 0.01
    gan_variant: str = "wgan_gp"
    pairing_mode: PairingMode | str = "unknown_distance"
    augment: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        self.pairing_mode = PairingMode.parse(self.pairing_mode)

    def validate(self) -> "TrainConfig":
        for name in ("learning_rate", "finetune_learning_rate"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps", "must be >= 0")
        if self.disc_steps_per_gen_step < 1:
            raise ConfigError("disc_steps_per_gen_step", "must be >= 1")
        if self.beta < 0:
            raise ConfigError("beta", "must be >= 0")
        if self.gan_variant not in ("standard", "wgan_gp"):
            raise ConfigError("gan_variant", "must be standard or wgan_gp")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pairing_mode"] = str(self.pairing_mode)
        return d


TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


# pairing ------------------------------------------------------------------------

def make_pairs(z_positions_mm, target_index: int, mode, z_spacing_mm: float | None = None):
    """(condition_index, target_index) pairs for one subject under a pairing mode."""
    mode = PairingMode.parse(mode)
    z = np.asarray(getattr(z_positions_mm, "z_positions_mm", z_positions_mm), dtype=np.float64)
    n = z.size
    if not 0 <= target_index < n:
        raise DataError(f"target_index {target_index} outside 0..{n - 1}")
    if z_spacing_mm is None:
        z_spacing_mm = float(z[1] - z[0]) if n > 1 else 1.0
    if mode.kind == "unknown_distance":
        return [(i, target_index) for i in range(n)]
    d = mode.distance_mm
    if d < 0:
        raise ConfigError("pairing_mode", "distance must be >= 0")
    if mode.kind == "fixed_range":
        return [(i, target_index) for i in range(n) if abs(z[i] - z[target_index]) <= d + 1e-6]
    k = d / z_spacing_mm
    if abs(k - round(k)) > 1e-6:
        raise ConfigError("pairing_mode", f"{d} mm is not a multiple of the {z_spacing_mm} mm spacing")
    k = int(round(k))
    return [(i, i + k) for i in range(n - k)]


@dataclass
class PairDataset:
    """Normalized volumes plus (subject, condition slice, target slice) index triples."""

    volumes: np.ndarray  # (S, n_slices, H, W) float32 in [0, 1]
    pairs: np.ndarray  # (N, 3) int64
    subject_ids: list[str]
    target_indices: list[int] = field(default_factory=list)
    z_spacing_mm: float = 3.0

    def __len__(self):
        return len(self.pairs)

    def images(self, idx):
        p = self.pairs[np.asarray(idx)]
        return self.volumes[p[:, 0], p[:, 1]], self.volumes[p[:, 0], p[:, 2]]


def build_dataset(volumes, target_indices, mode="unknown_distance") -> PairDataset:
    if not volumes:
        raise DataError("no volumes")
    norm = np.stack([window_hu(v.voxels).astype(np.float32) for v in volumes])
    triples = []
    for s, (v, t) in enumerate(zip(volumes, target_indices)):
        triples += [(s, c, tt) for c, tt in make_pairs(v.z_positions_mm, int(t), mode,
                                                       v.z_spacing_mm)]
    if not triples:
        raise DataError(f"pairing mode {mode} produced no pairs")
    return PairDataset(norm, np.asarray(triples, dtype=np.int64), [v.subject_id for v in volumes],
                       [int(t) for t in target_indices], float(volumes[0].z_spacing_mm))


def with_pairs(dataset: PairDataset, mode) -> PairDataset:
    """Same volumes, different pairing."""
    triples = []
    n = dataset.volumes.shape[1]
    z = np.arange(n) * dataset.z_spacing_mm
    for s, t in enumerate(dataset.target_indices):
        triples += [(s, c, tt) for c, tt in make_pairs(z, t, mode, dataset.z_spacing_mm)]
    return replace(dataset, pairs=np.asarray(triples, dtype=np.int64))


# training -----------------------------------------------------------------------

LOG_COLUMNS = ("step",) + LossBreakdown.FIELDS


class _BatchSampler:
    def __init__(self, n, batch_size, rng):
        self.n, self.bs, self.rng = n, batch_size, rng
        self.order, self.pos = np.empty(0, dtype=np.int64), 0

    def next(self):
        out = []
        while len(out) < self.bs:
            if self.pos >= len(self.order):
                self.order, self.pos = self.rng.permutation(self.n), 0
            take = min(self.bs - len(out), len(self.order) - self.pos)
            out.extend(self.order[self.pos:self.pos + take].tolist())
            self.pos += take
        return np.asarray(out)


def _make_optimizers(state: ModelState, lr, weight_decay):
    opt_g = torch.optim.AdamW(state.net.generator_parameters(), lr=lr, weight_decay=weight_decay)
    opt_d = torch.optim.AdamW(state.net.discriminator_parameters(), lr=lr,
                              weight_decay=weight_decay)
    if state.optimizer_state:
        opt_g.load_state_dict(state.optimizer_state["generator"])
        opt_d.load_state_dict(state.optimizer_state["discriminator"])
        for opt in (opt_g, opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
                group["weight_decay"] = weight_decay
    return opt_g, opt_d


def _adversarial(net, variant, real, fake_recon, fake_gen, gp_lambda, generator):
    """Return (generator loss, discriminator loss, penalty) for the given images."""
    if variant == "standard":
        gen, disc = gan_standard(net.discriminate(real), net.discriminate(fake_recon),
                                 net.discriminate(fake_gen))
        return gen, disc, torch.zeros(())
    fakes = torch.cat([fake_recon, fake_gen])
    d_fake = net.discriminate(fakes)
    d_real = net.discriminate(real)
    penalty = (gradient_penalty(net.discriminate, real.repeat(2, 1, 1, 1), fakes, generator)
               if torch.is_grad_enabled() else torch.zeros(()))
    gen, disc = gan_wgan_gp(d_real, d_fake, penalty, gp_lambda)
    return gen, disc, penalty


def train(config: TrainConfig, dataset: PairDataset, model_config: ModelConfig | None = None,
          state: ModelState | None = None, out_dir=None, learning_rate: float | None = None,
          steps: int | None = None):
    """Run the optimization loop; returns (ModelState, list of per-step log dicts)."""
    # Tiny activations otherwise slow CPU kernels badly. The mode is process-wide,
    # so it is switched off again on the way out.
    torch.set_flush_denormal(True)
    try:
        return _train(config, dataset, model_config, state, out_dir, learning_rate, steps)
    finally:
        torch.set_flush_denormal(False)


def _train(config, dataset, model_config, state, out_dir, learning_rate, steps):
    config.validate()
    if len(dataset) == 0:
        raise DataError("empty dataset")
    if state is None:
        model_config = replace(model_config or ModelConfig(), beta=config.beta,
                               gan_variant=config.gan_variant)
        state = ModelState.create(model_config, seed=config.seed)
    net = state.net
    variant, beta = state.config.gan_variant, float(config.beta)
    lr = config.learning_rate if learning_rate is None else learning_rate
    steps = config.max_steps if steps is None else steps
    opt_g, opt_d = _make_optimizers(state, lr, config.weight_decay)

    # Separate streams per consumer keep runs reproducible and resumable.
    rng = np.random.default_rng([config.seed, state.step])
    gen_t = torch.Generator().manual_seed(config.seed * 1_000_003 + state.step)
    sampler = _BatchSampler(len(dataset), config.batch_size, rng)
    out_dir = Path(out_dir) if out_dir is not None else None
    history = []
    t0 = time.time()
    net.train()
    for _ in range(steps):
        cond_np, tgt_np = dataset.images(sampler.next())
        if config.augment:
            cond_np, tgt_np = cond_np.copy(), tgt_np.copy()
            for b in range(len(cond_np)):
                params = sample_augmentation(rng, cond_np.shape[-1])
                if not params.is_identity:
                    cond_np[b] = apply_augmentation(cond_np[b], params)
                    tgt_np[b] = apply_augmentation(tgt_np[b], params)
        cond = torch.from_numpy(np.ascontiguousarray(cond_np))[:, None]
        tgt = torch.from_numpy(np.ascontiguousarray(tgt_np))[:, None]

        out = net(cond, tgt, gen_t)
        x_recon, x_gen = out["x_recon"], out["x_gen"]

        if beta > 0:
            for _ in range(config.disc_steps_per_gen_step):
                try:
                    _, disc_loss, penalty = _adversarial(net, variant, tgt, x_recon.detach(),
                                                         x_gen.detach(), state.config.gp_lambda,
                                                         gen_t)
                except (NumericError, ValueError):
                    disc_loss = torch.tensor(float("nan"))
                if not torch.isfinite(disc_loss):
                    _diverged(state, history, "discriminator", float(disc_loss), out_dir)
                opt_d.zero_grad(set_to_none=True)
                disc_loss.backward()
                opt_d.step()
            for p in net.discriminator_parameters():
                p.requires_grad_(False)
            if variant == "standard":
                adv_gen, _ = gan_standard(torch.full((1,), 0.5), net.discriminate(x_recon),
                                          net.discriminate(x_gen))
            else:
                adv_gen = -net.discriminate(torch.cat([x_recon, x_gen])).mean()
            for p in net.discriminator_parameters():
                p.requires_grad_(True)
        else:
            # beta = 0: the adversarial term cannot reach the generator, so the
            # discriminator is left untouched and only its current opinion is logged.
            with torch.no_grad():
                try:
                    adv_gen, disc_loss, _ = _adversarial(net, variant, tgt, x_recon, x_gen,
                                                         state.config.gp_lambda, gen_t)
                except (NumericError, ValueError):
                    adv_gen = disc_loss = torch.tensor(float("nan"))
            penalty = torch.zeros(())

        l_recon = l1_loss(x_recon, tgt)
        l_gen = l1_loss(x_gen, tgt)
        l_kl = kl_loss_logvar(out["mu"], out["logvar"])
        total, parts = compose(l_recon, l_gen, l_kl, adv_gen, disc_loss, penalty, beta)
        if not math.isfinite(parts.total):
            _diverged(state, history, "generator", parts.total, out_dir)
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()

        state.step += 1
        history.append({"step": state.step, **parts.as_dict()})
        if config.checkpoint_every and out_dir is not None and state.step % config.checkpoint_every == 0:
            _store_optimizers(state, opt_g, opt_d)
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(state, out_dir / f"checkpoint_{state.step:06d}.ckpt")
        if state.step % 100 == 0:
            log.info("step %d total %.4f recon %.4f gen %.4f kl %.4f adv %.4f (%.1fs)",
                     state.step, parts.total, parts.l_recon, parts.l_gen, parts.l_kl,
                     parts.l_gan_generator, time.time() - t0)
    net.eval()
    _store_optimizers(state, opt_g, opt_d)
    return state, history


def _store_optimizers(state, opt_g, opt_d):
    state.optimizer_state = {"generator": opt_g.state_dict(), "discriminator": opt_d.state_dict()}


def _diverged(state, history, which, value, out_dir):
    snapshot = {"step": state.step, "which": which, "value": value,
                "last_log": history[-1] if history else None}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, out_dir / "diverged.ckpt")
        (out_dir / "diverged.json").write_text(io.canonical_json(snapshot) + "\n")
    raise TrainingDiverged(f"non-finite {which} loss at step {state.step}", snapshot)


def finetune(state: ModelState, dataset: PairDataset, config: TrainConfig,
             steps: int | None = None, expected_config: ModelConfig | None = None, out_dir=None):
    """Continue training an existing state at the fine-tuning learning rate."""
    if isinstance(state, (str, Path)):
        state = load_checkpoint(state, expected_config)
    elif expected_config is not None and expected_config.fingerprint() != state.config.fingerprint():
        from .errors import FingerprintError
        raise FingerprintError("model state does not match the expected configuration")
    state, _ = train(config, dataset, state=state, out_dir=out_dir,
                     learning_rate=config.finetune_learning_rate, steps=steps)
    return state


def write_log(path, history) -> Path:
    io.write_tsv(path, list(LOG_COLUMNS), history)
    return Path(path)


# evaluation helpers and ablations ------------------------------------------------

def evaluate_pairs(state: ModelState, dataset: PairDataset, seed=0, max_pairs=None,
                   metrics=("SSIM", "LPIPS")) -> dict[str, float]:
    """Mean metrics of generated slices against the paired targets."""
    idx = np.arange(len(dataset))
    if max_pairs is not None and len(idx) > max_pairs:
        idx = np.random.default_rng(seed).choice(idx, size=max_pairs, replace=False)
        idx.sort()
    feats = default_extractor()
    fns = {"SSIM": ssim, "PSNR": psnr, "NMI": nmi,
           "LPIPS": lambda a, b: lpips(a, b, feats), "GRAD": lambda a, b: mean_gradient_magnitude(a)}
    scores = {m: [] for m in metrics}
    for start in range(0, len(idx), 16):
        chunk = idx[start:start + 16]
        cond, tgt = dataset.images(chunk)
        gen = generate_batch(state, cond, seed=seed + start)
        for g, t in zip(gen, tgt):
            for m in metrics:
                scores[m].append(fns[m](g, t))
    return {m: float(np.mean(v)) for m, v in scores.items()}


@dataclass
class AblationReport:
    key_names: tuple
    rows: list = field(default_factory=list)  # (*keys, metric, mean, std, n)

    def value(self, *keys_and_metric) -> float:
        for r in self.rows:
            if tuple(r[:len(keys_and_metric)]) == tuple(keys_and_metric):
                return r[len(keys_and_metric)]
        raise KeyError(keys_and_metric)

    def write(self, path) -> Path:
        io.write_tsv(path, list(self.key_names) + ["metric", "value", "std", "n_seeds"], self.rows)
        return Path(path)

    def summary(self) -> str:
        cols = list(self.key_names) + ["metric", "value", "std", "n"]
        lines = ["\t".join(cols)]
        for r in self.rows:
            lines.append("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))
        return "\n".join(lines)


def _aggregate(key_names, per_seed):
    report = AblationReport(tuple(key_names))
    for key, vals in per_seed.items():
        v = np.asarray(vals, dtype=np.float64)
        report.rows.append((*key, float(v.mean()), float(v.std()), int(v.size)))
    return report


def unknown_distance_test_pairs(dataset: PairDataset, distance_mm: float) -> PairDataset:
    """Conditions exactly ``distance_mm`` from each subject's target, target unchanged."""
    k = int(round(distance_mm / dataset.z_spacing_mm))
    n = dataset.volumes.shape[1]
    triples = [(s, c, t) for s, t in enumerate(dataset.target_indices)
               for c in sorted({t - k, t + k}) if 0 <= c < n]
    return replace(dataset, pairs=np.asarray(triples, dtype=np.int64).reshape(-1, 3))


def run_distance_ablation(config: TrainConfig, train_data: PairDataset, test_data: PairDataset,
                          distances_mm, model_config: ModelConfig | None = None,
                          modes=("fixed_distance", "fixed_range", "unknown_distance"),
                          seeds=(0,), metrics=("SSIM", "LPIPS"), max_eval_pairs=64,
                          progress=None) -> AblationReport:
    """Train each pairing mode across the distance grid and score held-out pairs."""
    for d in distances_mm:
        k = d / train_data.z_spacing_mm
        if abs(k - round(k)) > 1e-6:
            raise ConfigError("distances_mm", f"{d} is not a multiple of {train_data.z_spacing_mm}")
    per_seed: dict[tuple, list[float]] = {}
    for seed in seeds:
        for mode in modes:
            if mode == "unknown_distance":
                cfg = replace(config, seed=seed, pairing_mode=PairingMode("unknown_distance"))
                state, _ = train(cfg, with_pairs(train_data, cfg.pairing_mode), model_config)
            for d in distances_mm:
                if mode == "unknown_distance":
                    test = unknown_distance_test_pairs(test_data, d)
                else:
                    pm = PairingMode(mode, float(d))
                    cfg = replace(config, seed=seed, pairing_mode=pm)
                    state, _ = train(cfg, with_pairs(train_data, pm), model_config)
                    test = with_pairs(test_data, pm)
                scores = evaluate_pairs(state, test, seed=seed, max_pairs=max_eval_pairs,
                                        metrics=metrics)
                for m, v in scores.items():
                    per_seed.setdefault((mode, float(d), m), []).append(v)
                if progress:
                    progress(f"seed={seed} mode={mode} d={d}: {scores}")
    return _aggregate(("mode", "distance_mm"), per_seed)


def run_beta_ablation(config: TrainConfig, train_data: PairDataset, test_data: PairDataset,
                      betas=(0.0, 0.01), model_config: ModelConfig | None = None, seeds=(0,),
                      metrics=("SSIM", "PSNR", "LPIPS", "NMI", "GRAD"), max_eval_pairs=64,
                      progress=None) -> AblationReport:
    """Matched training runs that differ only in the adversarial weight."""
    per_seed: dict[tuple, list[float]] = {}
    for seed in seeds:
        for beta in betas:
            cfg = replace(config, seed=seed, beta=float(beta))
            state, _ = train(cfg, train_data, model_config)
            scores = evaluate_pairs(state, test_data, seed=seed, max_pairs=max_eval_pairs,
                                    metrics=metrics)
            for m, v in scores.items():
                per_seed.setdefault((float(beta), m), []).append(v)
            if progress:
                progress(f"seed={seed} beta={beta}: {scores}")
    return _aggregate(("beta",), per_seed)
