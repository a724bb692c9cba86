"""Two encoders, one decoder and one discriminator wired as a conditional VAE-GAN.

encoder1 maps the condition slice to a deterministic code ``z_c``; encoder2 maps
the target slice to ``(mu_t, sigma_t)``.  The decoder only ever sees the
concatenation ``[z_c, z]`` where ``z`` is either a reparameterized target code
(reconstruction) or a standard-normal draw (generation).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io
from .errors import CheckpointError, ConfigError, FingerprintError, NumericError, ShapeError, StateError
from .preprocess import SliceImage

CHECKPOINT_VERSION = 1
GAN_VARIANTS = ("standard", "wgan_gp")
OUTPUT_BIAS_INIT = -1.0


@dataclass
class ModelConfig:
    latent_dim: int = 256
    image_size: int = 256
    # Resolution the conv stacks run at; inputs are area-averaged down to it and
    # decoder logits are bilinearly upsampled back to ``image_size``.
    work_size: int = 256
    encoder_widths: tuple = (32, 64, 128, 256, 256, 256)
    decoder_widths: tuple = (256, 256, 128, 64, 32, 16)
    discriminator_widths: tuple = (32, 64, 128, 256, 256, 256)
    gan_variant: str = "wgan_gp"
    beta: float = 0.01
    gp_lambda: float = 10.0

    def __post_init__(self):
        for name in ("encoder_widths", "decoder_widths", "discriminator_widths"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small configuration sized for single-core CPU experiments."""
        base = dict(latent_dim=32, work_size=64, encoder_widths=(16, 32, 64, 64),
                    decoder_widths=(64, 64, 32, 16), discriminator_widths=(16, 32, 64, 64))
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "ModelConfig":
        if self.latent_dim < 1:
            raise ConfigError("latent_dim", "must be >= 1")
        if self.image_size != 256:
            raise ConfigError("image_size", "model images are 256x256")
        if self.work_size < 1 or self.image_size % self.work_size:
            raise ConfigError("work_size", "must divide image_size")
        for name in ("encoder_widths", "decoder_widths", "discriminator_widths"):
            widths = getattr(self, name)
            if not widths or min(widths) < 1:
                raise ConfigError(name, "must be a non-empty list of positive widths")
            if self.work_size % (2 ** len(widths)) or self.work_size < 2 ** len(widths):
                raise ConfigError(name, f"{len(widths)} stride-2 stages do not fit work_size {self.work_size}")
        if self.gan_variant not in GAN_VARIANTS:
            raise ConfigError("gan_variant", f"must be one of {GAN_VARIANTS}")
        if self.beta < 0:
            raise ConfigError("beta", "must be >= 0")
        if self.gp_lambda < 0:
            raise ConfigError("gp_lambda", "must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def fingerprint(self) -> str:
        return io.fingerprint(self.to_dict())


class ConvEncoder(nn.Module):
    """Area downsample to the working size, strided 4x4 convs, linear head."""

    def __init__(self, widths, out_features, image_size, work_size):
        super().__init__()
        self.pool = image_size // work_size
        layers, c, r = [], 1, work_size
        for w in widths:
            layers += [nn.Conv2d(c, w, 4, 2, 1), nn.LeakyReLU(0.2)]
            c, r = w, r // 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c * r * r, out_features)

    def forward(self, x):
        if self.pool > 1:
            x = F.avg_pool2d(x, self.pool)
        return self.head(self.features(x).flatten(1))


class ConvDecoder(nn.Module):
    def __init__(self, widths, in_features, image_size, work_size):
        super().__init__()
        self.image_size = image_size
        self.r0 = work_size // 2 ** len(widths)
        self.c0 = widths[0]
        self.fc = nn.Linear(in_features, self.c0 * self.r0 * self.r0)
        layers, c = [], widths[0]
        for w in widths[1:]:
            layers += [nn.ConvTranspose2d(c, w, 4, 2, 1), nn.LeakyReLU(0.2)]
            c = w
        layers.append(nn.ConvTranspose2d(c, 1, 4, 2, 1))
        self.net = nn.Sequential(*layers)
        # Start near the average slice intensity; an output stuck at the all-background
        # value saturates the sigmoid and stalls L1 training.
        with torch.no_grad():
            self.net[-1].bias.fill_(OUTPUT_BIAS_INIT)

    def forward(self, z):
        h = F.leaky_relu(self.fc(z), 0.2).view(-1, self.c0, self.r0, self.r0)
        logits = self.net(h)
        if logits.shape[-1] != self.image_size:
            logits = F.interpolate(logits, size=(self.image_size, self.image_size),
                                   mode="bilinear", align_corners=False)
        return torch.sigmoid(logits)


class CSliceGen(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        k, s, w = config.latent_dim, config.image_size, config.work_size
        self.encoder1 = ConvEncoder(config.encoder_widths, k, s, w)
        self.encoder2 = ConvEncoder(config.encoder_widths, 2 * k, s, w)
        self.decoder = ConvDecoder(config.decoder_widths, 2 * k, s, w)
        self.discriminator = ConvEncoder(config.discriminator_widths, 1, s, w)

    def _check(self, x):
        s = self.config.image_size
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[-2:] != (s, s):
            raise ShapeError(f"expected (B, 1, {s}, {s}) input, got {tuple(x.shape)}")
        return x

    def generator_parameters(self):
        for m in (self.encoder1, self.encoder2, self.decoder):
            yield from m.parameters()

    def discriminator_parameters(self):
        return self.discriminator.parameters()

    def zero_target_head(self):
        """Zero encoder2's last layer: mu_t = 0 and sigma_t = 1 for every input."""
        with torch.no_grad():
            self.encoder2.head.weight.zero_()
            self.encoder2.head.bias.zero_()

    def encode_condition(self, x):
        return self.encoder1(self._check(x))

    def encode_target(self, x):
        """Return (mu, sigma, logvar); sigma = exp(logvar / 2) is always positive."""
        h = self.encoder2(self._check(x))
        mu, logvar = h.chunk(2, dim=1)
        return mu, torch.exp(0.5 * logvar), logvar

    def decode(self, z_c, z):
        k = self.config.latent_dim
        if z_c.shape[-1] != k or z.shape[-1] != k:
            raise ShapeError(f"latent codes must have length {k}, got {z_c.shape[-1]} and {z.shape[-1]}")
        return self.decoder(torch.cat([z_c, z], dim=-1))

    def discriminate(self, x):
        score = self.discriminator(self._check(x)).squeeze(-1)
        return torch.sigmoid(score) if self.config.gan_variant == "standard" else score

    def forward(self, cond, target, generator=None):
        """Training forward pass producing x_recon (via z_t) and x_gen (via z_prior)."""
        z_c = self.encode_condition(cond)
        mu, sigma, logvar = self.encode_target(target)
        z_t = reparameterize(mu, sigma, generator)
        z_prior = sample_prior(mu.shape, generator, mu.dtype)
        return {"z_c": z_c, "mu": mu, "sigma": sigma, "logvar": logvar,
                "x_recon": self.decode(z_c, z_t), "x_gen": self.decode(z_c, z_prior)}


def sample_prior(shape, generator=None, dtype=torch.float32):
    return torch.randn(shape, generator=generator, dtype=dtype)


def reparameterize(mu, sigma, generator=None):
    if torch.any(sigma <= 0):
        raise NumericError("reparameterize requires sigma > 0")
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + sigma * eps


def parameter_count(config: ModelConfig) -> int:
    return sum(p.numel() for p in CSliceGen(config).parameters())


# state and checkpoints -----------------------------------------------------------

@dataclass
class ModelState:
    config: ModelConfig
    net: CSliceGen
    step: int = 0
    optimizer_state: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "ModelState":
        torch.manual_seed(seed)
        return cls(config=config, net=CSliceGen(config))

    def clone(self) -> "ModelState":
        other = ModelState(self.config, CSliceGen(self.config), self.step,
                           _clone_tree(self.optimizer_state))
        other.net.load_state_dict(self.net.state_dict())
        return other


def _clone_tree(obj):
    if torch.is_tensor(obj):
        return obj.clone()
    if isinstance(obj, dict):
        return {k: _clone_tree(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clone_tree(v) for v in obj]
    return obj


def _require(state):
    if state is None or not isinstance(state, ModelState):
        raise StateError("no model state loaded")
    return state


def _to_batch(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr))[:, None]


def generate_batch(state: ModelState, conditions, seed: int = 0) -> np.ndarray:
    """Decode ``[encoder1(cond), z_prior]`` for a stack of normalized 256x256 slices."""
    state = _require(state)
    x = _to_batch(conditions)
    g = torch.Generator().manual_seed(int(seed))
    net = state.net
    with torch.no_grad():
        z_c = net.encode_condition(x)
        z = sample_prior(z_c.shape, g, z_c.dtype)
        out = net.decode(z_c, z)
    return out[:, 0].numpy()


def generate(state: ModelState, cond, seed: int = 0):
    """Generate the target-level slice for one condition (SliceImage or array)."""
    state = _require(state)
    if isinstance(cond, SliceImage):
        if cond.units != "normalized01":
            raise ShapeError("generate expects a normalized condition slice")
        return cond.with_pixels(generate_batch(state, cond.pixels, seed)[0])
    return generate_batch(state, cond, seed)[0]


def _flatten(obj, prefix, arrays):
    if torch.is_tensor(obj):
        name = prefix
        arrays[name] = obj.detach().cpu().numpy()
        return {"__array__": name}
    if isinstance(obj, dict):
        return {"__dict__": [[k, _flatten(v, f"{prefix}.{k}", arrays)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return [_flatten(v, f"{prefix}.{i}", arrays) for i, v in enumerate(obj)]
    return obj


def _unflatten(obj, arrays):
    if isinstance(obj, dict) and "__array__" in obj:
        return torch.from_numpy(arrays[obj["__array__"]].copy())
    if isinstance(obj, dict) and "__dict__" in obj:
        return {k: _unflatten(v, arrays) for k, v in obj["__dict__"]}
    if isinstance(obj, list):
        return [_unflatten(v, arrays) for v in obj]
    return obj


def save_checkpoint(state: ModelState, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    params = {k: v.detach().cpu().numpy() for k, v in state.net.state_dict().items()}
    for k, v in params.items():
        arrays[f"net.{k}"] = v
    opt = _flatten(state.optimizer_state, "opt", arrays)
    header = {"format": "cslicegen-checkpoint", "version": CHECKPOINT_VERSION,
              "fingerprint": state.config.fingerprint(), "config": state.config.to_dict(),
              "step": int(state.step), "param_names": list(params), "optimizer": opt}
    io.write_container(path, header, arrays)


def load_checkpoint(path, config: ModelConfig | None = None) -> ModelState:
    """Load a checkpoint; ``config`` (if given) must match the stored fingerprint."""
    header, arrays = io.read_container(path)
    if header.get("format") != "cslicegen-checkpoint":
        raise CheckpointError(f"{path}: not a model checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    stored = ModelConfig(**header["config"])
    if stored.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: header fingerprint does not match stored config")
    if config is not None and config.fingerprint() != header["fingerprint"]:
        raise FingerprintError(f"{path}: checkpoint fingerprint {header['fingerprint']} "
                               f"does not match requested config {config.fingerprint()}")
    net = CSliceGen(stored)
    try:
        net.load_state_dict({k: torch.from_numpy(arrays[f"net.{k}"].copy())
                             for k in header["param_names"]})
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: parameter arrays do not match config") from exc
    return ModelState(config=stored, net=net, step=int(header["step"]),
                      optimizer_state=_unflatten(header["optimizer"], arrays))
