"""Training objectives: L1 reconstruction/generation, KL, and the adversarial terms."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError, NumericError, ShapeError

LOG_EPS = 1e-7
DEFAULT_GP_LAMBDA = 10.0


@dataclass
class LossBreakdown:
    l_recon: float
    l_gen: float
    l_kl: float
    l_cvae: float
    l_gan_generator: float
    l_gan_discriminator: float
    gradient_penalty: float
    total: float

    FIELDS = ("l_recon", "l_gen", "l_kl", "l_cvae", "l_gan_generator",
              "l_gan_discriminator", "gradient_penalty", "total")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def identity_residuals(self, beta: float) -> tuple[float, float]:
        cvae = self.l_recon + self.l_gen + self.l_kl
        return self.l_cvae - cvae, self.total - (cvae + beta * self.l_gan_generator)


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def kl_loss(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims, averaged over the batch."""
    if torch.any(sigma <= 0):
        raise NumericError("kl_loss requires sigma > 0")
    # Each term is >= 0 analytically; clamp away float round-off below zero.
    kl = (-0.5 * (1.0 + torch.log(sigma ** 2) - mu ** 2 - sigma ** 2)).clamp_min(0.0)
    if kl.dim() <= 1:
        return kl.sum()
    return kl.sum(dim=-1).mean()


def kl_loss_logvar(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Same divergence from a log-variance head (no log of a possibly tiny sigma)."""
    kl = (-0.5 * (1.0 + logvar - mu ** 2 - logvar.exp())).clamp_min(0.0)
    return kl.sum(dim=-1).mean() if kl.dim() > 1 else kl.sum()


def _check_prob(p):
    if torch.any((p < 0) | (p > 1)):
        raise ValueError("discriminator outputs must lie in [0, 1] for the standard GAN loss")
    return p.clamp(LOG_EPS, 1.0 - LOG_EPS)


def gan_standard(d_real, d_fake_recon, d_fake_gen):
    """(generator loss, discriminator loss); the two fake streams carry equal weight.

    The generator side uses the non-saturating form -log D(fake).
    """
    d_real, d_fake_recon, d_fake_gen = (_check_prob(torch.as_tensor(t))
                                        for t in (d_real, d_fake_recon, d_fake_gen))
    disc = -(torch.log(d_real).mean()
             + 0.5 * (torch.log(1 - d_fake_recon).mean() + torch.log(1 - d_fake_gen).mean()))
    gen = -0.5 * (torch.log(d_fake_recon).mean() + torch.log(d_fake_gen).mean())
    return gen, disc


def gan_wgan_gp(d_real, d_fake, penalty, gp_lambda=DEFAULT_GP_LAMBDA):
    d_real = torch.as_tensor(d_real)
    d_fake = torch.as_tensor(d_fake)
    penalty = torch.as_tensor(penalty, dtype=d_real.dtype)
    if not (torch.isfinite(d_real).all() and torch.isfinite(d_fake).all()):
        raise NumericError("non-finite critic scores")
    disc = d_fake.mean() - d_real.mean() + gp_lambda * penalty
    gen = -d_fake.mean()
    return gen, disc


def gradient_penalty(discriminator, real: torch.Tensor, fake: torch.Tensor,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean of (||grad_x D(x_hat)||_2 - 1)^2 at random interpolates of real and fake."""
    if real.shape != fake.shape:
        raise ShapeError(f"gradient_penalty shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    u_shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    u = torch.rand(u_shape, generator=generator, dtype=real.dtype, device=real.device)
    x_hat = (u * real + (1 - u) * fake).requires_grad_(True)
    scores = discriminator(x_hat)
    if not scores.requires_grad:
        grad = torch.zeros_like(x_hat)
    else:
        (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(x_hat)
    if not torch.isfinite(grad).all():
        raise NumericError("non-finite critic gradient at interpolates")
    norms = grad.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def total_loss(parts: LossBreakdown | dict, beta: float):
    if beta < 0:
        raise ConfigError("beta", f"must be >= 0, got {beta}")
    get = parts.__getitem__ if isinstance(parts, dict) else lambda k: getattr(parts, k)
    return get("l_recon") + get("l_gen") + get("l_kl") + beta * get("l_gan_generator")


def compose(l_recon, l_gen, l_kl, l_gan_generator, l_gan_discriminator, penalty,
            beta) -> tuple[torch.Tensor, LossBreakdown]:
    """Combine the parts into the training objective and a float breakdown for logging."""
    if beta < 0:
        raise ConfigError("beta", f"must be >= 0, got {beta}")
    l_cvae = l_recon + l_gen + l_kl
    total = l_cvae + beta * l_gan_generator
    f = lambda t: float(t.detach()) if torch.is_tensor(t) else float(t)  # noqa: E731
    r, g, k, adv = f(l_recon), f(l_gen), f(l_kl), f(l_gan_generator)
    # Logged composites are recomputed in float64 so the identities hold exactly.
    cvae_f = r + g + k
    breakdown = LossBreakdown(
        l_recon=r, l_gen=g, l_kl=k, l_cvae=cvae_f, l_gan_generator=adv,
        l_gan_discriminator=f(l_gan_discriminator), gradient_penalty=f(penalty),
        total=cvae_f + beta * adv)
    return total, breakdown
