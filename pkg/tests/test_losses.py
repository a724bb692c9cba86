import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from cslicegen.errors import ConfigError, NumericError, ShapeError
from cslicegen.losses import (LossBreakdown, compose, gan_standard, gan_wgan_gp,
                              gradient_penalty, kl_loss, kl_loss_logvar, l1_loss, total_loss)
from gradcheck import analytic_grad, numeric_grad, relative_error

finite = st.floats(-1e3, 1e3, allow_nan=False)


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


def test_l1_examples(rng):
    a, b = rng.random((5, 6)), rng.random((5, 6))
    ta, tb = torch.from_numpy(a), torch.from_numpy(b)
    assert float(l1_loss(ta, ta)) == 0.0
    assert float(l1_loss(torch.zeros(3, 3), torch.ones(3, 3))) == 1.0
    brute = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert float(l1_loss(ta, tb)) == pytest.approx(brute, rel=1e-12)
    with pytest.raises(ShapeError):
        l1_loss(ta, tb[:, :5])


def test_kl_examples():
    assert float(kl_loss(torch.zeros(4), torch.ones(4))) == 0.0
    assert float(kl_loss(t(1.0), t(1.0))) == pytest.approx(0.5)
    with pytest.raises(NumericError):
        kl_loss(t(0.0), t(0.0))


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.05, 4)), min_size=2, max_size=8),
       st.integers(1, 7))
def test_kl_additive_and_nonnegative(pairs, cut):
    mu = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    sigma = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    cut = min(cut, len(pairs) - 1)
    whole = float(kl_loss(mu, sigma))
    parts = float(kl_loss(mu[:cut], sigma[:cut])) + float(kl_loss(mu[cut:], sigma[cut:]))
    assert whole == pytest.approx(parts, rel=1e-12, abs=1e-12)
    assert whole >= 0
    assert float(kl_loss_logvar(mu, torch.log(sigma ** 2))) == pytest.approx(whole, rel=1e-9,
                                                                              abs=1e-12)


def test_gan_standard_examples():
    half = t(0.5)
    gen, disc = gan_standard(half, half, half)
    assert float(disc) == pytest.approx(2 * math.log(2))
    assert float(gen) == pytest.approx(math.log(2))
    _, disc = gan_standard(t(1.0), t(0.0), t(0.0))
    assert float(disc) < 1e-6
    g1, d1 = gan_standard(t(0.7), t(0.2), t(0.4))
    g2, d2 = gan_standard(t(0.7), t(0.4), t(0.2))
    assert float(g1) == pytest.approx(float(g2)) and float(d1) == pytest.approx(float(d2))
    with pytest.raises(ValueError):
        gan_standard(t(1.5), half, half)


def test_wgan_examples():
    _, disc = gan_wgan_gp(t(0.3, 0.2), t(0.3, 0.2), 0.0)
    assert float(disc) == 0.0
    _, disc = gan_wgan_gp(t(0.0), t(0.0), 1.0)
    assert float(disc) == 10.0  # default lambda
    gens = [float(gan_wgan_gp(t(0.0), t(f), 0.0)[0]) for f in (-1.0, 0.0, 2.0)]
    assert gens[0] > gens[1] > gens[2]


def test_gradient_penalty_analytic_critics():
    g = torch.Generator().manual_seed(0)
    real = torch.rand(3, 1, 8, 8, dtype=torch.float64, generator=g)
    fake = torch.rand(3, 1, 8, 8, dtype=torch.float64, generator=g)
    w = torch.rand(64, dtype=torch.float64, generator=g)
    w = w / w.norm()
    assert float(gradient_penalty(lambda x: x.flatten(1) @ w, real, fake, g)) < 1e-20
    assert float(gradient_penalty(lambda x: torch.zeros(x.shape[0], dtype=x.dtype), real, fake,
                                  g)) == 1.0
    n = 64
    val = float(gradient_penalty(lambda x: 2 * x.flatten(1).sum(1), real, fake, g))
    assert val == pytest.approx((2 * math.sqrt(n) - 1) ** 2)


def test_total_loss_rules():
    parts = {"l_recon": 0.2, "l_gen": 0.3, "l_kl": 0.1, "l_gan_generator": -2.0}
    assert total_loss(parts, 0.0) == pytest.approx(0.6)
    assert total_loss(parts, 0.01) == pytest.approx(0.6 - 0.02)
    assert total_loss(parts, 0.02) - total_loss(parts, 0.01) == pytest.approx(0.01 * -2.0)
    with pytest.raises(ConfigError):
        total_loss(parts, -0.1)


@given(finite, finite, st.floats(0, 1e3), finite, finite, st.floats(0, 1e3), st.floats(0, 10))
def test_compose_identities_exact(r, g, k, adv, disc, gp, beta):
    total, parts = compose(r, g, k, adv, disc, gp, beta)
    d_cvae, d_total = parts.identity_residuals(beta)
    assert d_cvae == 0.0 and d_total == 0.0
    assert isinstance(parts, LossBreakdown)


# gradient checks on 8x8 images, K = 4 --------------------------------------------

def _critic(seed=0):
    g = torch.Generator().manual_seed(seed)
    w1 = torch.randn(4, 1, 3, 3, dtype=torch.float64, generator=g) * 0.5
    v = torch.randn(4 * 8 * 8, dtype=torch.float64, generator=g) * 0.1

    def critic(x, w=w1):
        h = torch.tanh(torch.nn.functional.conv2d(x, w, padding=1))
        return h.flatten(1) @ v
    return critic, w1


@pytest.fixture
def imgs():
    g = torch.Generator().manual_seed(3)
    return (torch.rand(2, 1, 8, 8, dtype=torch.float64, generator=g),
            torch.rand(2, 1, 8, 8, dtype=torch.float64, generator=g))


def _check(fn, x, tol=1e-4):
    err = relative_error(analytic_grad(fn, x), numeric_grad(fn, x))
    assert err < tol, err


def test_grad_l1(imgs):
    a, b = imgs
    _check(lambda x: l1_loss(x, b), a)


def test_grad_kl():
    g = torch.Generator().manual_seed(1)
    mu = torch.randn(3, 4, dtype=torch.float64, generator=g)
    sigma = torch.rand(3, 4, dtype=torch.float64, generator=g) + 0.5
    _check(lambda m: kl_loss(m, sigma), mu)
    _check(lambda s: kl_loss(mu, s), sigma)


def test_grad_gan_standard(imgs):
    real, fake = imgs
    critic, _ = _critic()
    d = lambda x: torch.sigmoid(critic(x))  # noqa: E731
    _check(lambda x: gan_standard(d(real), d(x), d(fake))[0], fake.clone())
    _check(lambda x: gan_standard(d(x), d(fake), d(fake))[1], real)


def test_grad_wgan_with_penalty(imgs):
    real, fake = imgs
    critic, w = _critic()

    def disc_loss(weights):
        c = lambda x: critic(x, weights)  # noqa: E731
        gp = gradient_penalty(c, real, fake, torch.Generator().manual_seed(9))
        return gan_wgan_gp(c(real), c(fake), gp)[1]

    def gen_loss(x):
        return gan_wgan_gp(critic(real), critic(x), 0.0)[0]

    _check(disc_loss, w)
    _check(gen_loss, fake)
    _check(lambda x: gradient_penalty(critic, real, x, torch.Generator().manual_seed(9)), fake)
