"""Central finite differences for float64 torch functions."""

import torch


def numeric_grad(fn, x, eps=1e-6):
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        up = fn(x).detach().item()
        flat[i] = old - eps
        down = fn(x).detach().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def analytic_grad(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(a, b):
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))
