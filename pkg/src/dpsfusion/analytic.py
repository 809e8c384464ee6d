"""Closed-form scores of simple priors under the variance-preserving forward
process.  They stand in for a trained network in oracle tests.

A prior ``N(mu, v I)`` diffuses to ``N(sqrt(ab) mu, (ab v + 1 - ab) I)`` at
step t; a Gaussian mixture diffuses component-wise.
"""

from __future__ import annotations

import math

import torch

from .diffusion import NoiseSchedule


class GaussianScore:
    def __init__(self, sched: NoiseSchedule, mean=0.0, var: float = 1.0):
        self.sched = sched
        self.mean = torch.as_tensor(mean, dtype=torch.float64)
        self.var = float(var)

    def marginal(self, t: int):
        ab = self.sched.alpha_bar_at(t)
        return math.sqrt(ab) * self.mean, ab * self.var + 1.0 - ab

    def __call__(self, x, t):
        m, v = self.marginal(int(t))
        return -(x - m.to(x.dtype)) / v

    def posterior_mean(self, x_t, t: int):
        """``E[x_0 | x_t]`` by Gaussian conditioning."""
        ab = self.sched.alpha_bar_at(t)
        m, v = self.marginal(t)
        mu = self.mean.to(x_t.dtype)
        return mu + math.sqrt(ab) * self.var / v * (x_t - m.to(x_t.dtype))


class GaussianMixtureScore:
    """Isotropic mixture ``sum_k w_k N(mu_k, v I)`` over vectors ``(B, D)``."""

    def __init__(self, sched: NoiseSchedule, means, var: float = 1.0, weights=None):
        self.sched = sched
        self.means = torch.as_tensor(means, dtype=torch.float64)
        k = self.means.shape[0]
        w = torch.full((k,), 1.0 / k, dtype=torch.float64) if weights is None else torch.as_tensor(weights, dtype=torch.float64)
        self.log_w = torch.log(w / w.sum())
        self.var = float(var)

    def __call__(self, x, t):
        ab = self.sched.alpha_bar_at(int(t))
        v = ab * self.var + 1.0 - ab
        mu = math.sqrt(ab) * self.means.to(x.dtype)              # (K, D)
        diff = x[:, None, :] - mu[None, :, :]                    # (B, K, D)
        logits = self.log_w.to(x.dtype) - 0.5 * (diff ** 2).sum(-1) / v
        resp = torch.softmax(logits, dim=1)                      # (B, K)
        return -(resp[:, :, None] * diff).sum(1) / v


class LinearSelect:
    """Forward model picking fixed coordinates of a vector state ``(B, D)``."""

    kind = "select"

    def __init__(self, index):
        self.index = list(index)

    @property
    def out_dim(self):
        return len(self.index)

    def __call__(self, x):
        return x[:, self.index]
