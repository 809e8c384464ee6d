"""Noise schedules, forward corruption, the unconditional reverse step and
the denoising score-matching objective.

Time indices run over ``1..T``; index 0 is clean data.  The schedule tables
are stored 0-based, so ``beta[t - 1]`` is the value for step ``t``.

The step functions are written with plain arithmetic so they accept numpy
arrays and torch tensors alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ParameterError, ShapeError

#: Coefficient on ``beta_t * score`` in the reverse step.  1.0 is the
#: variance-preserving ancestral update; 0.5 is the half-weight variant.
FULL_SCORE_WEIGHT = 1.0
HALF_SCORE_WEIGHT = 0.5


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ParameterError("beta must be a non-empty 1-D array")
        if not np.all((beta > 0) & (beta < 1)):
            raise ParameterError("every beta_t must lie in (0, 1)")
        alpha = 1.0 - beta
        for name, value in (("beta", beta), ("alpha", alpha), ("alpha_bar", np.cumprod(alpha))):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def _check(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ParameterError(f"t={t} outside 1..{self.T}")
        return t - 1

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check(t)])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check(t)])

    def sigma_at(self, t: int) -> float:
        """Marginal noise std ``sqrt(1 - alpha_bar_t)``."""
        return math.sqrt(1.0 - self.alpha_bar_at(t))

    def to_dict(self) -> dict:
        return {"beta": [float(b) for b in self.beta]}


def make_linear_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp rescaled by ``1000 / T``.

    The rescaling keeps the terminal ``alpha_bar`` roughly fixed when the
    step count changes, so one trained network can be sampled at any T.
    """
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_min <= beta_max < 1:
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    scale = 1000.0 / T
    beta = np.linspace(beta_min * scale, beta_max * scale, int(T), dtype=np.float64)
    return NoiseSchedule(np.minimum(beta, 0.999))


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse_step(x_prev, beta_t: float, z):
    """One forward corruption step ``sqrt(1 - beta) x + sqrt(beta) z``."""
    _check_same_shape(x_prev, z)
    if not 0 < beta_t < 1:
        raise ParameterError(f"beta_t must be in (0, 1), got {beta_t}")
    return math.sqrt(1.0 - beta_t) * x_prev + math.sqrt(beta_t) * z


def sample_xt_given_x0(x0, t: int, sched: NoiseSchedule, z):
    """Closed-form draw from ``q(x_t | x_0)`` given the noise ``z``."""
    _check_same_shape(x0, z)
    ab = sched.alpha_bar_at(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * z


def reverse_step_unconditional(x_t, score, beta_t: float, z, score_weight: float = FULL_SCORE_WEIGHT):
    """``(x_t + w * beta_t * score) / sqrt(1 - beta_t) + sqrt(beta_t) * z``.

    With ``score_weight=1`` a standard normal is a fixed point of the chain
    when ``score(x) = -x``.  ``score_weight=0.5`` gives the half-weight form,
    whose marginal variance grows by about ``beta_t`` per step.
    """
    _check_same_shape(x_t, score)
    _check_same_shape(x_t, z)
    if not 0 < beta_t < 1:
        raise ParameterError(f"beta_t must be in (0, 1), got {beta_t}")
    return (x_t + (score_weight * beta_t) * score) / math.sqrt(1.0 - beta_t) + math.sqrt(beta_t) * z


def conditional_score_target(x_t, x0, alpha_bar):
    """``grad log q(x_t | x_0) = -(x_t - sqrt(ab) x0) / (1 - ab)``; ``alpha_bar`` broadcasts."""
    if torch.is_tensor(alpha_bar):
        root = torch.sqrt(alpha_bar)
    else:
        root = np.sqrt(alpha_bar)
    return -(x_t - root * x0) / (1.0 - alpha_bar)


LOSS_WEIGHTINGS = ("none", "noise", "unit")


def _loss_weight(ab, weighting: str):
    if weighting == "none":
        return None
    if weighting == "noise":
        return 1.0 - ab
    if weighting == "unit":
        return (1.0 - ab) / ab
    raise ParameterError(f"unknown loss weighting {weighting!r}; expected one of {LOSS_WEIGHTINGS}")


def dsm_loss(score_model, x0: torch.Tensor, sched: NoiseSchedule, generator=None, t=None, z=None,
             weighting: str = "none"):
    """Denoising score-matching loss for a batch of clean samples.

    ``score_model(x_t, t)`` takes a batch and a 1-D integer tensor of steps.
    ``t`` and ``z`` default to fresh draws (uniform steps in ``1..T``, standard
    normal noise) from ``generator``.  Returns the scalar mean over batch and
    elements of ``lambda(t) * (s - target)^2``; call ``.backward()`` for
    gradients.

    ``weighting`` picks ``lambda``: ``"none"`` (1, the plain score error),
    ``"noise"`` (``1 - ab``, the noise-prediction error) or ``"unit"``
    (``(1 - ab) / ab``, the clean-field error scaled by ``(1 - ab)``).
    """
    if x0.shape[0] == 0:
        raise ParameterError("dsm_loss needs a non-empty batch")
    n = x0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (n,), generator=generator)
    t = torch.as_tensor(t, dtype=torch.long)
    if z is None:
        z = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    _check_same_shape(x0, z)
    ab = torch.tensor(sched.alpha_bar, dtype=x0.dtype)[t - 1]
    ab = ab.reshape((n,) + (1,) * (x0.dim() - 1))
    x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * z
    target = conditional_score_target(x_t, x0, ab)
    sq = (score_model(x_t, t) - target) ** 2
    w = _loss_weight(ab, weighting)
    return torch.mean(sq if w is None else w * sq)
