"""Diffusion posterior sampling.

Each reverse step takes the unconditional update with the prior score and
then subtracts ``zeta_i * grad_{x_t} ||y_i - A_i(x0_hat(x_t))||^2`` for every
measurement channel ``i``, where ``x0_hat`` is the Tweedie estimate of the
clean sample.  The gradient flows through the score network (``"full"``
mode) unless ``"detached"`` is requested.

Chains are independent.  Chain ``j`` draws all of its noise from
``numpy.random.default_rng(seeds[j])``, so a chain's trajectory does not
depend on how many other chains run alongside it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import FULL_SCORE_WEIGHT, NoiseSchedule, reverse_step_unconditional
from .errors import ParameterError, SamplingError, ShapeError

GUIDANCE_MODES = ("full", "detached")
REDUCTIONS = ("mean", "sum")


@dataclass
class MeasurementChannel:
    """One sensor group.

    ``y`` holds readings in the forward model's output units, either one
    vector ``(n,)`` shared by every chain or one row per chain ``(B, n)``.
    ``sigma`` is the assumed noise std; it is informational unless the
    guidance weight is derived from it with :func:`zeta_from_noise`.

    ``reduction`` sets how the squared residual is taken over the ``n``
    readings of one chain: ``"mean"`` divides the sum by ``n`` so that one
    ``zeta`` behaves alike for any sensor count; ``"sum"`` is the bare
    squared norm.  The two agree for a single reading.
    """

    y: torch.Tensor
    forward: object
    zeta: float = 5.0
    sigma: float = 0.0
    reduction: str = "mean"

    def __post_init__(self):
        self.y = torch.as_tensor(self.y)
        if self.y.dim() not in (1, 2):
            raise ShapeError("readings must be (n,) or (B, n)")
        out_dim = getattr(self.forward, "out_dim", None)
        if out_dim is not None and self.y.shape[-1] != out_dim:
            raise ShapeError(f"{self.y.shape[-1]} readings for a forward model with {out_dim} outputs")
        if not (math.isfinite(self.zeta) and self.zeta >= 0):
            raise ParameterError(f"zeta must be finite and >= 0, got {self.zeta}")
        if self.sigma < 0:
            raise ParameterError("sigma must be >= 0")
        if self.reduction not in REDUCTIONS:
            raise ParameterError(f"unknown reduction {self.reduction!r}; expected one of {REDUCTIONS}")

    @property
    def rho(self) -> float:
        return math.inf if self.sigma == 0 else 1.0 / self.sigma ** 2

    def rows_for(self, chain_rows) -> "MeasurementChannel":
        """Restrict per-chain readings to a subset of chains."""
        if self.y.dim() == 1:
            return self
        return MeasurementChannel(self.y[chain_rows], self.forward, self.zeta, self.sigma, self.reduction)


def zeta_from_noise(sigma: float, scale: float = 1.0, convention: str = "precision") -> float:
    """Guidance weight from an assumed noise level.

    ``"precision"``: ``scale / sigma**2``, so noisier sensors get less weight.
    ``"proportional"``: ``scale * sigma**2``, the opposite reading.
    """
    if sigma <= 0:
        raise ParameterError("sigma must be > 0")
    if convention == "precision":
        return scale / sigma ** 2
    if convention == "proportional":
        return scale * sigma ** 2
    raise ParameterError(f"unknown convention {convention!r}")


def estimate_x0_hat(x_t, score_out, t: int, sched: NoiseSchedule):
    """Tweedie estimate ``(x_t + (1 - ab) s) / sqrt(ab)``."""
    ab = sched.alpha_bar_at(t)
    return (x_t + (1.0 - ab) * score_out) / math.sqrt(ab)


def _residual_energy(channels, x0_hat):
    """``sum_i zeta_i ||y_i - A_i(x0_hat)||^2`` summed over the batch."""
    total = x0_hat.new_zeros(())
    for ch in channels:
        pred = ch.forward(x0_hat)
        y = ch.y.to(pred.dtype)
        sq = torch.sum((y - pred) ** 2)
        if ch.reduction == "mean":
            sq = sq / pred.shape[-1]
        total = total + ch.zeta * sq
    return total


def _score_and_guidance(score_fn, x_t, t, sched, channels, mode):
    """Score at ``x_t`` and ``sum_i zeta_i grad ||y_i - A_i(x0_hat)||^2``."""
    active = [ch for ch in channels if ch.zeta != 0]
    if not active:
        with torch.no_grad():
            return score_fn(x_t, t), None
    if mode == "full":
        x = x_t.detach().requires_grad_(True)
        with torch.enable_grad():
            s = score_fn(x, t)
            energy = _residual_energy(active, estimate_x0_hat(x, s, t, sched))
            (grad,) = torch.autograd.grad(energy, x)
        return s.detach(), grad
    if mode == "detached":
        with torch.no_grad():
            s = score_fn(x_t, t)
        x = x_t.detach().requires_grad_(True)
        with torch.enable_grad():
            energy = _residual_energy(active, estimate_x0_hat(x, s, t, sched))
            (grad,) = torch.autograd.grad(energy, x)
        return s, grad
    raise ParameterError(f"unknown guidance mode {mode!r}")


def likelihood_guidance(x_t, channel: MeasurementChannel, score_fn, t: int, sched: NoiseSchedule,
                        mode: str = "full"):
    """``grad_{x_t} ||y - A(x0_hat(x_t))||^2`` for one channel (weight not applied,
    reduction applied).

    ``x_t`` is a batch ``(B, ...)``; the result has the same shape.
    """
    unit = MeasurementChannel(channel.y, channel.forward, 1.0, channel.sigma, channel.reduction)
    _, grad = _score_and_guidance(score_fn, x_t, t, sched, [unit], mode)
    if not torch.isfinite(grad).all():
        raise SamplingError("non-finite guidance gradient", step=t)
    return grad


def _first_bad_chain(x):
    bad = ~torch.isfinite(x.reshape(x.shape[0], -1)).all(dim=1)
    return int(torch.nonzero(bad)[0, 0])


def run_chains(score_fn, sched: NoiseSchedule, channels, seeds, shape, *, mode: str = "full",
               score_weight: float = FULL_SCORE_WEIGHT, final_noise: bool = False,
               dtype=torch.float32, chunk: int | None = None, chain_ids=None):
    """Run one reverse chain per seed and return the final states ``(B, *shape)``.

    A seed is an int or a sequence of ints, passed to ``numpy.random.default_rng``.

    Per-chain readings in ``channels`` (``y`` of shape ``(B, n)``) are matched
    to chains by position.  ``chunk`` bounds how many chains go through the
    network at once.  ``chain_ids`` only labels chains in error messages.
    """
    seeds = [int(s) if np.ndim(s) == 0 else [int(v) for v in s] for s in seeds]
    B = len(seeds)
    for ch in channels:
        if ch.y.dim() == 2 and ch.y.shape[0] != B:
            raise ShapeError(f"{ch.y.shape[0]} reading rows for {B} chains")
    chain_ids = list(range(B)) if chain_ids is None else list(chain_ids)
    chunk = B if not chunk else int(chunk)
    out = []
    for start in range(0, B, chunk):
        rows = slice(start, start + chunk)
        sub = [ch.rows_for(rows) for ch in channels]
        out.append(_run_chunk(score_fn, sched, sub, seeds[rows], tuple(shape), mode, score_weight,
                              final_noise, dtype, chain_ids[rows]))
    return torch.cat(out, dim=0) if out else torch.empty((0,) + tuple(shape), dtype=dtype)


def _run_chunk(score_fn, sched, channels, seeds, shape, mode, score_weight, final_noise, dtype, ids):
    np_dtype = np.float32 if dtype == torch.float32 else np.float64
    rngs = [np.random.default_rng(s) for s in seeds]

    def draw():
        return torch.from_numpy(np.stack([r.standard_normal(shape, dtype=np_dtype) for r in rngs]))

    x = draw()
    for t in range(sched.T, 0, -1):
        s, guidance = _score_and_guidance(score_fn, x, t, sched, channels, mode)
        z = draw() if (t > 1 or final_noise) else torch.zeros_like(x)
        x_next = reverse_step_unconditional(x, s, sched.beta_at(t), z, score_weight)
        if guidance is not None:
            x_next = x_next - guidance
        if not torch.isfinite(x_next).all():
            raise SamplingError("non-finite chain state", step=t, chain=ids[_first_bad_chain(x_next)])
        x = x_next.detach()
    return x


@dataclass
class ReconstructionResult:
    samples: np.ndarray
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)
    wmape: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.shape[0] < 1:
            raise ParameterError("a reconstruction needs at least one sample")
        self.mean = self.samples.mean(axis=0)
        self.std = self.samples.std(axis=0)


def dps_sample(score_fn, sched: NoiseSchedule, channels, M: int, seed: int = 0, *, shape,
               mode: str = "full", score_weight: float = FULL_SCORE_WEIGHT, dtype=torch.float32,
               chunk: int | None = None, postprocess=None, truth=None) -> ReconstructionResult:
    """Draw ``M`` posterior samples; chain ``j`` is seeded with ``seed + j``.

    ``shape`` is the state shape of one chain, e.g. ``(C, H, W)``.  An empty
    ``channels`` list gives unconditional samples.  ``postprocess`` maps the raw ``(M, ...)`` array (e.g. to physical units)
    before statistics; ``truth`` in the same units enables WMAPE.
    """
    if M < 1:
        raise ParameterError("M must be >= 1")
    channels = list(channels)
    in_ch = getattr(score_fn, "in_channels", None)
    for ch in channels:
        need = getattr(ch.forward, "channels_required", None)
        if in_ch is not None and need is not None and need != in_ch:
            raise ShapeError(f"forward model needs {need}-channel fields, score has {in_ch}")
    t0 = time.perf_counter()
    x = run_chains(score_fn, sched, channels, [seed + j for j in range(M)], shape, mode=mode,
                   score_weight=score_weight, dtype=dtype, chunk=chunk)
    samples = x.numpy()
    if postprocess is not None:
        samples = postprocess(samples)
    meta = {
        "T": sched.T,
        "M": M,
        "seed": seed,
        "zeta": [ch.zeta for ch in channels],
        "sigma": [ch.sigma for ch in channels],
        "reduction": [ch.reduction for ch in channels],
        "forward_models": [getattr(ch.forward, "kind", type(ch.forward).__name__) for ch in channels],
        "mode": mode,
        "score_weight": score_weight,
        "wall_ms": 1000.0 * (time.perf_counter() - t0),
    }
    result = ReconstructionResult(samples, metadata=meta)
    if truth is not None:
        from .evaluation import wmape
        result.wmape = wmape(samples, truth)
        meta["wmape_pct"] = result.wmape
    return result


def sample_unconditional(score_fn, sched: NoiseSchedule, M: int, seed: int = 0, **kwargs) -> ReconstructionResult:
    return dps_sample(score_fn, sched, [], M, seed, **kwargs)
