"""Convolutional U-Net score estimator and its training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, dsm_loss
from .errors import ParameterError, ShapeError, TrainingError


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    time_dim: int = 64
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if self.in_channels < 1 or self.base_channels < 1 or self.time_dim < 2:
            raise ParameterError(f"invalid UNetConfig {self}")
        if len(self.channel_mults) < 1 or min(self.channel_mults) < 1:
            raise ParameterError("channel_mults needs at least one positive entry")
        if self.time_dim % 2:
            raise ParameterError("time_dim must be even")

    @property
    def depth(self) -> int:
        """Number of 2x down-samplings."""
        return len(self.channel_mults) - 1

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _groups(groups: int, channels: int) -> int:
    return math.gcd(groups, channels)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with group norm plus a residual path (1x1
    projection when the width changes); the time embedding enters as a
    per-channel bias after the first convolution."""

    def __init__(self, c_in, c_out, time_dim, groups):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(groups, c_out), c_out)
        self.time = nn.Linear(time_dim, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(groups, c_out), c_out)
        self.skip = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.time(emb)[:, :, None, None]
        return F.silu(self.norm2(self.conv2(h))) + self.skip(x)


class ScoreNetwork(nn.Module):
    """U-Net ``s(x_t, t)`` in a preconditioned form.

    With U-Net output ``F`` and ``ab = alpha_bar_t`` the score is
    ``-g * x_t + sqrt(ab / (1 - ab)) * F`` where the skip gain ``g`` is 1.
    For ``g = 1`` the Tweedie estimate of the clean field is exactly
    ``sqrt(ab) x_t + sqrt(1 - ab) F``, so its Jacobian with respect to ``x_t``
    stays bounded as ``ab -> 0`` instead of growing like ``1 / sqrt(ab)``;
    this is what keeps likelihood guidance stable at high noise.  The target
    for ``F`` has unit variance at every step.

    ``g`` is registered as a parameter so that zeroing every parameter zeroes
    the score, but it is frozen (``requires_grad=False``).

    Time enters as the fraction ``t / T`` scaled to a 1000-step clock, which
    lets a network trained at one T be sampled at another.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        c, td, g = config.in_channels, config.time_dim, config.groups
        widths = config.widths
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td), nn.SiLU())
        self.down = nn.ModuleList()
        prev = c
        for w in widths[:-1]:
            self.down.append(ResBlock(prev, w, td, g))
            prev = w
        self.mid = ResBlock(prev, widths[-1], td, g)
        self.up = nn.ModuleList(
            ResBlock(widths[i + 1] + widths[i], widths[i], td, g) for i in reversed(range(config.depth))
        )
        self.out = nn.Conv2d(widths[0], c, 1)
        self.skip_gain = nn.Parameter(torch.ones(()), requires_grad=False)

    @property
    def in_channels(self) -> int:
        return self.config.in_channels

    def forward(self, x: torch.Tensor, t_frac: torch.Tensor, alpha_bar: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        H, W = x.shape[-2:]
        m = 2 ** self.config.depth
        ph, pw = (-H) % m, (-W) % m
        h = F.pad(x, (0, pw, 0, ph)) if ph or pw else x
        emb = self.time_mlp(sinusoidal_embedding(1000.0 * t_frac.to(x.dtype), self.config.time_dim))

        skips = []
        for block in self.down:
            h = block(h, emb)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = self.mid(h, emb)
        for block in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        h = self.out(h)[..., :H, :W]
        ab = alpha_bar.to(x.dtype).reshape(-1, 1, 1, 1)
        return torch.sqrt(ab / (1.0 - ab)) * h - self.skip_gain * x

    def bind(self, sched: NoiseSchedule) -> "BoundScore":
        return BoundScore(self, sched)

    def parameter_vector(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach()

    def load_parameter_vector(self, vec) -> None:
        vec = torch.as_tensor(vec)
        n = sum(p.numel() for p in self.parameters())
        if vec.numel() != n:
            raise ShapeError(f"parameter count mismatch: expected {n}, got {vec.numel()}")
        with torch.no_grad():
            nn.utils.vector_to_parameters(vec.to(next(self.parameters()).dtype), self.parameters())


class BoundScore:
    """A score network paired with the schedule it is sampled under.

    Calling it with ``(x, t)`` returns the score; ``t`` is a python int or a
    1-D integer tensor with one step per batch item.
    """

    def __init__(self, net: ScoreNetwork, sched: NoiseSchedule):
        self.net = net
        self.sched = sched
        self.in_channels = net.in_channels
        self._alpha_bar = torch.tensor(sched.alpha_bar, dtype=torch.float64)

    def __call__(self, x: torch.Tensor, t) -> torch.Tensor:
        n = x.shape[0]
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(n)
        if int(t.min()) < 1 or int(t.max()) > self.sched.T:
            raise ParameterError(f"t outside 1..{self.sched.T}")
        ab = self._alpha_bar[t - 1]
        return self.net(x, t.to(torch.float64) / self.sched.T, ab)


def score(net: ScoreNetwork, x_t: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Score of a single ``(C, H, W)`` field or a ``(B, C, H, W)`` batch."""
    single = x_t.dim() == 3
    x = x_t.unsqueeze(0) if single else x_t
    out = net.bind(sched)(x, t)
    return out[0] if single else out


def build_network(config: UNetConfig, seed: int = 0, dtype=torch.float32) -> ScoreNetwork:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ScoreNetwork(config)
    return net.to(dtype)


@dataclass
class TrainOpts:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 0
    loss_weighting: str = "noise"


def train_score(dataset, sched: NoiseSchedule, opts: TrainOpts, config: UNetConfig | None = None,
                net: ScoreNetwork | None = None):
    """Fit a score network to normalized fields ``(N, C, H, W)`` with Adam.

    Returns ``(net, losses)`` where ``losses`` holds one value per optimizer
    step.  Training is deterministic given ``opts.seed``.
    """
    data = torch.as_tensor(np.asarray(dataset), dtype=torch.float32)
    if data.dim() != 4 or data.shape[0] == 0:
        raise ParameterError("dataset must be a non-empty (N, C, H, W) array")
    if net is None:
        config = config or UNetConfig(in_channels=int(data.shape[1]))
        net = build_network(config, seed=opts.seed)
    if data.shape[1] != net.in_channels:
        raise ShapeError(f"dataset has {data.shape[1]} channels, network expects {net.in_channels}")
    data = data.to(next(net.parameters()).dtype)

    gen = torch.Generator().manual_seed(opts.seed)
    optim = torch.optim.Adam(net.parameters(), lr=opts.lr)
    model = net.bind(sched)
    net.train()
    losses = []
    step = 0
    n = data.shape[0]
    for epoch in range(opts.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, opts.batch_size):
            batch = data[perm[start:start + opts.batch_size]]
            loss = dsm_loss(model, batch, sched, generator=gen, weighting=opts.loss_weighting)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingError("non-finite score-matching loss", step=step)
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            losses.append(value)
            step += 1
            if opts.log_every and step % opts.log_every == 0:
                print(f"epoch {epoch} step {step} loss {np.mean(losses[-opts.log_every:]):.4f}", flush=True)
    net.eval()
    return net, losses
