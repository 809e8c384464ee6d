"""Forward operators mapping a predicted clean field to sensor readings.

Three kinds are provided:

* ``DS`` (direct selection) reads the target channel at the sensor cells;
* ``CS`` (channel selection) works on a two-channel (stress, strain) field and
  reads only the channel the sensors measure;
* ``NN`` is a one-hidden-layer MLP surrogate trained to map the flattened
  target field to the readings of a different physical quantity.

All operators take batched torch tensors ``(B, C, H, W)`` and return
``(B, n)``; they are differentiable in their input.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, LayoutError, ParameterError, ShapeError, TrainingError

STRESS = "vonmises_stress"
STRAIN = "strain"
CHANNEL_TAGS = (STRESS, STRAIN)


@dataclass(frozen=True)
class SensorLayout:
    positions: tuple
    channel: str = STRESS

    def __post_init__(self):
        pos = tuple((int(r), int(c)) for r, c in self.positions)
        if len(set(pos)) != len(pos):
            raise LayoutError("sensor positions must be unique")
        object.__setattr__(self, "positions", pos)

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def rows(self) -> list[int]:
        return [r for r, _ in self.positions]

    @property
    def cols(self) -> list[int]:
        return [c for _, c in self.positions]

    def check_bounds(self, H: int, W: int) -> None:
        for r, c in self.positions:
            if not (0 <= r < H and 0 <= c < W):
                raise LayoutError(f"sensor ({r}, {c}) outside a {H}x{W} grid")

    def subset(self, indices) -> "SensorLayout":
        return SensorLayout(tuple(self.positions[i] for i in indices), self.channel)

    def with_channel(self, channel: str) -> "SensorLayout":
        return SensorLayout(self.positions, channel)

    def to_dict(self) -> dict:
        return {"channel": self.channel, "positions": [list(p) for p in self.positions]}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorLayout":
        return cls(tuple(tuple(p) for p in d["positions"]), d["channel"])

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; identifies a layout on disk."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _select(x, layout: SensorLayout, channel_index: int):
    """Gather ``x[..., channel_index, r, c]`` for each sensor, in layout order."""
    H, W = x.shape[-2:]
    layout.check_bounds(H, W)
    rows, cols = layout.rows, layout.cols
    if torch.is_tensor(x):
        return x[..., channel_index, rows, cols] if layout.n else x[..., channel_index, :0, 0]
    x = np.asarray(x)
    return x[..., channel_index, rows, cols] if layout.n else x[..., channel_index, :0, 0]


def scatter(readings, layout: SensorLayout, shape, channel_index: int = 0):
    """Adjoint of selection: readings placed at the sensor cells of a zero
    ``(C, H, W)`` field."""
    readings = np.asarray(readings)
    out = np.zeros(tuple(readings.shape[:-1]) + tuple(shape), dtype=readings.dtype)
    out[..., channel_index, layout.rows, layout.cols] = readings
    return out


def ds_apply(x0_hat, layout: SensorLayout):
    """Read a single-channel field at the sensor cells.

    Accepts ``(1, H, W)`` or ``(B, 1, H, W)``.
    """
    if x0_hat.shape[-3] != 1:
        raise ShapeError(f"direct selection needs a single-channel field, got {tuple(x0_hat.shape)}")
    return _select(x0_hat, layout, 0)


def cs_apply(x0_hat, layout: SensorLayout, tags=CHANNEL_TAGS):
    """Read the channel the sensors measure from a two-channel field."""
    if x0_hat.shape[-3] != 2:
        raise ShapeError(f"channel selection needs a two-channel field, got {tuple(x0_hat.shape)}")
    if layout.channel not in tags:
        raise LayoutError(f"layout channel {layout.channel!r} not among {tags}")
    return _select(x0_hat, layout, list(tags).index(layout.channel))


class MLPSurrogate(nn.Module):
    """``in_dim -> hidden -> out_dim`` ReLU perceptron.

    The hidden layer is always followed by a ReLU.  ``output_relu`` adds one
    after the output layer too; it is off by default because the readings are
    z-scored and therefore signed.

    ``reading_mean``/``reading_std`` are the per-sensor statistics used to
    z-score physical readings; the network itself works in z-scored units.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 100, output_relu: bool = False):
        super().__init__()
        self.in_dim, self.out_dim, self.hidden = int(in_dim), int(out_dim), int(hidden)
        self.output_relu = bool(output_relu)
        self.fc1 = nn.Linear(self.in_dim, self.hidden)
        self.fc2 = nn.Linear(self.hidden, self.out_dim)
        self.register_buffer("reading_mean", torch.zeros(self.out_dim, dtype=torch.float64))
        self.register_buffer("reading_std", torch.ones(self.out_dim, dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_dim:
            raise ShapeError(f"surrogate expects {self.in_dim} inputs, got {flat.shape[1]}")
        h = torch.relu(self.fc1(flat))
        out = self.fc2(h)
        return torch.relu(out) if self.output_relu else out

    def encode_readings(self, y):
        y = torch.as_tensor(np.asarray(y), dtype=torch.float64)
        return (y - self.reading_mean) / self.reading_std

    def decode_readings(self, y):
        y = torch.as_tensor(y, dtype=torch.float64)
        return y * self.reading_std + self.reading_mean


def nn_apply(surrogate: MLPSurrogate, x0_hat):
    """Surrogate readings for ``(1, H, W)`` or ``(B, 1, H, W)`` fields."""
    single = x0_hat.dim() == 3
    x = x0_hat.unsqueeze(0) if single else x0_hat
    if x.shape[1] != 1:
        raise ShapeError("the surrogate consumes single-channel fields")
    out = surrogate(x)
    return out[0] if single else out


@dataclass
class SurrogateOpts:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    hidden: int = 100
    output_relu: bool = False
    weight_decay: float = 0.0


def split_by_group(groups, val_fraction: float, seed: int = 0):
    """Boolean validation mask holding out whole groups (loading histories)."""
    groups = np.asarray(groups)
    unique = np.unique(groups)
    n_val = int(round(val_fraction * unique.size))
    if unique.size > 1:
        n_val = min(max(n_val, 1), unique.size - 1)
    else:
        n_val = 0
    rng = np.random.default_rng(seed)
    held = rng.choice(unique, size=n_val, replace=False) if n_val else np.array([], dtype=unique.dtype)
    return np.isin(groups, held)


def train_surrogate(fields, readings, layout: SensorLayout, opts: SurrogateOpts | None = None, groups=None):
    """Fit an MLP from normalized target fields ``(N, 1, H, W)`` or ``(N, H, W)``
    to physical readings ``(N, n)``.

    Validation holds out whole ``groups`` (loading histories); without groups
    every sample is its own group.  Returns ``(surrogate, report)`` where the
    report carries final train/validation MSE (z-scored units) and the
    validation relative error ``||pred - y|| / ||y||`` in physical units.
    """
    opts = opts or SurrogateOpts()
    x = torch.as_tensor(np.asarray(fields), dtype=torch.float32)
    x = x.reshape(x.shape[0], -1)
    y_phys = np.asarray(readings, dtype=np.float64)
    if y_phys.ndim != 2 or y_phys.shape[0] != x.shape[0]:
        raise ShapeError("readings must be (N, n) with one row per field")
    if y_phys.shape[1] != layout.n:
        raise ShapeError(f"readings have {y_phys.shape[1]} columns, layout has {layout.n} sensors")
    if x.shape[0] == 0:
        raise ParameterError("empty training set")
    groups = np.arange(x.shape[0]) if groups is None else np.asarray(groups)
    val = split_by_group(groups, opts.val_fraction, opts.seed)
    tr = ~val

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(opts.seed)
        model = MLPSurrogate(x.shape[1], layout.n, opts.hidden, opts.output_relu)
    mean = y_phys[tr].mean(axis=0)
    std = y_phys[tr].std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    model.reading_mean.copy_(torch.as_tensor(mean))
    model.reading_std.copy_(torch.as_tensor(std))
    y = model.encode_readings(y_phys).to(torch.float32)

    gen = torch.Generator().manual_seed(opts.seed)
    optim = torch.optim.Adam(model.parameters(), lr=opts.lr, weight_decay=opts.weight_decay)
    x_tr, y_tr = x[torch.as_tensor(tr)], y[torch.as_tensor(tr)]
    step = 0
    for _ in range(opts.epochs):
        perm = torch.randperm(x_tr.shape[0], generator=gen)
        for start in range(0, x_tr.shape[0], opts.batch_size):
            idx = perm[start:start + opts.batch_size]
            loss = torch.mean((model(x_tr[idx]) - y_tr[idx]) ** 2)
            if not math.isfinite(float(loss.detach())):
                raise TrainingError("non-finite surrogate loss", step=step)
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            step += 1

    with torch.no_grad():
        pred = model(x)
        train_loss = float(torch.mean((pred[torch.as_tensor(tr)] - y_tr) ** 2))
        report = {"train_loss": train_loss, "val_loss": None, "val_rel_error": None,
                  "n_train": int(tr.sum()), "n_val": int(val.sum())}
        if val.any():
            vmask = torch.as_tensor(val)
            report["val_loss"] = float(torch.mean((pred[vmask] - y[vmask]) ** 2))
            phys = model.decode_readings(pred[vmask].double()).numpy()
            report["val_rel_error"] = float(np.linalg.norm(phys - y_phys[val]) / np.linalg.norm(y_phys[val]))
    return model, report


class ForwardModel:
    """A differentiable map from normalized fields to normalized readings.

    ``encode_readings`` turns physical readings into the units the operator
    outputs, so that a residual ``y - A(x0_hat)`` is meaningful.
    """

    kind: str
    channels_required: int

    def __init__(self, layout: SensorLayout):
        self.layout = layout

    @property
    def out_dim(self) -> int:
        return self.layout.n

    def __call__(self, x0_hat: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_readings(self, y):
        raise NotImplementedError

    def subset(self, indices) -> "ForwardModel":
        raise NotImplementedError


class DirectSelection(ForwardModel):
    kind = "DS"
    channels_required = 1

    def __init__(self, layout, mean: float = 0.0, std: float = 1.0):
        super().__init__(layout)
        self.mean, self.std = float(mean), float(std)

    def __call__(self, x0_hat):
        return ds_apply(x0_hat, self.layout)

    def encode_readings(self, y):
        return (torch.as_tensor(np.asarray(y), dtype=torch.float64) - self.mean) / self.std

    def subset(self, indices):
        return DirectSelection(self.layout.subset(indices), self.mean, self.std)


class ChannelSelection(ForwardModel):
    kind = "CS"
    channels_required = 2

    def __init__(self, layout, mean: float = 0.0, std: float = 1.0, tags=CHANNEL_TAGS):
        super().__init__(layout)
        self.mean, self.std, self.tags = float(mean), float(std), tuple(tags)

    def __call__(self, x0_hat):
        return cs_apply(x0_hat, self.layout, self.tags)

    def encode_readings(self, y):
        return (torch.as_tensor(np.asarray(y), dtype=torch.float64) - self.mean) / self.std

    def subset(self, indices):
        return ChannelSelection(self.layout.subset(indices), self.mean, self.std, self.tags)


class SurrogateForward(ForwardModel):
    kind = "NN"
    channels_required = 1

    def __init__(self, layout, surrogate: MLPSurrogate, outputs=None):
        super().__init__(layout)
        self.surrogate = surrogate
        self.outputs = list(range(surrogate.out_dim)) if outputs is None else list(outputs)
        if len(self.outputs) != layout.n:
            raise ShapeError("surrogate outputs and layout sizes differ")

    def __call__(self, x0_hat):
        if x0_hat.shape[1] != 1:
            raise ShapeError("the surrogate consumes single-channel fields")
        out = self.surrogate(x0_hat.to(self.surrogate.fc1.weight.dtype)).to(x0_hat.dtype)
        if len(self.outputs) == self.surrogate.out_dim:
            return out
        return out[:, self.outputs]

    def encode_readings(self, y):
        y = torch.as_tensor(np.asarray(y), dtype=torch.float64)
        idx = self.outputs
        return (y - self.surrogate.reading_mean[idx]) / self.surrogate.reading_std[idx]

    def subset(self, indices):
        indices = list(indices)
        return SurrogateForward(self.layout.subset(indices), self.surrogate, [self.outputs[i] for i in indices])


def make_forward_model(kind: str, layout: SensorLayout, stats=None, target: str = STRESS,
                       surrogate: MLPSurrogate | None = None) -> ForwardModel:
    """Build a forward model, enforcing which sensor types each kind accepts.

    ``stats`` is a :class:`~dpsfusion.synthdata.DatasetStats` used to z-score
    readings for the selection operators.
    """
    kind = kind.upper()
    if kind == "DS":
        if layout.channel != target:
            raise ConfigError(
                f"direct selection needs sensors measuring the target field {target!r}, "
                f"got {layout.channel!r}")
        mean, std = stats.channel(target) if stats is not None else (0.0, 1.0)
        return DirectSelection(layout, mean, std)
    if kind == "CS":
        mean, std = stats.channel(layout.channel) if stats is not None else (0.0, 1.0)
        return ChannelSelection(layout, mean, std)
    if kind == "NN":
        if surrogate is None:
            raise ConfigError("the NN forward model needs a trained surrogate")
        if surrogate.out_dim != layout.n:
            raise ConfigError(f"surrogate predicts {surrogate.out_dim} readings, layout has {layout.n}")
        return SurrogateForward(layout, surrogate)
    raise ConfigError(f"unknown forward model kind {kind!r}")
