"""Synthetic plate-field dataset, z-score statistics, sensor placement and
measurement noise.

Each loading history is a smooth stress pattern (a diagonal band plus a few
Gaussian bumps) scaled by a saturating load curve; strain follows a
Ramberg-Osgood law, which makes it a strictly increasing but nonlinear
function of stress.

Random streams: history ``h`` of a dataset with seed ``s`` draws from
``PCG64(SeedSequence(s, spawn_key=(h,)))``, so any history can be regenerated
on its own and the dataset does not depend on generation order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateStatsError, ParameterError
from .forwardmodels import CHANNEL_TAGS, STRESS, STRAIN, SensorLayout

PLACEMENTS = ("high_variance", "low_variance", "standard", "random")


@dataclass(frozen=True)
class GeneratorConfig:
    H: int = 38
    W: int = 24
    sigma_y: float = 300.0
    E: float = 200000.0
    ramberg_alpha: float = 0.002
    ramberg_n: float = 5.0
    bumps: int = 4
    frames: int = 20
    histories: int = 110
    test_histories: int = 10
    band_width: float = 0.18
    load_rate: float = 3.0
    seed: int = 0

    def __post_init__(self):
        positive = ("H", "W", "sigma_y", "E", "ramberg_alpha", "ramberg_n", "frames", "histories",
                    "band_width", "load_rate")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ParameterError(f"GeneratorConfig.{name} must be > 0")
        if self.bumps < 0 or not 0 <= self.test_histories < self.histories:
            raise ParameterError("need bumps >= 0 and 0 <= test_histories < histories")

    def to_dict(self) -> dict:
        return asdict(self)


def history_rng(seed: int, history: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(history,))))


def load_curve(lam, rate: float = 3.0):
    """Saturating amplitude ``(1 - exp(-rate lam)) / (1 - exp(-rate))``; 0 at 0, 1 at 1."""
    return (1.0 - np.exp(-rate * np.asarray(lam, dtype=np.float64))) / (1.0 - math.exp(-rate))


def ramberg_osgood_strain(stress, cfg: GeneratorConfig = GeneratorConfig()):
    stress = np.asarray(stress, dtype=np.float64)
    return stress / cfg.E + cfg.ramberg_alpha * (stress / cfg.sigma_y) ** cfg.ramberg_n


def history_pattern(cfg: GeneratorConfig, history: int) -> np.ndarray:
    """Max-normalized spatial pattern of one loading history, ``(H, W)``."""
    rng = history_rng(cfg.seed, history)
    centers = rng.uniform(0.1, 0.9, size=(cfg.bumps, 2))
    widths = rng.uniform(0.05, 0.15, size=cfg.bumps)
    weights = rng.uniform(0.3, 1.0, size=cfg.bumps)
    u = (np.arange(cfg.H, dtype=np.float64) / max(cfg.H - 1, 1))[:, None]
    v = (np.arange(cfg.W, dtype=np.float64) / max(cfg.W - 1, 1))[None, :]
    pattern = np.exp(-((u - v) ** 2) / (2 * cfg.band_width ** 2))
    for (cu, cv), s, w in zip(centers, widths, weights):
        pattern = pattern + w * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * s ** 2))
    return pattern / pattern.max()


@dataclass
class Dataset:
    """Physical-unit fields, one row per (history, frame)."""

    stress: np.ndarray      # (N, H, W) float32
    strain: np.ndarray      # (N, H, W) float32
    load: np.ndarray        # (N,) load factor lambda
    history: np.ndarray     # (N,) history index
    frame: np.ndarray       # (N,) frame index within the history
    split: np.ndarray       # (N,) "train" | "test"
    config: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __len__(self):
        return int(self.stress.shape[0])

    def fields(self, tags=CHANNEL_TAGS, mask=None) -> np.ndarray:
        """Stack the requested channels into ``(N, C, H, W)``."""
        source = {STRESS: self.stress, STRAIN: self.strain}
        out = np.stack([source[t] for t in tags], axis=1)
        return out if mask is None else out[mask]

    @property
    def train(self) -> np.ndarray:
        return self.split == "train"

    @property
    def test(self) -> np.ndarray:
        return self.split == "test"

    def samples(self):
        """Iterate ``(stress, strain, load)`` triples."""
        for i in range(len(self)):
            yield self.stress[i], self.strain[i], float(self.load[i])


def generate_dataset(cfg: GeneratorConfig = GeneratorConfig()) -> Dataset:
    """Deterministic dataset; the last ``test_histories`` histories form the test split."""
    lams = np.linspace(0.0, 1.0, cfg.frames)
    amps = load_curve(lams, cfg.load_rate)
    stress, loads, hist, frame = [], [], [], []
    for h in range(cfg.histories):
        base = cfg.sigma_y * history_pattern(cfg, h)
        for f, (lam, g) in enumerate(zip(lams, amps)):
            stress.append(g * base)
            loads.append(lam)
            hist.append(h)
            frame.append(f)
    stress = np.asarray(stress, dtype=np.float64)
    strain = ramberg_osgood_strain(stress, cfg)
    hist = np.asarray(hist)
    split = np.where(hist >= cfg.histories - cfg.test_histories, "test", "train")
    return Dataset(stress.astype(np.float32), strain.astype(np.float32), np.asarray(loads), hist,
                   np.asarray(frame), split, cfg)


@dataclass(frozen=True)
class DatasetStats:
    """Per-channel scalar mean and std used for z-scoring."""

    tags: tuple
    mean: tuple
    std: tuple

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if not len(self.tags) == len(self.mean) == len(self.std):
            raise ParameterError("tags, mean and std must have equal length")
        for tag, s in zip(self.tags, self.std):
            if not s >= 1e-12:
                raise DegenerateStatsError(f"std of channel {tag!r} is {s}")

    @classmethod
    def from_fields(cls, fields, tags) -> "DatasetStats":
        x = np.asarray(fields, dtype=np.float64)
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        return cls(tags, mean, std)

    def channel(self, tag: str) -> tuple[float, float]:
        i = self.tags.index(tag)
        return self.mean[i], self.std[i]

    def select(self, tags) -> "DatasetStats":
        idx = [self.tags.index(t) for t in tags]
        return DatasetStats([self.tags[i] for i in idx], [self.mean[i] for i in idx],
                            [self.std[i] for i in idx])

    def to_dict(self) -> dict:
        return {"tags": list(self.tags), "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d) -> "DatasetStats":
        return cls(d["tags"], d["mean"], d["std"])


def _per_channel(values):
    return np.asarray(values, dtype=np.float64).reshape((-1, 1, 1))


def _apply(fields, stats, fn):
    src = np.asarray(fields)
    if src.ndim < 3 or src.shape[-3] != len(stats.tags):
        raise ParameterError(f"fields of shape {src.shape} do not match {len(stats.tags)} channels")
    out = fn(src.astype(np.float64), _per_channel(stats.mean), _per_channel(stats.std))
    return out.astype(src.dtype) if src.dtype.kind == "f" else out


def normalize(fields, stats: DatasetStats):
    """``(x - mean) / std`` per channel; fields are ``(..., C, H, W)``."""
    return _apply(fields, stats, lambda x, m, s: (x - m) / s)


def denormalize(fields, stats: DatasetStats):
    return _apply(fields, stats, lambda x, m, s: x * s + m)


def lattice_shape(n: int, H: int, W: int) -> tuple[int, int]:
    """Factor ``n = R * C`` with aspect ratio closest to the grid's."""
    best = None
    for R in range(1, n + 1):
        if n % R:
            continue
        C = n // R
        if R > H or C > W:
            continue
        score = abs(math.log((R / C) / (H / W)))
        if best is None or score < best[0]:
            best = (score, R, C)
    if best is None:
        raise ParameterError(f"no R x C lattice of {n} sensors fits a {H}x{W} grid")
    return best[1], best[2]


def place_sensors(strategy: str, n: int, train_fields, seed: int = 0, channel: str = STRESS) -> SensorLayout:
    """Choose ``n`` sensor cells.

    ``train_fields`` is ``(N, H, W)``: the channel whose per-element variance
    ranks cells for the variance strategies (ties go to the lower row-major
    index).  ``standard`` is a near-uniform ``R x C`` lattice; ``random`` is a
    seeded draw without replacement.
    """
    x = np.asarray(train_fields, dtype=np.float64)
    if x.ndim != 3:
        raise ParameterError("train_fields must be (N, H, W)")
    H, W = x.shape[1:]
    if not 0 <= n <= H * W:
        raise ParameterError(f"cannot place {n} sensors on a {H}x{W} grid")
    if strategy in ("high_variance", "low_variance"):
        var = x.var(axis=0).ravel()
        key = -var if strategy == "high_variance" else var
        flat = np.argsort(key, kind="stable")[:n]
    elif strategy == "standard":
        if n == 0:
            flat = np.array([], dtype=int)
        else:
            R, C = lattice_shape(n, H, W)
            rows = [H * (2 * r + 1) // (2 * R) for r in range(R)]
            cols = [W * (2 * c + 1) // (2 * C) for c in range(C)]
            flat = np.array([r * W + c for r in rows for c in cols])
    elif strategy == "random":
        flat = np.random.default_rng(seed).choice(H * W, size=n, replace=False)
    else:
        raise ParameterError(f"unknown placement strategy {strategy!r}")
    return SensorLayout(tuple((int(i) // W, int(i) % W) for i in flat), channel)


def noise_std(snr_db: float) -> float:
    """Noise std for unit-variance readings: ``10 ** (-snr_db / 20)``."""
    return 0.0 if math.isinf(snr_db) and snr_db > 0 else 10.0 ** (-snr_db / 20.0)


def add_noise(y, snr_db: float, rng: np.random.Generator):
    """Add i.i.d. Gaussian noise to normalized readings at the given SNR."""
    y = np.asarray(y, dtype=np.float64)
    sd = noise_std(snr_db)
    if sd == 0.0:
        return y.copy()
    return y + sd * rng.standard_normal(y.shape)
