"""Glue between the dataset, trained networks and the sampler."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import FULL_SCORE_WEIGHT, NoiseSchedule, make_linear_schedule
from .dps import MeasurementChannel, ReconstructionResult, run_chains
from .errors import ConfigError
from .evaluation import wmape
from .forwardmodels import (STRAIN, STRESS, MLPSurrogate, SensorLayout, SurrogateOpts, make_forward_model,
                            train_surrogate)
from .scorenet import ScoreNetwork, TrainOpts, UNetConfig, train_score
from .synthdata import Dataset, DatasetStats, add_noise, denormalize, noise_std, normalize, place_sensors

FORWARD_KINDS = ("DS", "CS", "NN")


def target_tags(kind: str) -> tuple:
    """Channels of the field the score network generates for a forward model kind."""
    return (STRESS, STRAIN) if kind.upper() == "CS" else (STRESS,)


def sensor_channel(kind: str) -> str:
    """Quantity the sensors measure: stress for DS, strain otherwise."""
    return STRESS if kind.upper() == "DS" else STRAIN


@dataclass
class Artifacts:
    """Everything a reconstruction needs besides its settings."""

    dataset: Dataset
    stats: DatasetStats
    score_nets: dict = field(default_factory=dict)   # channel count -> ScoreNetwork
    surrogates: dict = field(default_factory=dict)   # layout digest -> MLPSurrogate

    def score_net(self, kind: str) -> ScoreNetwork:
        c = len(target_tags(kind))
        if c not in self.score_nets:
            raise ConfigError(f"no {c}-channel score network for forward model {kind}")
        return self.score_nets[c]

    def surrogate(self, layout: SensorLayout) -> MLPSurrogate:
        try:
            return self.surrogates[layout.digest()]
        except KeyError:
            raise ConfigError(f"no surrogate trained for layout {layout.digest()[:12]}") from None

    def add_surrogate(self, layout: SensorLayout, surrogate: MLPSurrogate) -> None:
        self.surrogates[layout.digest()] = surrogate


def layout_for(dataset: Dataset, strategy: str, n: int, kind: str, seed: int = 0) -> SensorLayout:
    """Sensor layout ranked on the training split of the stress field."""
    layout = place_sensors(strategy, n, dataset.stress[dataset.train], seed=seed)
    return layout.with_channel(sensor_channel(kind))


def physical_readings(dataset: Dataset, indices, layout: SensorLayout) -> np.ndarray:
    source = dataset.stress if layout.channel == STRESS else dataset.strain
    return np.asarray(source[np.asarray(indices)][:, layout.rows, layout.cols], dtype=np.float64)


def forward_model(artifacts: Artifacts, kind: str, layout: SensorLayout):
    surrogate = artifacts.surrogate(layout) if kind.upper() == "NN" else None
    return make_forward_model(kind, layout, artifacts.stats, STRESS, surrogate)


def check_ready(artifacts: Artifacts, kind: str, layouts) -> None:
    """Raise ``ConfigError`` if anything needed for ``kind`` is missing."""
    if kind.upper() not in FORWARD_KINDS:
        raise ConfigError(f"unknown forward model {kind!r}")
    artifacts.score_net(kind)
    if kind.upper() == "NN":
        for layout in layouts:
            artifacts.surrogate(layout)


def fit_score_network(dataset: Dataset, stats: DatasetStats, kind: str, config: UNetConfig,
                      opts: TrainOpts, sched: NoiseSchedule):
    """Train the score network a forward-model kind needs on the training split."""
    tags = target_tags(kind)
    if config.in_channels != len(tags):
        raise ConfigError(f"{kind} needs a {len(tags)}-channel network, config has {config.in_channels}")
    x = normalize(dataset.fields(tags, dataset.train), stats.select(tags))
    return train_score(x, sched, opts, config)


def fit_surrogate(dataset: Dataset, stats: DatasetStats, layout: SensorLayout, opts: SurrogateOpts):
    """Train the stress-to-reading surrogate for one sensor layout."""
    train = dataset.train
    x = normalize(dataset.fields((STRESS,), train), stats.select((STRESS,)))
    y = physical_readings(dataset, np.flatnonzero(train), layout)
    return train_surrogate(x, y, layout, opts, groups=dataset.history[train])


def select_test_indices(dataset: Dataset, n: int) -> np.ndarray:
    """Up to ``n`` test samples spread evenly over the test split.

    Frames whose stress field is identically zero are skipped: WMAPE is
    undefined for them.
    """
    idx = np.flatnonzero(dataset.test)
    idx = idx[np.abs(dataset.stress[idx]).reshape(idx.size, -1).sum(axis=1) > 0]
    if n >= idx.size:
        return idx
    return idx[np.unique(np.round(np.linspace(0, idx.size - 1, n)).astype(int))]


def sample_fields(net: ScoreNetwork, stats: DatasetStats, shape, *, T: int = 500, M: int = 20, seed: int = 0,
                  score_weight: float = FULL_SCORE_WEIGHT, chunk: int | None = 250) -> ReconstructionResult:
    """Unconditional samples in physical units.

    Chain ``j`` uses ``default_rng([seed, 0, j])``, the same stream as the first
    sample of a :func:`reconstruct` call, so a zero-sensor reconstruction of
    that sample reproduces these fields exactly.
    """
    sched = make_linear_schedule(T)
    t0 = time.perf_counter()
    x = run_chains(net.bind(sched), sched, [], [(seed, 0, j) for j in range(M)], tuple(shape),
                   score_weight=score_weight, chunk=chunk)
    meta = {"T": T, "M": M, "seed": seed, "zeta": [], "sigma": [], "forward_model": None,
            "score_weight": score_weight, "n_sensors": 0, "wall_ms": 1000.0 * (time.perf_counter() - t0)}
    return ReconstructionResult(denormalize(x.numpy(), stats), metadata=meta)


def reconstruct(artifacts: Artifacts, kind: str, layout: SensorLayout | None, indices, *, T: int = 500,
                zeta: float = 5.0, M: int = 20, seed: int = 0, snr_db: float | None = None,
                mode: str = "full", score_weight: float = FULL_SCORE_WEIGHT, chunk: int | None = 250,
                sensor_subset=None, reduction: str = "mean") -> list[ReconstructionResult]:
    """DPS reconstructions of several dataset samples in one batched run.

    Chain ``j`` of sample ``i`` (position in ``indices``) draws its noise from
    ``default_rng([seed, i, j])``.  Readings are taken from the true field of the
    sensed channel, z-scored, and optionally corrupted at ``snr_db`` with
    noise from ``SeedSequence(seed, spawn_key=(i,))``.  ``layout=None`` or
    an empty subset gives unconditional sampling.  WMAPE is computed on the
    stress channel in physical units.
    """
    kind = kind.upper()
    indices = np.asarray(indices, dtype=int)
    net = artifacts.score_net(kind)
    tags = target_tags(kind)
    stats = artifacts.stats.select(tags)
    sched = make_linear_schedule(T)
    score_fn = net.bind(sched)
    H, W = artifacts.dataset.config.H, artifacts.dataset.config.W

    channels = []
    sigma = 0.0 if snr_db is None else noise_std(snr_db)
    if layout is not None and layout.n:
        fwd = forward_model(artifacts, kind, layout)
        keep = list(range(layout.n)) if sensor_subset is None else list(sensor_subset)
        if keep:
            if len(keep) != layout.n:
                fwd = fwd.subset(keep)
            y_phys = physical_readings(artifacts.dataset, indices, fwd.layout)
            y = fwd.encode_readings(y_phys).numpy()
            if snr_db is not None:
                y = np.stack([add_noise(row, snr_db, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,))))
                              for i, row in enumerate(y)])
            y = torch.as_tensor(np.repeat(y, M, axis=0))
            channels.append(MeasurementChannel(y, fwd, zeta, sigma, reduction))

    seeds = [(seed, i, j) for i in range(indices.size) for j in range(M)]
    t0 = time.perf_counter()
    x = run_chains(score_fn, sched, channels, seeds, (len(tags), H, W), mode=mode,
                   score_weight=score_weight, chunk=chunk)
    wall = 1000.0 * (time.perf_counter() - t0)
    phys = denormalize(x.numpy().reshape(indices.size, M, len(tags), H, W), stats)
    truth = artifacts.dataset.fields(tags)[indices]

    results = []
    for i, idx in enumerate(indices):
        meta = {"T": T, "M": M, "seed": seed, "zeta": [zeta] * len(channels),
                "sigma": [sigma] * len(channels), "forward_model": kind, "mode": mode,
                "score_weight": score_weight, "reduction": reduction, "sample_index": int(idx),
                "n_sensors": channels[0].forward.out_dim if channels else 0,
                "snr_db": snr_db, "wall_ms": wall / indices.size}
        res = ReconstructionResult(phys[i], metadata=meta)
        res.wmape = wmape(phys[i][:, 0], truth[i][0])
        meta["wmape_pct"] = res.wmape
        if len(tags) == 2:
            meta["wmape_pct_strain"] = wmape(phys[i][:, 1], truth[i][1])
        results.append(res)
    return results
