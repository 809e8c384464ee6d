"""Reconstruction error metric and the parameter-sweep harness."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, UndefinedMetricError

AXES = ("T", "zeta", "sensor_count", "placement", "snr")
CSV_HEADER = ["axis", "value", "forward_model", "repeat", "mean_wmape_pct", "std_wmape_pct", "wall_ms", "seed"]
DEFAULT_T_GRID = (100, 300, 500, 700, 900, 1100)
DEFAULT_ZETA_GRID = (0.5, 1.0, 2.0, 5.0, 10.0, 20.0)


def wmape(samples, truth) -> float:
    """Weighted mean absolute percentage error of ``M`` samples against one truth.

    ``samples`` has shape ``(M, *truth.shape)`` (a single sample without the
    leading axis is accepted).  Each sample's error is
    ``sum |x_hat - x| / sum |x|``; the result is their mean, in percent.
    """
    truth = np.asarray(truth, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape == truth.shape:
        samples = samples[None]
    if samples.shape[1:] != truth.shape:
        raise ShapeError(f"samples {samples.shape} do not match truth {truth.shape}")
    denom = np.abs(truth).sum()
    if denom == 0:
        raise UndefinedMetricError("WMAPE is undefined for an all-zero ground truth")
    per_sample = np.abs(samples - truth).reshape(samples.shape[0], -1).sum(axis=1) / denom
    return float(per_sample.mean() * 100.0)


@dataclass
class SweepSpec:
    """One axis of the parameter study plus the settings held fixed.

    ``snr_db=None`` means noiseless readings.  ``repeats`` matters for the
    randomized axes (random sensor removal, random placement, noise draws);
    repeat ``r`` runs with seed ``seed + r``.
    """

    axis: str
    values: list
    forward_model: str = "DS"
    T: int = 500
    zeta: float = 5.0
    M: int = 20
    n_test: int = 50
    n_sensors: int = 15
    placement: str = "standard"
    snr_db: float | None = None
    repeats: int = 1
    seed: int = 0
    mode: str = "full"
    chunk: int = 250
    score_weight: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {AXES}")
        if not self.values:
            raise ConfigError("sweep values must be non-empty")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepRow:
    axis: str
    value: object
    forward_model: str
    repeat: int
    mean_wmape_pct: float
    std_wmape_pct: float
    wall_ms: float
    seed: int
    per_sample: list = field(default_factory=list, repr=False)

    def csv_row(self) -> list:
        return [self.axis, self.value, self.forward_model, self.repeat, f"{self.mean_wmape_pct:.6f}",
                f"{self.std_wmape_pct:.6f}", f"{self.wall_ms:.1f}", self.seed]


def _settings(spec: SweepSpec, value) -> dict:
    s = {"T": spec.T, "zeta": spec.zeta, "n_sensors": spec.n_sensors, "placement": spec.placement,
         "snr_db": spec.snr_db}
    key = {"T": "T", "zeta": "zeta", "sensor_count": "n_sensors", "placement": "placement", "snr": "snr_db"}[spec.axis]
    s[key] = value
    s["T"] = int(s["T"])
    s["n_sensors"] = int(s["n_sensors"])
    return s


def run_sweep(spec: SweepSpec, artifacts, progress=None) -> list[SweepRow]:
    """Run every (value, repeat) cell of ``spec`` over the test subset.

    Emits one row per cell plus, per value, an aggregate row with
    ``repeat = -1`` whose std is taken over repeats.  For the sensor-count
    axis, repeat ``r`` keeps a random subset of ``n`` sensors of the base
    layout drawn with ``default_rng(seed + r)``; ``n = 0`` is unconditional.
    """
    from .pipeline import check_ready, layout_for, reconstruct, select_test_indices

    kind = spec.forward_model.upper()
    indices = select_test_indices(artifacts.dataset, spec.n_test)
    plan = []
    for value in spec.values:
        s = _settings(spec, value)
        for r in range(spec.repeats):
            seed = spec.seed + r
            if spec.axis == "sensor_count":
                base = layout_for(artifacts.dataset, spec.placement, spec.n_sensors, kind, seed=spec.seed)
                n = s["n_sensors"]
                if n > base.n:
                    raise ConfigError(f"cannot keep {n} of {base.n} sensors")
                subset = sorted(np.random.default_rng(seed).choice(base.n, size=n, replace=False).tolist())
            else:
                base = layout_for(artifacts.dataset, s["placement"], s["n_sensors"], kind, seed=seed)
                subset = None
            plan.append((value, r, seed, s, base, subset))
    # fail before any sampling if an artifact is missing
    check_ready(artifacts, kind, [p[4] for p in plan if p[4].n])

    rows = []
    for value, r, seed, s, layout, subset in plan:
        t0 = time.perf_counter()
        results = reconstruct(artifacts, kind, layout, indices, T=s["T"], zeta=float(s["zeta"]), M=spec.M,
                              seed=seed, snr_db=s["snr_db"], mode=spec.mode, chunk=spec.chunk,
                              sensor_subset=subset, score_weight=spec.score_weight, reduction=spec.reduction)
        errs = [res.wmape for res in results]
        row = SweepRow(spec.axis, value, kind, r, float(np.mean(errs)), float(np.std(errs)),
                       1000.0 * (time.perf_counter() - t0), seed, errs)
        rows.append(row)
        if progress:
            progress(row)
    for value in spec.values:
        cell = [row for row in rows if row.value == value and row.repeat >= 0]
        means = [row.mean_wmape_pct for row in cell]
        rows.append(SweepRow(spec.axis, value, kind, -1, float(np.mean(means)), float(np.std(means)),
                             float(sum(row.wall_ms for row in cell)), spec.seed))
    return rows


def aggregate(rows) -> dict:
    """``value -> mean WMAPE`` from the aggregate rows."""
    return {row.value: row.mean_wmape_pct for row in rows if row.repeat == -1}


def write_sweep(rows, spec: SweepSpec, out_dir, stem: str = "sweep") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(row.csv_row())
    meta_path = out_dir / f"{stem}.json"
    meta = {"spec": spec.to_dict(), "rows": len(rows)}
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    return csv_path, meta_path


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _json_default(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return str(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
