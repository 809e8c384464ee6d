"""On-disk artifacts.

All binary formats are little-endian.  Every writer is deterministic, so
``write(read(path))`` reproduces the original bytes.

* ``FGRD`` field tensor: magic, u32 version, u32 C, H, W, then ``C*H*W``
  float32 values, row-major per channel.
* ``SNET`` score checkpoint: magic, u32 version, u32 length + UNetConfig JSON,
  u64 parameter count, float32 parameters, u32 length + statistics JSON.
* ``SMLP`` surrogate checkpoint: magic, u32 version, u32 in/hidden/out dims,
  u8 output-ReLU flag, float32 weights (fc1.weight, fc1.bias, fc2.weight,
  fc2.bias), float64 reading mean and std, u32 length + field statistics
  JSON, 64-byte hex layout digest.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, ShapeError
from .forwardmodels import MLPSurrogate
from .scorenet import ScoreNetwork, UNetConfig, build_network
from .synthdata import Dataset, DatasetStats, GeneratorConfig

FIELD_MAGIC = b"FGRD"
SNET_MAGIC = b"SNET"
SMLP_MAGIC = b"SMLP"
VERSION = 1


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None


class _Reader:
    """Bounds-checked cursor over a byte string."""

    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        return np.frombuffer(self.take(np.dtype(dtype).itemsize * count), dtype=dtype).copy()

    def blob_json(self):
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.take(n))
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise FormatError(f"{self.what}: corrupt JSON block") from None

    def header(self, magic: bytes) -> None:
        if self.take(4) != magic:
            raise FormatError(f"{self.what}: bad magic, expected {magic.decode()}")
        (version,) = self.unpack("<I")
        if version != VERSION:
            raise FormatError(f"{self.what}: unsupported version {version}")

    def end(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _blob(obj) -> bytes:
    raw = _json_bytes(obj)
    return struct.pack("<I", len(raw)) + raw


# field tensors

def encode_field(field) -> bytes:
    x = np.asarray(field)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"a field tensor is (C, H, W), got shape {x.shape}")
    body = np.ascontiguousarray(x, dtype="<f4").tobytes()
    return FIELD_MAGIC + struct.pack("<4I", VERSION, *x.shape) + body


def decode_field(data: bytes, what: str = "field") -> np.ndarray:
    r = _Reader(data, what)
    r.header(FIELD_MAGIC)
    C, H, W = r.unpack("<3I")
    x = r.array("<f4", C * H * W).reshape(C, H, W)
    r.end()
    return x.astype(np.float32)


def write_field(path, field) -> Path:
    path = Path(path)
    path.write_bytes(encode_field(field))
    return path


def read_field(path) -> np.ndarray:
    return decode_field(Path(path).read_bytes(), str(path))


# score checkpoints

def encode_scorenet(net: ScoreNetwork, stats: DatasetStats) -> bytes:
    params = net.parameter_vector().detach().to(torch.float32).numpy().astype("<f4")
    return (SNET_MAGIC + struct.pack("<I", VERSION) + _blob(net.config.to_dict())
            + struct.pack("<Q", params.size) + params.tobytes() + _blob(stats.to_dict()))


def decode_scorenet(data: bytes, what: str = "checkpoint") -> tuple[ScoreNetwork, DatasetStats]:
    r = _Reader(data, what)
    r.header(SNET_MAGIC)
    try:
        config = UNetConfig.from_dict(r.blob_json())
    except (TypeError, ValueError, KeyError) as exc:
        raise FormatError(f"{what}: bad network config: {exc}") from None
    (count,) = r.unpack("<Q")
    params = r.array("<f4", count)
    stats = _stats(r.blob_json(), what)
    r.end()
    net = build_network(config)
    expected = sum(p.numel() for p in net.parameters())
    if count != expected:
        raise FormatError(f"{what}: {count} parameters for a network with {expected}")
    net.load_parameter_vector(torch.from_numpy(params.astype(np.float32)))
    net.eval()
    return net, stats


def write_scorenet(path, net: ScoreNetwork, stats: DatasetStats) -> Path:
    path = Path(path)
    path.write_bytes(encode_scorenet(net, stats))
    return path


def read_scorenet(path) -> tuple[ScoreNetwork, DatasetStats]:
    return decode_scorenet(Path(path).read_bytes(), str(path))


def _stats(d, what) -> DatasetStats:
    try:
        return DatasetStats.from_dict(d)
    except (TypeError, KeyError, ValueError) as exc:
        raise FormatError(f"{what}: bad normalization statistics: {exc}") from None


# surrogate checkpoints

def _mlp_tensors(mlp: MLPSurrogate):
    return [mlp.fc1.weight, mlp.fc1.bias, mlp.fc2.weight, mlp.fc2.bias]


def encode_surrogate(mlp: MLPSurrogate, stats: DatasetStats, layout_digest: str) -> bytes:
    digest = layout_digest.encode()
    if len(digest) != 64:
        raise FormatError("layout digest must be 64 hex characters")
    weights = np.concatenate([t.detach().to(torch.float32).reshape(-1).numpy() for t in _mlp_tensors(mlp)])
    return (SMLP_MAGIC + struct.pack("<I3IB", VERSION, mlp.in_dim, mlp.hidden, mlp.out_dim, mlp.output_relu)
            + weights.astype("<f4").tobytes()
            + mlp.reading_mean.numpy().astype("<f8").tobytes()
            + mlp.reading_std.numpy().astype("<f8").tobytes()
            + _blob(stats.to_dict()) + digest)


def decode_surrogate(data: bytes, what: str = "surrogate") -> tuple[MLPSurrogate, DatasetStats, str]:
    r = _Reader(data, what)
    r.header(SMLP_MAGIC)
    in_dim, hidden, out_dim, relu = r.unpack("<3IB")
    if relu > 1:
        raise FormatError(f"{what}: bad output-ReLU flag {relu}")
    mlp = MLPSurrogate(in_dim, out_dim, hidden, bool(relu))
    tensors = _mlp_tensors(mlp)
    weights = r.array("<f4", sum(t.numel() for t in tensors))
    mean = r.array("<f8", out_dim)
    std = r.array("<f8", out_dim)
    stats = _stats(r.blob_json(), what)
    digest = r.take(64).decode("ascii", errors="replace")
    r.end()
    with torch.no_grad():
        offset = 0
        for t in tensors:
            t.copy_(torch.from_numpy(weights[offset:offset + t.numel()].astype(np.float32)).reshape(t.shape))
            offset += t.numel()
        mlp.reading_mean.copy_(torch.from_numpy(mean.astype(np.float64)))
        mlp.reading_std.copy_(torch.from_numpy(std.astype(np.float64)))
    mlp.eval()
    return mlp, stats, digest


def write_surrogate(path, mlp: MLPSurrogate, stats: DatasetStats, layout_digest: str) -> Path:
    path = Path(path)
    path.write_bytes(encode_surrogate(mlp, stats, layout_digest))
    return path


def read_surrogate(path) -> tuple[MLPSurrogate, DatasetStats, str]:
    return decode_surrogate(Path(path).read_bytes(), str(path))


# datasets

def write_dataset(out_dir, dataset: Dataset, stats: DatasetStats) -> Path:
    """One two-channel (stress, strain) field file per sample plus ``manifest.json``."""
    out_dir = Path(out_dir)
    (out_dir / "fields").mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(len(dataset)):
        name = f"fields/{i:06d}.fgrd"
        write_field(out_dir / name, np.stack([dataset.stress[i], dataset.strain[i]]))
        files.append(name)
    manifest = {
        "format": "dpsfusion-dataset",
        "version": VERSION,
        "seed": dataset.config.seed,
        "config": dataset.config.to_dict(),
        "channels": list(stats.tags),
        "stats": stats.to_dict(),
        "samples": [
            {"file": f, "history": int(h), "frame": int(k), "load": float(lam), "split": str(s)}
            for f, h, k, lam, s in zip(files, dataset.history, dataset.frame, dataset.load, dataset.split)
        ],
    }
    return write_json(out_dir / "manifest.json", manifest)


def read_dataset(out_dir) -> tuple[Dataset, DatasetStats]:
    out_dir = Path(out_dir)
    path = out_dir / "manifest.json"
    if not path.exists():
        raise FormatError(f"no dataset manifest at {path}")
    m = read_json(path)
    try:
        cfg = GeneratorConfig(**m["config"])
        stats = DatasetStats.from_dict(m["stats"])
        samples = m["samples"]
        fields = np.stack([read_field(out_dir / s["file"]) for s in samples]) if samples else \
            np.zeros((0, 2, cfg.H, cfg.W), np.float32)
        history = np.array([s["history"] for s in samples], dtype=int)
        frame = np.array([s["frame"] for s in samples], dtype=int)
        load = np.array([s["load"] for s in samples], dtype=np.float64)
        split = np.array([s["split"] for s in samples])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed manifest: {exc}") from None
    if fields.shape[1:] != (2, cfg.H, cfg.W):
        raise FormatError(f"{path}: field files do not match the {cfg.H}x{cfg.W} two-channel layout")
    return Dataset(fields[:, 0].copy(), fields[:, 1].copy(), load, history, frame, split, cfg), stats


# reconstructions

def write_reconstruction(out_dir, result, sample_files: bool = True) -> Path:
    """``mean.fgrd``, ``std.fgrd``, ``sample_XXX.fgrd`` and ``result.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_field(out_dir / "mean.fgrd", result.mean)
    write_field(out_dir / "std.fgrd", result.std)
    names = []
    if sample_files:
        for j, s in enumerate(result.samples):
            names.append(f"sample_{j:03d}.fgrd")
            write_field(out_dir / names[-1], s)
    meta = dict(result.metadata)
    meta["wmape_pct"] = result.wmape
    meta["samples"] = names
    meta.pop("wall_ms", None)
    return write_json(out_dir / "result.json", meta)


def read_reconstruction(out_dir):
    from .dps import ReconstructionResult

    out_dir = Path(out_dir)
    meta = read_json(out_dir / "result.json")
    names = meta.get("samples") or []
    if not names:
        raise FormatError(f"{out_dir}: reconstruction has no sample files")
    samples = np.stack([read_field(out_dir / n) for n in names])
    res = ReconstructionResult(samples, wmape=meta.get("wmape_pct"), metadata=meta)
    return res


# rendering

def to_pgm(channel, lo: float | None = None, hi: float | None = None) -> bytes:
    """8-bit binary PGM scaled so ``lo -> 0`` and ``hi -> 255``.

    The bounds default to the array's own min and max.  When they coincide
    every pixel is 128.
    """
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("PGM rendering needs a 2-D array")
    if not np.isfinite(x).all():
        raise FormatError("cannot render non-finite values")
    lo = float(x.min()) if lo is None else lo
    hi = float(x.max()) if hi is None else hi
    if hi == lo:
        pix = np.full(x.shape, 128, dtype=np.uint8)
    else:
        pix = np.round(np.clip((x - lo) / (hi - lo), 0.0, 1.0) * 255.0).astype(np.uint8)
    H, W = x.shape
    return f"P5\n{W} {H}\n255\n".encode() + pix.tobytes()


def from_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise FormatError("not an 8-bit P5 PGM written by this package")
    W, H = (int(v) for v in parts[1].split())
    pix = np.frombuffer(parts[3], dtype=np.uint8)
    if pix.size != H * W:
        raise FormatError("PGM pixel count does not match its header")
    return pix.reshape(H, W)


def render_field(field_path, out_dir, stem: str | None = None) -> list[Path]:
    """PGM per channel (scaled over the whole file) plus a CSV of raw values.

    Outputs are named after ``stem``, by default the input file's stem.
    """
    field_path, out_dir = Path(field_path), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x = read_field(field_path).astype(np.float64)
    if not np.isfinite(x).all():
        raise FormatError(f"{field_path}: non-finite values cannot be rendered")
    lo, hi = float(x.min()), float(x.max())
    stem = stem or field_path.stem
    written = []
    for c in range(x.shape[0]):
        path = out_dir / (f"{stem}.pgm" if x.shape[0] == 1 else f"{stem}_c{c}.pgm")
        path.write_bytes(to_pgm(x[c], lo, hi))
        written.append(path)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "row", "col", "value"])
        for c, i, j in np.ndindex(*x.shape):
            w.writerow([c, i, j, repr(float(np.float32(x[c, i, j])))])
    written.append(csv_path)
    return written
