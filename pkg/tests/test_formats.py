import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpsfusion import formats
from dpsfusion.dps import ReconstructionResult
from dpsfusion.errors import FormatError, ShapeError
from dpsfusion.forwardmodels import STRAIN, STRESS, MLPSurrogate, SensorLayout
from dpsfusion.scorenet import UNetConfig, build_network
from dpsfusion.synthdata import DatasetStats, GeneratorConfig, generate_dataset

STATS = DatasetStats((STRESS,), (65.1, ), (66.4,))


@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
@settings(max_examples=50, deadline=None)
def test_field_round_trip(x):
    data = formats.encode_field(x)
    assert data[:4] == b"FGRD"
    assert struct.unpack("<4I", data[4:20]) == (1,) + x.shape
    back = formats.decode_field(data)
    np.testing.assert_array_equal(back, x)
    assert formats.encode_field(back) == data


def test_field_layout_is_little_endian_row_major():
    x = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    data = formats.encode_field(x)
    assert data[20:] == struct.pack("<6f", 0, 1, 2, 3, 4, 5)


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:4] + struct.pack("<I", 2) + d[8:],
    lambda d: d[:-1],
    lambda d: d + b"\0",
    lambda d: d[:10],
    lambda d: b"",
])
def test_malformed_fields_are_format_errors(mutate):
    data = formats.encode_field(np.zeros((1, 2, 2), np.float32))
    with pytest.raises(FormatError):
        formats.decode_field(mutate(data))


def test_field_shape_errors():
    with pytest.raises(ShapeError):
        formats.encode_field(np.zeros(4))


def test_scorenet_round_trip(tmp_path):
    net = build_network(UNetConfig(in_channels=1, base_channels=4, channel_mults=(1, 2), time_dim=8, groups=2), seed=1)
    path = formats.write_scorenet(tmp_path / "a.snet", net, STATS)
    net2, stats2 = formats.read_scorenet(path)
    assert stats2 == STATS
    assert net2.config == net.config
    assert torch.equal(net2.parameter_vector(), net.parameter_vector())
    formats.write_scorenet(tmp_path / "b.snet", net2, stats2)
    assert (tmp_path / "a.snet").read_bytes() == (tmp_path / "b.snet").read_bytes()
    x = torch.randn(2, 1, 6, 5)
    t = torch.tensor([0.1, 0.9], dtype=torch.float64)
    ab = torch.tensor([0.9, 0.1], dtype=torch.float64)
    assert torch.equal(net(x, t, ab), net2(x, t, ab))


def test_scorenet_corruption(tmp_path):
    net = build_network(UNetConfig(base_channels=4, channel_mults=(1,), time_dim=8, groups=2))
    data = formats.encode_scorenet(net, STATS)
    with pytest.raises(FormatError):
        formats.decode_scorenet(b"SNEX" + data[4:])
    with pytest.raises(FormatError):
        formats.decode_scorenet(data[:-3])
    # claim one parameter fewer than the config implies
    cfg_len = struct.unpack("<I", data[8:12])[0]
    at = 12 + cfg_len
    (count,) = struct.unpack("<Q", data[at:at + 8])
    with pytest.raises(FormatError):
        formats.decode_scorenet(data[:at] + struct.pack("<Q", count - 1) + data[at + 8:])


def test_surrogate_round_trip(tmp_path):
    torch.manual_seed(0)
    mlp = MLPSurrogate(12, 3, hidden=5, output_relu=False)
    with torch.no_grad():
        mlp.reading_mean.copy_(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64) / 3)
        mlp.reading_std.copy_(torch.tensor([0.1, 0.2, 0.7], dtype=torch.float64))
    digest = SensorLayout(((0, 0), (1, 1), (2, 2)), STRAIN).digest()
    p = formats.write_surrogate(tmp_path / "s.smlp", mlp, STATS, digest)
    mlp2, stats2, digest2 = formats.read_surrogate(p)
    assert digest2 == digest and stats2 == STATS
    assert torch.equal(mlp2.reading_mean, mlp.reading_mean)
    x = torch.randn(2, 12)
    assert torch.equal(mlp(x), mlp2(x))
    assert formats.encode_surrogate(mlp2, stats2, digest2) == p.read_bytes()
    with pytest.raises(FormatError):
        formats.decode_surrogate(p.read_bytes()[:-1])
    with pytest.raises(FormatError):
        formats.encode_surrogate(mlp, STATS, "abc")


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(GeneratorConfig(histories=4, test_histories=1, frames=3))
    stats = DatasetStats.from_fields(ds.fields(mask=ds.train), (STRESS, STRAIN))
    formats.write_dataset(tmp_path / "a", ds, stats)
    ds2, stats2 = formats.read_dataset(tmp_path / "a")
    assert stats2 == stats
    np.testing.assert_array_equal(ds2.stress, ds.stress)
    np.testing.assert_array_equal(ds2.strain, ds.strain)
    np.testing.assert_array_equal(ds2.split, ds.split)
    assert ds2.config == ds.config
    formats.write_dataset(tmp_path / "b", ds2, stats2)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    with pytest.raises(FormatError):
        formats.read_dataset(tmp_path / "nowhere")


def test_reconstruction_round_trip(tmp_path):
    samples = np.random.default_rng(0).normal(size=(3, 1, 4, 5)).astype(np.float32)
    res = ReconstructionResult(samples, wmape=12.5, metadata={"T": 100, "zeta": [5.0], "seed": 1})
    formats.write_reconstruction(tmp_path / "r", res)
    back = formats.read_reconstruction(tmp_path / "r")
    np.testing.assert_array_equal(back.samples, samples)
    assert back.wmape == 12.5 and back.metadata["T"] == 100
    formats.write_reconstruction(tmp_path / "r2", back)
    for name in ("mean.fgrd", "std.fgrd", "sample_002.fgrd", "result.json"):
        assert (tmp_path / "r" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_pgm_constant_field_is_mid_gray():
    data = formats.to_pgm(np.full((3, 4), 7.0))
    assert data.startswith(b"P5\n4 3\n255\n")
    assert set(formats.from_pgm(data).ravel().tolist()) == {128}


def test_pgm_scaling_and_round_trip():
    x = np.array([[0.0, 1.0], [2.0, 4.0]])
    pix = formats.from_pgm(formats.to_pgm(x))
    assert pix.tolist() == [[0, 64], [128, 255]]
    assert formats.to_pgm(x) == formats.to_pgm(x)
    with pytest.raises(FormatError):
        formats.from_pgm(b"P6\n1 1\n255\n\0")
    with pytest.raises(FormatError):
        formats.to_pgm(np.array([[np.nan]]))


def test_render_scales_over_whole_file(tmp_path):
    x = np.stack([np.zeros((2, 2)), np.full((2, 2), 10.0)]).astype(np.float32)
    formats.write_field(tmp_path / "f.fgrd", x)
    written = formats.render_field(tmp_path / "f.fgrd", tmp_path / "out")
    names = sorted(p.name for p in written)
    assert names == ["f.csv", "f_c0.pgm", "f_c1.pgm"]
    assert set(formats.from_pgm((tmp_path / "out" / "f_c0.pgm").read_bytes()).ravel()) == {0}
    assert set(formats.from_pgm((tmp_path / "out" / "f_c1.pgm").read_bytes()).ravel()) == {255}
    lines = (tmp_path / "out" / "f.csv").read_text().splitlines()
    assert lines[0] == "channel,row,col,value" and len(lines) == 9
    assert lines[-1] == "1,1,1,10.0"
