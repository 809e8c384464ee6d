import json

import numpy as np
import pytest

from clihelpers import run_all, tree_bytes, write_config
from dpsfusion import formats
from dpsfusion.cli import main
from dpsfusion.evaluation import CSV_HEADER


@pytest.fixture(scope="module")
def ds_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = write_config(root)
    codes = run_all(root / "work", cfg)
    return root, cfg, codes


def test_all_stages_succeed(ds_run):
    _, _, codes = ds_run
    assert codes == [0] * len(codes)


def test_expected_artifacts(ds_run):
    root, _, _ = ds_run
    work = root / "work"
    assert (work / "dataset" / "manifest.json").exists()
    assert (work / "score_1ch.snet").read_bytes()[:4] == b"SNET"
    assert (work / "sample" / "mean.fgrd").read_bytes()[:4] == b"FGRD"
    header = (work / "sweep" / "sweep_sensor_count.csv").read_text().splitlines()[0]
    assert header == ",".join(CSV_HEADER)
    assert (work / "sweep" / "sweep_sensor_count.png").exists()
    summary = (work / "reconstruct" / "summary.csv").read_text().splitlines()
    assert summary[0] == "sample_index,wmape_pct" and len(summary) == 3
    assert all(np.isfinite(float(line.split(",")[1])) for line in summary[1:])
    assert list((work / "render").glob("*.pgm")) and list((work / "render").glob("*.csv"))


def test_sample_matches_sensorless_reconstruction(tmp_path, ds_run):
    root, _, _ = ds_run
    # chunk = M so both commands push the same chain batches through the network;
    # float32 convolutions may round differently at other batch sizes
    cfg = write_config(tmp_path, dps={"n_sensors": 0, "chunk": 2})
    work = root / "work"
    assert main(["sample", "--config", str(cfg), "--out", str(tmp_path / "s"), "--data", str(work / "dataset"),
                 "--checkpoint", str(work / "score_1ch.snet")]) == 0
    assert main(["reconstruct", "--config", str(cfg), "--out", str(tmp_path / "r"), "--data",
                 str(work / "dataset"), "--checkpoint", str(work / "score_1ch.snet")]) == 0
    first = sorted((tmp_path / "r" / "reconstruct").glob("test_*"))[0]
    for j in range(2):
        assert (first / f"sample_{j:03d}.fgrd").read_bytes() == (tmp_path / "s" / "sample" / f"sample_{j:03d}.fgrd").read_bytes()


def test_rerun_is_bytewise_identical(tmp_path, ds_run):
    root, cfg, _ = ds_run
    assert run_all(tmp_path / "again", cfg) == [0] * 6
    assert tree_bytes(root / "work") == tree_bytes(tmp_path / "again")


def test_nn_pipeline(tmp_path):
    cfg = write_config(tmp_path, dps={"forward_model": "NN"})
    assert run_all(tmp_path / "w", cfg, "NN") == [0] * 7
    assert len(list((tmp_path / "w").glob("surrogate_*.smlp"))) == 1


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["no-such-command"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["gen-data"])
    assert e.value.code == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1, "dps": {"zetta": 3}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    noseed = tmp_path / "noseed.json"
    noseed.write_text("{}")
    assert main(["gen-data", "--config", str(noseed), "--out", str(tmp_path)]) == 1
    assert main(["gen-data", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["gen-data", "--config", str(noseed), "--threads", "-2"]) == 1


def test_data_errors_exit_2(tmp_path, ds_run):
    root, cfg, _ = ds_run
    assert main(["reconstruct", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 2
    broken = tmp_path / "broken.fgrd"
    broken.write_bytes(b"FGRD\x01")
    assert main(["render", "--out", str(tmp_path), str(broken)]) == 2
    ckpt = tmp_path / "bad.snet"
    ckpt.write_bytes(b"NOPE" + bytes(40))
    assert main(["sample", "--config", str(cfg), "--out", str(tmp_path), "--data", str(root / "work" / "dataset"),
                 "--checkpoint", str(ckpt)]) == 2


def test_numerical_failure_exits_3(tmp_path, ds_run):
    root, _, _ = ds_run
    cfg = write_config(tmp_path, dps={"zeta": 1e30})
    work = root / "work"
    code = main(["reconstruct", "--config", str(cfg), "--out", str(tmp_path), "--data", str(work / "dataset"),
                 "--checkpoint", str(work / "score_1ch.snet")])
    assert code == 3


def test_render_constant_field(tmp_path):
    formats.write_field(tmp_path / "c.fgrd", np.full((1, 3, 2), 4.5, np.float32))
    assert main(["render", "--out", str(tmp_path / "o"), str(tmp_path / "c.fgrd")]) == 0
    pix = formats.from_pgm((tmp_path / "o" / "c.pgm").read_bytes())
    assert (pix == 128).all()


def test_render_keeps_same_named_files_apart(tmp_path):
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        formats.write_field(tmp_path / d / "mean.fgrd", np.zeros((1, 2, 2), np.float32))
    assert main(["render", "--out", str(tmp_path / "o"), str(tmp_path / "a" / "mean.fgrd"),
                 str(tmp_path / "b" / "mean.fgrd")]) == 0
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["a_mean.csv", "a_mean.pgm", "b_mean.csv", "b_mean.pgm"]
