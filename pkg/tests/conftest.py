import hashlib
import json
from pathlib import Path

import pytest
import torch

import dpsfusion
from dpsfusion import formats
from dpsfusion.diffusion import make_linear_schedule
from dpsfusion.forwardmodels import CHANNEL_TAGS
from dpsfusion.pipeline import Artifacts, fit_score_network
from dpsfusion.scorenet import TrainOpts, UNetConfig
from dpsfusion.synthdata import DatasetStats, GeneratorConfig, generate_dataset

torch.set_num_threads(1)

# Reduced benchmark profile: default dataset, a narrow U-Net and a short
# training run, sized so the whole acceptance suite fits on one CPU core.
BENCH = {
    "dataset_seed": 0,
    "unet": {"in_channels": 1, "base_channels": 8, "channel_mults": [1, 2, 4], "time_dim": 64, "groups": 8},
    "train": {"epochs": 40, "batch_size": 64, "lr": 1e-3, "seed": 0, "loss_weighting": "noise"},
    "schedule_T": 1000,
}

_RESULTS = []


def record(number: int, title: str, ok: bool, detail: str) -> None:
    _RESULTS.append((number, title, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")


def _source_digest() -> str:
    h = hashlib.sha256(json.dumps(BENCH, sort_keys=True).encode())
    for p in sorted(Path(dpsfusion.__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def bench(request):
    """Dataset, statistics and the trained 1-channel score network.

    The checkpoint is cached under the pytest cache, keyed by the profile and
    the package source, so edits to the library retrain it.
    """
    ds = generate_dataset(GeneratorConfig(seed=BENCH["dataset_seed"]))
    stats = DatasetStats.from_fields(ds.fields(mask=ds.train), CHANNEL_TAGS)
    cache = Path(request.config.cache.mkdir("dpsfusion-bench")) / f"score_{_source_digest()}.snet"
    if cache.exists():
        net, _ = formats.read_scorenet(cache)
    else:
        u = BENCH["unet"]
        cfg = UNetConfig(u["in_channels"], u["base_channels"], tuple(u["channel_mults"]), u["time_dim"], u["groups"])
        net, _ = fit_score_network(ds, stats, "DS", cfg, TrainOpts(**BENCH["train"]),
                                   make_linear_schedule(BENCH["schedule_T"]))
        formats.write_scorenet(cache, net, stats.select(("vonmises_stress",)))
    net.eval()
    return Artifacts(ds, stats, {1: net})
