"""``dpsfusion`` command line.

Commands share a working directory given by ``--out``: ``gen-data`` writes
``<out>/dataset``, ``train-score`` writes ``<out>/score_<C>ch.snet``,
``train-surrogate`` writes ``<out>/surrogate_<digest>.smlp``, and the
sampling commands read those unless paths are passed explicitly.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import torch

from . import formats, plotting
from .config import RunConfig, load_config
from .diffusion import make_linear_schedule
from .errors import (ConfigError, DegenerateStatsError, FormatError, LayoutError, NumericalError, ParameterError,
                     ShapeError, UndefinedMetricError)
from .evaluation import SweepSpec, run_sweep, write_sweep
from .forwardmodels import STRESS, SurrogateOpts
from .pipeline import (Artifacts, fit_score_network, fit_surrogate, layout_for, reconstruct, sample_fields,
                       select_test_indices, target_tags)
from .scorenet import TrainOpts, UNetConfig
from .synthdata import DatasetStats, generate_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="RunConfig JSON file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", default=".", help="working/output directory (default: .)")
    p.add_argument("--threads", type=int, default=0, help="torch threads, 0 = library default")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpsfusion", description="Sparse-sensor field reconstruction with diffusion posterior sampling.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset and its manifest")
    _common(p)

    p = sub.add_parser("train-score", help="train a score network (SNET checkpoint)")
    _common(p)
    p.add_argument("--data", help="dataset directory (default: <out>/dataset)")
    p.add_argument("--kind", choices=["DS", "CS", "NN"], help="forward model the network serves (default: config)")

    p = sub.add_parser("train-surrogate", help="train the sensor surrogate (SMLP checkpoint)")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--placement", help="override dps.placement")
    p.add_argument("--n-sensors", type=int, help="override dps.n_sensors")

    p = sub.add_parser("sample", help="unconditional samples")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="SNET file (default: <out>/score_<C>ch.snet)")
    p.add_argument("--kind", choices=["DS", "CS", "NN"])

    p = sub.add_parser("reconstruct", help="DPS reconstruction of test samples")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--surrogate", help="SMLP file for the NN forward model")
    p.add_argument("--no-sample-files", action="store_true", help="write only mean/std per test sample")

    p = sub.add_parser("sweep", help="parameter sweep to CSV + JSON sidecar + figure")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--surrogate", action="append", default=[], help="SMLP file(s); repeatable")

    p = sub.add_parser("render", help="field tensor file -> PGM image(s) + CSV of raw values")
    _common(p, config_required=False)
    p.add_argument("fields", nargs="+", help="FGRD files")
    return parser


def _config(args) -> RunConfig:
    return load_config(args.config, seed=args.seed)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_dataset(args, out: Path):
    return formats.read_dataset(_existing(args.data or out / "dataset", "dataset directory"))


def _kind(args, cfg: RunConfig) -> str:
    return (getattr(args, "kind", None) or cfg.dps.forward_model).upper()


def _load_net(args, out: Path, kind: str, stats: DatasetStats):
    c = len(target_tags(kind))
    path = _existing(args.checkpoint or out / f"score_{c}ch.snet", "score checkpoint")
    net, net_stats = formats.read_scorenet(path)
    if net.in_channels != c:
        raise ConfigError(f"{path} is a {net.in_channels}-channel network; {kind} needs {c}")
    if net_stats != stats.select(target_tags(kind)):
        raise FormatError(f"{path} was trained under different normalization statistics than the dataset")
    return net


def _load_surrogates(paths, stats: DatasetStats, artifacts: Artifacts) -> None:
    for p in paths:
        mlp, s_stats, digest = formats.read_surrogate(_existing(p, "surrogate checkpoint"))
        if s_stats != stats.select((STRESS,)):
            raise FormatError(f"{p} was trained under different normalization statistics than the dataset")
        artifacts.surrogates[digest] = mlp


def _surrogate_path(out: Path, layout) -> Path:
    return out / f"surrogate_{layout.digest()[:16]}.smlp"


def cmd_gen_data(args) -> None:
    cfg, out = _config(args), _out(args)
    ds = generate_dataset(cfg.dataset.generator(cfg.seed))
    stats = DatasetStats.from_fields(ds.fields(mask=ds.train), ("vonmises_stress", "strain"))
    formats.write_dataset(out / "dataset", ds, stats)
    formats.write_json(out / "run_config.json", cfg.to_dict())
    print(f"wrote {len(ds)} samples to {out / 'dataset'}")


def cmd_train_score(args) -> None:
    cfg, out = _config(args), _out(args)
    ds, stats = _load_dataset(args, out)
    kind = _kind(args, cfg)
    tags = target_tags(kind)
    sn = cfg.scorenet
    config = UNetConfig(len(tags), sn.base_channels, tuple(sn.channel_mults), sn.time_dim, sn.groups)
    sched = make_linear_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
    opts = TrainOpts(sn.epochs, sn.batch_size, sn.lr, cfg.seed, loss_weighting=sn.loss_weighting)
    net, losses = fit_score_network(ds, stats, kind, config, opts, sched)
    path = formats.write_scorenet(out / f"score_{len(tags)}ch.snet", net, stats.select(tags))
    with open(out / f"score_{len(tags)}ch_losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(losses))
    print(f"wrote {path} (final loss {np.mean(losses[-10:]):.4f})")


def cmd_train_surrogate(args) -> None:
    cfg, out = _config(args), _out(args)
    ds, stats = _load_dataset(args, out)
    layout = layout_for(ds, args.placement or cfg.dps.placement,
                        cfg.dps.n_sensors if args.n_sensors is None else args.n_sensors, "NN", seed=cfg.seed)
    if layout.n == 0:
        raise ConfigError("a surrogate needs at least one sensor")
    s = cfg.surrogate
    opts = SurrogateOpts(s.epochs, s.batch_size, s.lr, cfg.seed, s.val_fraction, s.hidden, s.output_relu,
                         s.weight_decay)
    mlp, report = fit_surrogate(ds, stats, layout, opts)
    path = formats.write_surrogate(_surrogate_path(out, layout), mlp, stats.select((STRESS,)), layout.digest())
    formats.write_json(path.with_suffix(".json"), {"layout": layout.to_dict(), "digest": layout.digest(),
                                                   "report": report})
    print(f"wrote {path} (validation relative error {report['val_rel_error']})")


def cmd_sample(args) -> None:
    cfg, out = _config(args), _out(args)
    ds, stats = _load_dataset(args, out)
    kind = _kind(args, cfg)
    net = _load_net(args, out, kind, stats)
    d = cfg.dps
    res = sample_fields(net, stats.select(target_tags(kind)), (net.in_channels, ds.config.H, ds.config.W),
                        T=d.T, M=d.M, seed=cfg.seed, score_weight=d.score_weight, chunk=d.chunk)
    path = formats.write_reconstruction(out / "sample", res)
    plotting.plot_fields([s[0] for s in res.samples[:6]], out / "sample" / "samples.png")
    print(f"wrote {d.M} samples to {path.parent}")


def _artifacts(args, cfg, out, kind):
    ds, stats = _load_dataset(args, out)
    art = Artifacts(ds, stats, {len(target_tags(kind)): _load_net(args, out, kind, stats)})
    if kind == "NN":
        paths = args.surrogate if isinstance(args.surrogate, list) else [args.surrogate] if args.surrogate else []
        if not paths:
            paths = sorted(out.glob("surrogate_*.smlp"))
        _load_surrogates(paths, stats, art)
    return art


def cmd_reconstruct(args) -> None:
    cfg, out = _config(args), _out(args)
    d = cfg.dps
    kind = d.forward_model.upper()
    art = _artifacts(args, cfg, out, kind)
    layout = layout_for(art.dataset, d.placement, d.n_sensors, kind, seed=cfg.seed) if d.n_sensors else None
    indices = select_test_indices(art.dataset, d.n_test)
    results = reconstruct(art, kind, layout, indices, T=d.T, zeta=d.zeta, M=d.M, seed=cfg.seed, snr_db=d.snr_db,
                          mode=d.mode, score_weight=d.score_weight, chunk=d.chunk, reduction=d.reduction)
    root = out / "reconstruct"
    rows = []
    truth = art.dataset.fields(target_tags(kind))
    for k, (idx, res) in enumerate(zip(indices, results)):
        sub = root / f"test_{int(idx):05d}"
        formats.write_reconstruction(sub, res, sample_files=not args.no_sample_files)
        formats.write_field(sub / "truth.fgrd", truth[idx])
        if k < 4:
            plotting.plot_reconstruction(truth[idx], res, sub / "reconstruction.png", layout)
        rows.append([int(idx), f"{res.wmape:.6f}"])
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "wmape_pct"])
        w.writerows(rows)
    formats.write_json(root / "run.json", {"config": cfg.to_dict(),
                                           "layout": None if layout is None else layout.to_dict()})
    errs = [r.wmape for r in results]
    print(f"{kind}: {len(results)} test samples, mean WMAPE {np.mean(errs):.3f}%")


def cmd_sweep(args) -> None:
    cfg, out = _config(args), _out(args)
    d, sw = cfg.dps, cfg.sweep
    kind = d.forward_model.upper()
    art = _artifacts(args, cfg, out, kind)
    spec = SweepSpec(sw.axis, list(sw.values), kind, d.T, d.zeta, d.M, d.n_test, d.n_sensors, d.placement,
                     d.snr_db, sw.repeats, cfg.seed, d.mode, d.chunk, d.score_weight, d.reduction)

    def progress(row):
        print(f"{row.axis}={row.value} repeat={row.repeat} WMAPE {row.mean_wmape_pct:.3f}%", flush=True)

    rows = run_sweep(spec, art, progress)
    csv_path, _ = write_sweep(rows, spec, out / "sweep", stem=f"sweep_{sw.axis}")
    plotting.plot_sweep(rows, csv_path.with_suffix(".png"))
    print(f"wrote {csv_path}")


def cmd_render(args) -> None:
    out = _out(args)
    paths = [Path(f) for f in args.fields]
    stems = [p.stem for p in paths]
    for f in paths:
        # test_00012/mean.fgrd and test_00031/mean.fgrd would collide
        stem = f"{f.parent.name}_{f.stem}" if stems.count(f.stem) > 1 else f.stem
        for p in formats.render_field(_existing(f, "field file"), out, stem):
            print(f"wrote {p}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-score": cmd_train_score,
    "train-surrogate": cmd_train_surrogate,
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep,
    "render": cmd_render,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 0:
        print("dpsfusion: error: --threads must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        COMMANDS[args.command](args)
    except (ConfigError, ParameterError) as exc:
        print(f"dpsfusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, LayoutError, DegenerateStatsError, UndefinedMetricError, OSError) as exc:
        print(f"dpsfusion: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"dpsfusion: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
