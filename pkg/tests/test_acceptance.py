"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criteria 7 to 10 run on the reduced benchmark profile defined in conftest.
"""

import math
import time

import numpy as np
import pytest
import torch
from torch.func import functional_call

from clihelpers import run_all, tree_bytes, write_config
from conftest import record
from dpsfusion.diffusion import forward_diffuse_step, make_linear_schedule, sample_xt_given_x0
from dpsfusion.dps import MeasurementChannel, dps_sample, estimate_x0_hat, likelihood_guidance
from dpsfusion.evaluation import SweepSpec, run_sweep, wmape
from dpsfusion.forwardmodels import DirectSelection, MLPSurrogate, SensorLayout, SurrogateOpts
from dpsfusion.pipeline import fit_surrogate, forward_model, layout_for, reconstruct, select_test_indices
from dpsfusion.scorenet import UNetConfig, build_network
from dpsfusion.synthdata import PLACEMENTS


class FirstCoordinate:
    out_dim = 1

    def __call__(self, x):
        return x[:, :1]


def _check(number, title, ok, detail):
    record(number, title, bool(ok), detail)
    assert ok, detail


def test_c01_forward_process_consistency():
    t0 = time.perf_counter()
    sched = make_linear_schedule(1000)
    rng = np.random.default_rng(0)
    n, x0 = 10_000, 1.5
    worst = 0.0
    for t in (1, sched.T // 2, sched.T):
        closed = sample_xt_given_x0(np.full(n, x0), t, sched, rng.standard_normal(n))
        x = np.full(n, x0)
        for k in range(1, t + 1):
            x = forward_diffuse_step(x, sched.beta_at(k), rng.standard_normal(n))
        ab = sched.alpha_bar_at(t)
        mean_se = math.sqrt((1 - ab) / n) * math.sqrt(2)
        var_se = (1 - ab) * math.sqrt(2 / (n - 1)) * math.sqrt(2)
        worst = max(worst, abs(closed.mean() - x.mean()) / mean_se, abs(closed.var() - x.var()) / var_se)
    elapsed = time.perf_counter() - t0
    _check(1, "forward-process consistency", worst < 3 and elapsed < 10,
           f"worst deviation {worst:.2f} SE (< 3), {elapsed:.1f} s (< 10)")


def test_c02_analytic_score_sampling():
    t0 = time.perf_counter()
    sched = make_linear_schedule(500)
    res = dps_sample(lambda x, t: -x, sched, [], 10_000, seed=0, shape=(2,), dtype=torch.float64)
    mean, std = res.samples.mean(0), res.samples.std(0)
    elapsed = time.perf_counter() - t0
    ok = np.all(np.abs(mean) < 0.05) and np.all(np.abs(std - 1) < 0.05) and elapsed < 60
    _check(2, "analytic-score sampling", ok, f"mean {np.round(mean, 4)}, std {np.round(std, 4)}, {elapsed:.1f} s")


def test_c03_tweedie_exactness():
    t0 = time.perf_counter()
    sched = make_linear_schedule(1000)
    mu = torch.tensor([0.7, -1.3], dtype=torch.float64)
    x = torch.tensor([[0.4, 2.0], [-3.0, 0.1]], dtype=torch.float64)
    err = 0.0
    for t in range(1, sched.T + 1):
        ab = sched.alpha_bar_at(t)
        s = -(x - math.sqrt(ab) * mu)
        exact = mu + math.sqrt(ab) * (x - math.sqrt(ab) * mu)
        err = max(err, float((estimate_x0_hat(x, s, t, sched) - exact).abs().max()))
    elapsed = time.perf_counter() - t0
    _check(3, "Tweedie exactness", err < 1e-6 and elapsed < 1, f"max error {err:.2e} over all t, {elapsed:.2f} s")


def test_c04_linear_gaussian_dps():
    sched = make_linear_schedule(500)
    ch = MeasurementChannel(torch.tensor([2.0]), FirstCoordinate(), zeta=0.0025, sigma=1.0)
    res = dps_sample(lambda x, t: -x, sched, [ch], 1000, seed=0, shape=(2,), dtype=torch.float64)
    exact = np.array([1.0, 0.0])
    rel = np.linalg.norm(res.samples.mean(0) - exact) / np.linalg.norm(exact)
    _check(4, "linear-Gaussian DPS", rel < 0.15, f"mean {np.round(res.samples.mean(0), 3)} vs [1, 0], rel. err {rel:.3f}")


def test_c05_mixture_mode_selection():
    sched = make_linear_schedule(500)
    mu = torch.tensor([[1.0, 1.0], [-1.0, -1.0]], dtype=torch.float64)

    def mixture_score(x, t):
        m = mu * math.sqrt(sched.alpha_bar_at(t))
        w = torch.softmax(-0.5 * ((x[:, None, :] - m[None]) ** 2).sum(-1), dim=1)
        return -(x - w @ m)

    def share(zeta):
        ch = MeasurementChannel(torch.tensor([1.0]), FirstCoordinate(), zeta=zeta, sigma=1.0)
        x = dps_sample(mixture_score, sched, [ch], 500, seed=0, shape=(2,), dtype=torch.float64).samples
        return float(np.mean(np.linalg.norm(x - 1, axis=1) < np.linalg.norm(x + 1, axis=1)))

    on, off = share(0.05), share(0.0)
    _check(5, "mixture mode selection", on >= 0.9 and off <= 0.6, f"near [1,1]: {on:.1%} guided, {off:.1%} unguided")


def _directional_error(fn, x, h, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = x.detach()
    xg = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(xg), xg)
    d = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    d /= d.norm()
    with torch.no_grad():
        fd = (fn(x + h * d) - fn(x - h * d)) / (2 * h)
    analytic = torch.sum(g * d)
    return float(abs(fd - analytic) / abs(analytic))


def _gradient_errors(dtype, h):
    sched = make_linear_schedule(100)
    gen = torch.Generator().manual_seed(1)
    errs = {}

    net = build_network(UNetConfig(base_channels=4, channel_mults=(1, 2), time_dim=8, groups=2), seed=1, dtype=dtype)
    fn = net.bind(sched)
    x = torch.randn(1, 1, 6, 5, generator=gen, dtype=dtype)
    w = torch.randn(1, 1, 6, 5, generator=gen, dtype=dtype)
    errs["score input"] = _directional_error(lambda v: torch.sum(w * fn(v, 40)), x, h)

    torch.manual_seed(0)
    mlp = MLPSurrogate(30, 4, hidden=16).to(dtype)
    u = torch.randn(3, 30, generator=gen, dtype=dtype)
    wy = torch.randn(3, 4, generator=gen, dtype=dtype)
    errs["surrogate input"] = _directional_error(lambda v: torch.sum(wy * mlp(v)), u, h)
    names = [n for n, _ in mlp.named_parameters()]
    shapes = [p.shape for _, p in mlp.named_parameters()]
    flat = torch.cat([p.detach().reshape(-1) for _, p in mlp.named_parameters()])

    def by_params(vec):
        params, at = {}, 0
        for name, shape in zip(names, shapes):
            k = math.prod(shape)
            params[name] = vec[at:at + k].reshape(shape)
            at += k
        return torch.sum(wy * functional_call(mlp, params, (u,)))

    errs["surrogate parameters"] = _directional_error(by_params, flat, h)

    layout = SensorLayout(((0, 0), (2, 3), (5, 4)))
    ch = MeasurementChannel(torch.tensor([0.5, -1.0, 2.0], dtype=dtype), DirectSelection(layout))
    xt = torch.randn(1, 1, 6, 5, generator=gen, dtype=dtype)
    g = likelihood_guidance(xt, ch, fn, 30, sched)

    def energy(v):
        return torch.mean((ch.y - ch.forward(estimate_x0_hat(v, fn(v, 30), 30, sched))) ** 2)

    d = torch.randn(xt.shape, generator=gen, dtype=dtype)
    d /= d.norm()
    with torch.no_grad():
        fd = (energy(xt + h * d) - energy(xt - h * d)) / (2 * h)
    errs["DPS likelihood"] = float(abs(fd - torch.sum(g * d)) / abs(torch.sum(g * d)))
    return errs


def test_c06_gradient_suite():
    t0 = time.perf_counter()
    e64 = _gradient_errors(torch.float64, 1e-5)
    e32 = _gradient_errors(torch.float32, 1e-2)
    elapsed = time.perf_counter() - t0
    ok = max(e64.values()) < 1e-4 and max(e32.values()) < 1e-2 and elapsed < 60
    detail = ", ".join(f"{k} {e64[k]:.1e}/{e32[k]:.1e}" for k in e64) + f" (64/32-bit), {elapsed:.1f} s"
    _check(6, "finite-difference gradient suite", ok, detail)


# benchmark settings for the trend criteria
TREND_T = 100
TREND_ZETA = 5.0


@pytest.mark.slow
def test_c07_sensor_count_trend(bench):
    t0 = time.perf_counter()
    spec = SweepSpec("sensor_count", [15, 4, 0], "DS", T=TREND_T, zeta=TREND_ZETA, M=20, n_test=50)
    rows = {r.value: r.mean_wmape_pct for r in run_sweep(spec, bench) if r.repeat == -1}
    elapsed = time.perf_counter() - t0
    order = rows[15] < rows[4] < rows[0]
    bound = math.isfinite(rows[0]) and rows[0] < 60
    detail = (f"WMAPE n=15 {rows[15]:.2f}%, n=4 {rows[4]:.2f}%, n=0 {rows[0]:.2f}% (order {'ok' if order else 'violated'}, "
              f"n=0 < 60%: {'yes' if bound else 'no'}), {elapsed / 60:.1f} min")
    _check(7, "sensor-count trend", order and bound and elapsed < 15 * 60, detail)


@pytest.mark.slow
def test_c08_step_count_trend(bench):
    idx = select_test_indices(bench.dataset, 10)
    layout = layout_for(bench.dataset, "standard", 15, "DS")
    err = {T: np.mean([r.wmape for r in reconstruct(bench, "DS", layout, idx, T=T, zeta=TREND_ZETA, M=10, seed=0)])
           for T in (100, 1100)}
    _check(8, "DS step-count trend", err[1100] <= err[100], f"WMAPE T=1100 {err[1100]:.2f}% vs T=100 {err[100]:.2f}%")


@pytest.mark.slow
def test_c09_noise_zeta_interaction(bench):
    idx = select_test_indices(bench.dataset, 10)
    layout = layout_for(bench.dataset, "standard", 15, "DS")
    err = {}
    for snr in (0.0, 30.0):
        for zeta in (0.5, 20.0):
            res = reconstruct(bench, "DS", layout, idx, T=200, zeta=zeta, M=10, seed=0, snr_db=snr)
            err[snr, zeta] = float(np.mean([r.wmape for r in res]))
    low_noise_ok = err[30.0, 20.0] < err[30.0, 0.5]
    high_noise_ok = err[0.0, 0.5] <= err[0.0, 20.0]
    detail = (f"0 dB: zeta 0.5 {err[0.0, 0.5]:.2f}% vs 20 {err[0.0, 20.0]:.2f}%; "
              f"30 dB: zeta 0.5 {err[30.0, 0.5]:.2f}% vs 20 {err[30.0, 20.0]:.2f}%")
    _check(9, "noise/zeta interaction", low_noise_ok and high_noise_ok, detail)


@pytest.mark.slow
def test_c10_one_checkpoint_serves_all_layouts(bench):
    net = bench.score_net("DS")
    before = net.parameter_vector().clone()
    idx = select_test_indices(bench.dataset, 1)
    served = []
    for placement in PLACEMENTS:
        for kind in ("DS", "NN"):
            layout = layout_for(bench.dataset, placement, 15, kind)
            if kind == "NN":
                mlp, _ = fit_surrogate(bench.dataset, bench.stats, layout, SurrogateOpts(epochs=5, seed=0))
                bench.add_surrogate(layout, mlp)
            assert forward_model(bench, kind, layout).out_dim == 15
            res = reconstruct(bench, kind, layout, idx, T=5, zeta=1.0, M=1, seed=0)
            assert bench.score_net(kind) is net and math.isfinite(res[0].wmape)
            served.append(f"{kind}/{placement}")
    unchanged = torch.equal(net.parameter_vector(), before) and len(bench.score_nets) == 1
    _check(10, "one checkpoint serves DS and NN on every placement", unchanged and len(served) == 8,
           f"{len(served)} forward-model/placement pairs, checkpoint unchanged: {unchanged}")


def test_c11_wmape_hand_example():
    value = wmape(np.array([[1.0, 3.0]]), np.array([2.0, 4.0]))
    _check(11, "WMAPE hand example", abs(value - 100 / 3) < 1e-6, f"{value:.6f}% (expected 33.333333%)")


def test_c12_end_to_end_determinism(tmp_path):
    cfg = write_config(tmp_path)
    codes = run_all(tmp_path / "a", cfg) + run_all(tmp_path / "b", cfg)
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    covered = [k for k in a if k.startswith(("dataset/", "score_", "reconstruct/"))]
    ok = codes == [0] * len(codes) and not differing and covered
    _check(12, "end-to-end determinism", ok,
           f"{len(a)} files compared ({len(covered)} dataset/checkpoint/reconstruction), differing: {differing or 'none'}")
