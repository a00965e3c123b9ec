"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The desk-scale comparisons (criteria 5 to 7) share the victims, seeds and
baseline runs defined in :mod:`gradinvert.protocol`.
"""

import math
import time
import zlib

import numpy as np
import pytest

from gradinvert import protocol
from gradinvert.attack import AttackConfig, activation_trace, reconstruct
from gradinvert.checks import PRIMITIVE_CASES, check_primitive, numeric_gradient, relative_error
from gradinvert.cli import main
from gradinvert.data import default_threads
from gradinvert.fl import GradientCapture, decode_capture, encode_capture, victim_round
from gradinvert.labels import restore_label
from gradinvert.losses import LossWeights, build_objective, combined_loss
from gradinvert.metrics import mse, psnr, ssim
from gradinvert.models import build_model, convnet_s, param_gradient


def test_criterion_1_gradient_checks(acceptance_line):
    start = time.perf_counter()
    worst, count = {}, 0
    for name in sorted(PRIMITIVE_CASES):
        rng = np.random.default_rng(zlib.crc32(b"acceptance-" + name.encode()))
        errs = [check_primitive(name, rng).error for _ in range(50)]
        worst[name] = max(errs)
        count += len(errs)
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    ok = not bad and elapsed < 60
    acceptance_line(1, ok, f"{len(worst)} primitives x 50 instances, max rel err {max(worst.values()):.1e}, "
                           f"{elapsed:.1f}s")
    assert not bad, bad
    assert elapsed < 60


def test_criterion_2_double_backprop(acceptance_line):
    start = time.perf_counter()
    spec = convnet_s(10)
    _, params = build_model(spec, 0)
    rng = np.random.default_rng(2)
    victim = rng.random(spec.input_shape)
    prior = np.clip(victim + 0.1 * rng.standard_normal(spec.input_shape), 0, 1)
    capture = victim_round(spec, params, victim, 4)
    trace = activation_trace(spec, params, prior)
    x0 = rng.uniform(0.05, 0.95, spec.input_shape)
    obj = build_objective(spec, params, capture.gradient, 4, trace, LossWeights(), init=x0)
    _, _, analytic = obj.evaluate(x0)
    coords = rng.choice(x0.size, 32, replace=False)

    def loss_at(x):
        return combined_loss(capture, spec, params, x, trace, LossWeights(), label=4)[0]

    numeric = numeric_gradient(loss_at, x0, coords=coords)
    err = relative_error(analytic.ravel()[coords], numeric.ravel()[coords])
    elapsed = time.perf_counter() - start
    acceptance_line(2, err < 1e-4 and elapsed < 120, f"rel err {err:.1e} at 32 coordinates, {elapsed:.1f}s")
    assert err < 1e-4
    assert elapsed < 120


def test_criterion_3_idlg_exactness(acceptance_line):
    start = time.perf_counter()
    spec = convnet_s(10)
    rng = np.random.default_rng(3)
    hits = 0
    for trial in range(1000):
        _, params = build_model(spec, trial)
        label = int(rng.integers(spec.num_classes))
        g = param_gradient(spec, params, rng.random(spec.input_shape), label)
        hits += restore_label(g, spec) == label
    elapsed = time.perf_counter() - start
    acceptance_line(3, hits == 1000 and elapsed < 120, f"{hits}/1000 labels recovered, {elapsed:.1f}s")
    assert hits == 1000
    assert elapsed < 120


def test_criterion_4_zero_loss_fixed_point(acceptance_line):
    _, setups = protocol.victim_setups(count=1)
    victim, spec, params, capture = setups[0]
    # TV of a non-constant image is positive, so the global minimum needs alpha_tv = 0
    config = AttackConfig().with_weights(alpha_tv=0.0)
    res = reconstruct(capture, spec, params, victim.image, config, init=victim.image)
    final_mse = mse(res.image, victim.image)
    ok = res.loss <= 1e-10 and final_mse == 0.0
    acceptance_line(4, ok, f"L_r {res.loss:.1e}, final MSE {final_mse}")
    assert res.loss <= 1e-10
    assert final_mse == 0.0


@pytest.fixture(scope="module")
def untrained():
    start = time.perf_counter()
    comparison = protocol.compare(0, workers=default_threads())
    return comparison, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_5_baseline_viability(untrained, acceptance_line):
    comparison, _ = untrained
    subset = comparison.viability_indices()
    psnrs = [comparison.baseline_psnr[i] for i in subset]
    base_time = sum(comparison.baseline[i].wall_time for i in subset)
    good = sum(p >= 20.0 for p in psnrs)
    ok = good >= 0.7 * len(psnrs) and base_time < 15 * 60
    acceptance_line(5, ok, f"{good}/{len(psnrs)} victims >= 20 dB, {base_time:.0f}s")
    assert len(psnrs) == 20
    assert good >= 0.7 * len(psnrs)
    assert base_time < 15 * 60


@pytest.mark.slow
def test_criterion_6_prior_attack_beats_baseline(untrained, acceptance_line):
    comparison, total_time = untrained
    report = comparison.report
    d_psnr = [r.d_psnr for r in report.rows]
    mean_psnr, mean_mse = report.mean("d_psnr"), report.mean("d_mse")
    p = protocol.sign_test_p(d_psnr)
    wins = sum(d > 0 for d in d_psnr)
    ok = mean_psnr > 0 and mean_mse < 0 and p < 0.05 and total_time < 45 * 60
    acceptance_line(6, ok, f"mean d_psnr {mean_psnr:+.2f} dB, mean d_mse {mean_mse:+.2e}, "
                           f"{wins}/{len(d_psnr)} wins, sign test p {p:.3f}, {total_time:.0f}s")
    assert len(d_psnr) >= 20
    assert mean_psnr > 0
    assert mean_mse < 0
    assert p < 0.05
    assert total_time < 45 * 60


@pytest.mark.slow
def test_criterion_7_trained_stage(untrained, acceptance_line):
    comparison, _ = untrained
    trained = protocol.compare(200, workers=default_threads())
    norms0 = [cap.norm for cap in comparison.captures]
    norms200 = [cap.norm for cap in trained.captures]
    norm_drop = np.mean(norms200) < np.mean(norms0)
    base0, base200 = np.mean(comparison.baseline_psnr), np.mean(trained.baseline_psnr)
    d_psnr = trained.report.mean("d_psnr")
    ok = norm_drop and base200 < base0 and d_psnr > 0
    acceptance_line(7, ok, f"mean grad norm {np.mean(norms0):.3g} -> {np.mean(norms200):.3g}, "
                           f"mean baseline PSNR {base0:.2f} -> {base200:.2f} dB, trained d_psnr {d_psnr:+.2f} dB")
    assert norm_drop
    assert base200 < base0
    assert d_psnr > 0


def test_criterion_8_determinism_and_serialization(tmp_path, acceptance_line):
    assert main(["generate", "--out", str(tmp_path / "data"), "--seed", "8"]) == 0
    manifest = tmp_path / "data" / "manifest.txt"
    image = next((tmp_path / "data" / "images").glob("victim_*.pgm"))
    label = [line.split()[1] for line in manifest.read_text().splitlines() if image.name in line][0]
    cap = tmp_path / "v.ginv"
    assert main(["simulate", "--model", "convnet-s", "--params-seed", "1", "--image", str(image),
                 "--label", label, "--out", str(cap)]) == 0
    (tmp_path / "a.cfg").write_text("iterations = 50\nrestarts = 2\nlog_every = 5\n")
    outs = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        assert main(["attack", "--capture", str(cap), "--model", "convnet-s", "--params-seed", "1",
                     "--priors", str(manifest), "--config", str(tmp_path / "a.cfg"),
                     "--ground-truth", str(image), "--out", str(out)]) == 0
        outs.append({name: (out / name).read_bytes() for name in ("results.csv", "traces.csv")})
    csv_same = outs[0] == outs[1]

    rng = np.random.default_rng(8)
    exact = 0
    for _ in range(100):
        n = int(rng.integers(1, 6000))
        g = rng.standard_normal(n) * np.exp(rng.uniform(-50, 50, n))
        label = None if rng.random() < 0.3 else int(rng.integers(0, 100))
        c = GradientCapture(g, f"{int(rng.integers(2**63)):016x}", label, int(rng.integers(0, 1000)))
        back = decode_capture(encode_capture(c))
        exact += back == c and back.gradient.tobytes() == c.gradient.tobytes()
    acceptance_line(8, csv_same and exact == 100, f"CSV bytes identical: {csv_same}, GINV1 round trips {exact}/100")
    assert csv_same
    assert exact == 100


def test_criterion_9_metric_oracles(acceptance_line):
    rng = np.random.default_rng(9)
    a = rng.random((1, 16, 16))
    b = rng.random((1, 16, 16))
    zero = np.zeros((1, 16, 16))
    checks = {
        "mse identical": mse(a, a) == 0.0,
        "psnr identical": psnr(a, a) == math.inf,
        "ssim identical": abs(ssim(a, a) - 1.0) <= 1e-9,
        "mse offset": abs(mse(zero, zero + 0.1) - 0.01) <= 1e-12,
        "psnr 20 dB": abs(psnr(zero, zero + 0.1) - 20.0) <= 1e-9,
        "ssim symmetry": abs(ssim(a, b) - ssim(b, a)) <= 1e-12,
    }
    failed = [k for k, v in checks.items() if not v]
    acceptance_line(9, not failed, f"{len(checks) - len(failed)}/{len(checks)} fixtures")
    assert not failed
