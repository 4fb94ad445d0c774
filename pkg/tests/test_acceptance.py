"""End-to-end acceptance checks.

Each test prints one ``ACCEPTANCE <n>: PASS/FAIL`` line. The desk-scale
checks (2, 10, 11) share two full pipeline runs trained at the same seed in
session-scoped fixtures; everything else is self-contained and fast.
"""

import hashlib
import math
import time

import numpy as np
import pytest

from cvmd.diffusion import build_schedule, forward_noise, guided_noise
from cvmd.evaluation import shannon_entropy, spread
from cvmd.kinematics import (
    extract_params,
    rollout,
    state_from_first_chord,
)
from cvmd.pipeline import (
    cmd_fit_uq,
    cmd_predict,
    cmd_prepare,
    cmd_train_diffusion,
    cmd_train_vqvae,
    desk_config,
    maneuver_match_rate,
)
from cvmd.scenario import load_dataset
from cvmd.uncertainty import ClusterStats, GuidanceConfig, adaptive_guidance, mahalanobis
from cvmd.vqvae import Codebook, classify, encode, load_vqvae, quantize


def report(number, description, ok):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {number}: {status} - {description}")
    assert ok, f"acceptance criterion {number} failed: {description}"


# ---------------------------------------------------------------------------
# Shared desk-scale pipeline runs


def _full_run(run_dir, seed=0):
    cfg = desk_config(seed=seed)
    cmd_prepare(cfg, run_dir)
    cmd_train_vqvae(cfg, run_dir)
    cmd_train_diffusion(cfg, run_dir)
    cmd_fit_uq(cfg, run_dir)
    return cfg


@pytest.fixture(scope="session")
def run_a(tmp_path_factory):
    """First trained pipeline plus predictions at the comparison scales."""
    run_dir = tmp_path_factory.mktemp("desk") / "a"
    start = time.monotonic()
    cfg = _full_run(run_dir)
    reports = {}
    for w in (0.0, 1.0, 5.0, "uc"):
        reports[w] = cmd_predict(cfg, run_dir, guidance=w)
    elapsed = time.monotonic() - start
    return {"dir": run_dir, "cfg": cfg, "reports": reports,
            "elapsed_s": elapsed}


@pytest.fixture(scope="session")
def run_b(tmp_path_factory):
    """Independent rerun at the same seed, for the determinism check."""
    run_dir = tmp_path_factory.mktemp("desk") / "b"
    cfg = _full_run(run_dir)
    cmd_predict(cfg, run_dir, guidance="uc")
    return {"dir": run_dir, "cfg": cfg}


# ---------------------------------------------------------------------------
# Criteria


def _smooth_trajectory(rng, rate_hz=25.0, duration_s=6.0):
    tau = 1.0 / rate_hz
    n = int(duration_s * rate_hz)
    t = np.arange(1, n + 1) * tau
    v0 = rng.uniform(15.0, 35.0)
    a = rng.uniform(-1.0, 1.0)
    amp = rng.uniform(0.0, 0.08)
    freq = rng.uniform(0.05, 0.3)
    heading = amp * np.sin(2 * np.pi * freq * t)
    speed = np.maximum(v0 + a * t, 1.0)
    return np.stack([
        np.cumsum(speed * np.cos(heading) * tau),
        np.cumsum(speed * np.sin(heading) * tau),
    ])


def test_criterion_1_kinematic_round_trip():
    rng = np.random.default_rng(0)
    tau = 1.0 / 25.0
    start = time.monotonic()
    hits = 0
    for _ in range(500):
        traj = _smooth_trajectory(rng)
        s0 = state_from_first_chord((0.0, 0.0), traj, tau)
        rebuilt = rollout(s0, extract_params(traj, s0, tau), tau)
        err = float(np.mean(np.linalg.norm(rebuilt - traj, axis=0)))
        hits += err < 0.1
    elapsed = time.monotonic() - start
    report(1, f"round trip ADE < 0.1 m on {hits}/500 trajectories "
              f"in {elapsed:.1f} s", hits == 500 and elapsed < 10.0)


def test_criterion_2_drivability(run_a):
    all_reports = [r for reports in run_a["reports"].values() for r in reports]
    drivable = sum(r.drivable for r in all_reports)
    report(2, f"{drivable}/{len(all_reports)} prediction sets fully drivable "
              "(limit violations <= 1e-6)", drivable == len(all_reports))


def test_criterion_3_noise_schedule():
    sched = build_schedule(1000, 0.008)
    ok = (sched.alpha_bar[0] == 1.0
          and sched.alpha_bar[-1] == 0.0
          and bool(np.all(np.diff(sched.alpha_bar) < 0))
          and abs(sched.alpha_bar[500] - 0.4930) < 1e-3)
    report(3, f"cosine schedule endpoints exact, strictly decreasing, "
              f"midpoint {sched.alpha_bar[500]:.4f}", ok)


def test_criterion_4_gaussianization():
    sched = build_schedule(1000, 0.008)
    rng = np.random.default_rng(1)
    x0 = rng.exponential(2.0, 10_000) - 2.0  # deliberately non-Gaussian
    xt = forward_noise(x0, 1000, rng.standard_normal(10_000), sched)
    ok = abs(float(xt.mean())) < 0.05 and 0.9 < float(xt.var()) < 1.1
    report(4, f"terminal noising: mean {xt.mean():+.4f}, var {xt.var():.4f}",
           ok)


def test_criterion_5_guidance_algebra():
    rng = np.random.default_rng(2)
    ok = True
    for _ in range(1000):
        a = rng.normal(0, 1, 8)
        b = rng.normal(0, 1, 8)
        c = rng.normal(0, 1, 8)
        w = rng.uniform(-3, 13)
        ok &= bool(np.array_equal(guided_noise(a, b, 0.0), a))
        ok &= bool(np.array_equal(guided_noise(a, b, -1.0), b))
        ok &= bool(np.all(np.abs(guided_noise(a + c, b + c, w)
                                 - (guided_noise(a, b, w) + c)) < 1e-12))
    report(5, "w=0 / w=-1 identities exact, affine property within 1e-12 "
              "over 1000 trials", ok)


def test_criterion_6_quantization_scan():
    rng = np.random.default_rng(3)
    ok = True
    for _ in range(1000):
        q = int(rng.integers(2, 32))
        dim = int(rng.integers(1, 10))
        entries = rng.normal(0, 1, (q, dim)).round(1)  # rounding makes ties
        z = rng.normal(0, 1, dim).round(1)
        res = quantize(z, Codebook(entries))
        dists = np.sum((entries - z) ** 2, axis=1)
        best = int(np.flatnonzero(dists == dists.min())[0])
        ok &= res.index == best + 1
        ok &= bool(np.array_equal(res.z_q, entries[best]))
    report(6, "quantize equals brute-force scan (ties to lowest index) on "
              "1000 pairs", ok)


def test_criterion_7_mahalanobis():
    rng = np.random.default_rng(4)
    worst = 0.0
    zero_ok = True
    for _ in range(1000):
        dim = int(rng.integers(2, 8))
        a = rng.normal(0, 1, (dim, dim))
        cov = a @ a.T + 0.1 * np.eye(dim)
        mu = rng.normal(0, 2, dim)
        z = rng.normal(0, 2, dim)
        stats = ClusterStats(q=1, mu=mu, cov=cov, count=99, eps=1e-6)
        expect = math.sqrt((mu - z) @ np.linalg.inv(cov) @ (mu - z))
        worst = max(worst, abs(mahalanobis(stats, z) - expect) / expect)
        zero_ok &= mahalanobis(stats, mu) == 0.0
    report(7, f"Mahalanobis matches explicit inverse (worst rel err "
              f"{worst:.2e}), zero at the mean", worst < 1e-6 and zero_ok)


def test_criterion_8_adaptive_guidance():
    cfg = GuidanceConfig(w_min=1.0, w_max=7.0, t_c=10.0)
    got = (adaptive_guidance(0.0, cfg), adaptive_guidance(5.0, cfg),
           adaptive_guidance(10.0, cfg), adaptive_guidance(42.0, cfg),
           adaptive_guidance(math.inf, cfg))
    ok = got == (7.0, 4.0, 1.0, 1.0, 1.0)
    report(8, f"adaptive scale (0, 5, 10, 42, inf) -> {got}", ok)


def test_criterion_9_entropy():
    uniform = shannon_entropy([5, 5, 5])
    pure = shannon_entropy([10, 0, 0])
    ok = abs(uniform - 1.585) < 1e-3 and pure == 0.0
    report(9, f"entropy uniform {uniform:.4f} bits, pure {pure} bits", ok)


def test_criterion_10_desk_scale_end_to_end(run_a):
    split = load_dataset(run_a["dir"] / "dataset")
    model = load_vqvae(run_a["dir"] / "vqvae")
    acc = float(np.mean([
        int(np.argmax(classify(model, encode(model, s.observation))))
        == s.maneuver_class for s in split.train
    ]))
    match = float(np.mean([
        maneuver_match_rate(r, s, split.lanes, s.maneuver_class)
        for r, s in zip(run_a["reports"][5.0], split.test)
    ]))
    ade_uc = float(np.mean([r.ade for r in run_a["reports"]["uc"]]))
    ade_w1 = float(np.mean([r.ade for r in run_a["reports"][1.0]]))
    spread_w5 = float(np.mean([spread(r.trajectories)
                               for r in run_a["reports"][5.0]]))
    spread_w0 = float(np.mean([spread(r.trajectories)
                               for r in run_a["reports"][0.0]]))
    elapsed_min = run_a["elapsed_s"] / 60.0
    ok = (acc > 0.90 and match >= 0.80 and ade_uc <= ade_w1
          and spread_w5 < spread_w0 and elapsed_min <= 15.0)
    report(10, f"desk scale: accuracy {acc:.3f}, match@w=5 {match:.2f}, "
               f"ADE uc {ade_uc:.3f} <= w=1 {ade_w1:.3f}, "
               f"spread w=5 {spread_w5:.3f} < w=0 {spread_w0:.3f}, "
               f"{elapsed_min:.1f} min", ok)


def _sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_11_bitwise_determinism(run_a, run_b):
    a, b = run_a["dir"], run_b["dir"]
    checks = {
        "manifest": (a / "manifest.json").read_bytes()
                    == (b / "manifest.json").read_bytes(),
        "vqvae": _sha256(a / "vqvae" / "params.bin")
                 == _sha256(b / "vqvae" / "params.bin"),
        "diffusion": _sha256(a / "diffusion" / "params.bin")
                     == _sha256(b / "diffusion" / "params.bin"),
        "uq": _sha256(a / "uq" / "stats.bin")
              == _sha256(b / "uq" / "stats.bin"),
        # run_a predicted with guidance="uc" last, matching run_b
        "metrics": (a / "predictions" / "metrics.csv").read_bytes()
                   == (b / "predictions" / "metrics.csv").read_bytes(),
    }
    failed = [k for k, v in checks.items() if not v]
    report(11, "two seeded runs bitwise identical "
               f"(manifest, checkpoints, metrics){' except ' if failed else ''}"
               f"{','.join(failed)}", not failed)
