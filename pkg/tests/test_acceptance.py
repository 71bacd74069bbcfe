"""Acceptance criteria 1-10, one test each, every one printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the lines are
collected into an "acceptance criteria" section of the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from rvdiff import cli, formats
from rvdiff.codec import (
    SENSOR_PROFILES, PointCloud, SemanticMap, SensorConfig, project_cloud,
)
from rvdiff.denoiser import OracleDenoiser, ToyDenoiser
from rvdiff.diffusion import SamplerConfig, TrainConfig, TrainSample, generate, loss_gradients, train
from rvdiff.metrics import (
    REPORT_KEYS, GaussianStats, bev_histogram, bev_histogram_agnostic, evaluate_sets,
    frechet_distance, mmd_poly3, trace_sqrt_product,
)
from rvdiff.modes import Mode
from rvdiff.semantic_loop import ControllerState, EmaTrace, LoopConfig, controller_step, ema_update
from rvdiff.synth import WorldSpec, corpus, synthesize

from conftest import project_corpus
from test_denoiser import _loss
from test_formats import _kitti_like
from test_metrics import mmd_feature_map, random_spd
from test_semantic_loop import unrolled


SMALL = ["--set", "sensor.height_px=16", "--set", "sensor.width_px=128"]


@pytest.fixture
def small_model_dir(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "c"), "--n", "2", *SMALL]) == 0
    assert cli.main(["train", "--corpus", str(tmp_path / "c"), "--out", str(tmp_path / "m"),
                     "--set", "train.steps=10", *SMALL]) == 0
    return tmp_path / "c", tmp_path / "m", tmp_path


def test_criterion_01_metric_identity(verdict, desk, palette):
    t0 = time.perf_counter()
    scenes = project_corpus(corpus(8, WorldSpec(), 11, desk), desk, palette)
    rep = evaluate_sets(scenes, scenes)
    elapsed = time.perf_counter() - t0
    worst = max(abs(rep[k]) for k in REPORT_KEYS)
    verdict(1, worst < 1e-6 and elapsed < 10.0,
            f"max |metric(S,S)| = {worst:.3g} over {len(REPORT_KEYS)} metrics, {elapsed:.2f} s")


def test_criterion_02_frechet_closed_form(verdict):
    one_d = frechet_distance(GaussianStats([0.0], [[1.0]]), GaussianStats([1.0], [[4.0]]))
    r = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        a, b = random_spd(r, 3), random_spd(r, 3)
        oracle = float(np.sum(np.sqrt(np.linalg.eigvals(a @ b).real)))
        worst = max(worst, abs(trace_sqrt_product(a, b) - oracle))
    verdict(2, abs(one_d - 2.0) < 1e-9 and worst < 1e-8,
            f"1-D case {one_d!r}, max trace error {worst:.3g} over 200 SPD pairs")


def test_criterion_03_mmd_oracle(verdict):
    r = np.random.default_rng(3)
    worst = 0.0
    for _ in range(150):
        d, n, m = int(r.integers(1, 4)), int(r.integers(1, 21)), int(r.integers(1, 21))
        x = r.standard_normal((n, d))
        y = r.standard_normal((m, d)) * r.uniform(0.5, 2) + r.uniform(-1, 1)
        worst = max(worst, abs(mmd_poly3(x, y) - mmd_feature_map(x, y)))
    verdict(3, worst < 1e-8, f"max |mmd - feature-map oracle| = {worst:.3g} over 150 set pairs")


def test_criterion_04_bev_semantics(verdict, desk, palette):
    r = np.random.default_rng(4)
    edges = np.linspace(-50, 50, 17)
    marginal_ok = True
    for _ in range(100):
        n = int(r.integers(0, 3000))
        xyz = r.uniform(-70, 70, (n, 3))
        cloud = PointCloud(xyz, r.uniform(0, 1, n), r.integers(0, 20, n))
        h_s = bev_histogram(cloud, bins=16, num_classes=20).counts
        h = bev_histogram_agnostic(cloud, bins=16)
        keep = (xyz[:, 0] < 50) & (xyz[:, 1] < 50)
        oracle, _, _ = np.histogram2d(xyz[keep, 0], xyz[keep, 1], bins=[edges, edges])
        marginal_ok &= np.array_equal(h_s.sum(axis=0), h) and np.array_equal(h, oracle)

    real = project_corpus(corpus(8, WorldSpec(), 1, desk), desk, palette)
    gen = project_corpus(corpus(8, WorldSpec(), 2, desk), desk, palette)
    perm = np.roll(np.arange(palette.num_classes), 1)  # every class id moves
    permuted = [(sc, SemanticMap(perm[sem.class_ids], palette)) for sc, sem in gen]
    base, moved = evaluate_sets(real, gen), evaluate_sets(real, permuted)
    perm_ok = moved["s_jsd"] > base["s_jsd"] and moved["jsd"] == base["jsd"]
    verdict(4, bool(marginal_ok and perm_ok),
            f"class marginal exact on 100 clouds: {bool(marginal_ok)}; S-JSD "
            f"{base['s_jsd']:.4f} -> {moved['s_jsd']:.4f}, JSD {base['jsd']:.4f} -> {moved['jsd']:.4f}")


def test_criterion_05_oracle_sampling(verdict, palette):
    k = SENSOR_PROFILES["kitti64"]
    sensor = SensorConfig(64, 256, k.elevation_min, k.elevation_max, k.max_depth)
    proj = project_cloud(synthesize(WorldSpec(), sensor), sensor, palette)
    x0 = proj.scene.tensor()
    t0 = time.perf_counter()
    oracle = OracleDenoiser(x0, proj.semantics)
    g = generate(oracle, sensor, palette, SamplerConfig(256, "deterministic"), LoopConfig(),
                 np.random.default_rng(5))
    elapsed = time.perf_counter() - t0
    err = float(np.abs(g.x - x0).max())
    acc = float(np.mean(g.semantics.class_ids == proj.semantics.class_ids))
    verdict(5, err < 0.05 and acc == 1.0 and elapsed < 5.0,
            f"max abs error {err:.3g}, semantic accuracy {acc:.4f}, {elapsed:.2f} s at 64x256, NFE=256")


def test_criterion_06_ema(verdict):
    r = np.random.default_rng(6)
    worst = 0.0
    for alpha in r.uniform(0, 1, 10):
        ys = [r.dirichlet(np.ones(5), size=(6, 7)) for _ in range(100)]
        tr = EmaTrace(float(alpha))
        for y in ys:
            tr = ema_update(tr, y)
        worst = max(worst, float(np.abs(tr.probs - unrolled(ys, alpha)).max()))
    ys = [r.dirichlet(np.ones(5), size=(6, 7)) for _ in range(20)]
    one, zero = EmaTrace(1.0), EmaTrace(0.0)
    for y in ys:
        one, zero = ema_update(one, y), ema_update(zero, y)
    edges = np.array_equal(one.probs, ys[-1]) and np.array_equal(zero.probs, ys[0])
    verdict(6, worst < 1e-9 and edges,
            f"max |recursive - unrolled| = {worst:.3g} on 100-step traces; alpha edges exact: {edges}")


def test_criterion_07_closed_loop(verdict, small_model_dir):
    cfg = LoopConfig(confidence_threshold=0.75)
    at_delta = np.tile([[0.9, 0.1]], (4, 1)).reshape(1, 4, 2)
    at_delta[0, 3] = [0.5, 0.5]  # exactly 3/4 of pixels confident
    state, mode = controller_step(ControllerState(), EmaTrace(0.2, at_delta), cfg)
    no_trigger = mode is Mode.UNCONDITIONAL and not state.triggered

    confident = EmaTrace(0.2, np.tile([[0.9, 0.1]], (4, 1)).reshape(1, 4, 2))
    state, modes = ControllerState(), ""
    for _ in range(10):
        state, m = controller_step(state, confident, cfg)
        modes += m.value

    corpus_dir, model, tmp = small_model_dir
    code = cli.main(["generate", "--model", str(model), "--out", str(tmp / "open"),
                     "--closed-loop=false", "--set", "sampler.nfe=32",
                     "--set", "loop.confidence_threshold=0.01", *SMALL])
    trace = [json.loads(x) for x in (tmp / "open" / "gen_0000.trace.jsonl").read_text().splitlines()]
    open_ok = code == 0 and len(trace) == 32 and all(t["mode"] == "unconditional" for t in trace)
    verdict(7, no_trigger and modes == "CUCUCUCUCU" and open_ok,
            f"fraction == delta triggers: {not no_trigger}; post-trigger modes {modes}; "
            f"--closed-loop=false all unconditional: {open_ok}")


def test_criterion_08_training(verdict, tmp_path):
    t0 = time.perf_counter()
    assert cli.main(["synth", "--out", str(tmp_path / "one"), "--n", "1"]) == 0
    assert cli.main(["train", "--corpus", str(tmp_path / "one"), "--out", str(tmp_path / "m"),
                     "--set", "train.steps=500", "--set", "train.learning_rate=0.01"]) == 0
    elapsed = time.perf_counter() - t0
    log = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    before, after = log[0]["total"], log[-1]["total"]

    worst = 0.0
    for seed in range(10):
        r = np.random.default_rng(100 + seed)
        m = ToyDenoiser(4, hidden=6, n_buckets=4, seed=seed)
        x_t, cond = r.standard_normal((3, 4, 2)), np.zeros((3, 4, 4))
        y, eps, t = r.integers(0, 4, (3, 4)), r.standard_normal((3, 4, 2)), float(r.random())
        out, cache = m.forward(x_t, cond, t)
        grads = m.backward(cache, *loss_gradients(out, eps, y, Mode.UNCONDITIONAL))
        for k, p in m.params.items():
            for idx in np.ndindex(p.shape):
                keep = p[idx]
                p[idx] = keep + 1e-5
                up = _loss(m, x_t, cond, t, eps, y, Mode.UNCONDITIONAL)
                p[idx] = keep - 1e-5
                dn = _loss(m, x_t, cond, t, eps, y, Mode.UNCONDITIONAL)
                p[idx] = keep
                num = (up - dn) / 2e-5
                worst = max(worst, abs(grads[k][idx] - num) / max(abs(grads[k][idx]) + abs(num), 1e-6))
    verdict(8, after <= 0.5 * before and elapsed < 60.0 and worst < 1e-4,
            f"total loss {before:.4f} -> {after:.4f} (ratio {after / before:.3f}) in {elapsed:.1f} s; "
            f"max gradient rel. error {worst:.3g} over 10 seeds")


def test_criterion_09_mode_mixing(verdict, tiny_sensor, palette):
    proj = project_cloud(synthesize(WorldSpec(), tiny_sensor), tiny_sensor, palette)
    sample = TrainSample(proj.scene.tensor(), proj.semantics)
    res = train([sample], ToyDenoiser(20, hidden=4), TrainConfig(steps=10_000, seed=9))
    frac = sum(r.mode is Mode.CONDITIONAL for r in res) / len(res)
    both = sum(r.mode.switches == (1, 1) for r in res)
    verdict(9, abs(frac - 0.5) <= 0.02 and both == 0,
            f"conditional fraction {frac:.4f} over {len(res)} steps; (A,B)=(1,1) seen {both} times")


def _survivors(pts, sensor):
    """Index of the nearest point per pixel, lowest index on ties, by a plain loop."""
    best = {}
    span = sensor.elevation_max - sensor.elevation_min
    for i, (x, y, z, _) in enumerate(pts.astype(np.float64)):
        rng = math.sqrt(x * x + y * y + z * z)
        el = math.asin(z / rng)
        if not (sensor.elevation_min <= el <= sensor.elevation_max) or rng > sensor.max_depth:
            continue
        row = min(int(math.floor((sensor.elevation_max - el) / span * sensor.height_px)),
                  sensor.height_px - 1)
        col = int(math.floor((math.atan2(y, x) + math.pi) / (2 * math.pi) * sensor.width_px))
        key = (row, col % sensor.width_px)
        if key not in best or rng < best[key][0]:
            best[key] = (rng, i)
    return sorted(i for _, i in best.values())


def test_criterion_10_format_fidelity(verdict, tmp_path):
    sensor = SENSOR_PROFILES["kitti64"]
    ok, kept_total = True, 0
    for seed in range(3):
        pts, lab = _kitti_like(seed)
        formats.write_kitti_scan(tmp_path / "in.bin", pts)
        formats.write_kitti_label(tmp_path / "in.label", lab)
        assert cli.main(["project", "--bin", str(tmp_path / "in.bin"), "--label",
                         str(tmp_path / "in.label"), "--out", str(tmp_path / "s.rvs"),
                         "--set", "sensor.profile=kitti64"]) == 0
        assert cli.main(["export", "--rvs", str(tmp_path / "s.rvs"), "--bin",
                         str(tmp_path / "out.bin"), "--label", str(tmp_path / "out.label")]) == 0
        out_pts = formats.read_kitti_scan(tmp_path / "out.bin")
        out_lab = formats.read_kitti_label(tmp_path / "out.label")
        keep = _survivors(pts, sensor)
        want = sorted(p.tobytes() + int(l).to_bytes(4, "little")
                      for p, l in zip(pts[keep], lab[keep] & 0xFFFF))
        got = sorted(p.tobytes() + int(l).to_bytes(4, "little") for p, l in zip(out_pts, out_lab))
        ok &= want == got and len(keep) > 0
        kept_total += len(keep)
    verdict(10, bool(ok), f"{kept_total} surviving points over 3 scans round-trip bit-exactly")
