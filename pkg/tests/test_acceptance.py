"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines appear
in the "acceptance criteria" section at the end of the run. Criteria 8-10 train
real models and take tens of minutes on one core.
"""

import dataclasses
import io
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from heatmap1d.cli import main
from heatmap1d.coattention import CoAttentionParams, affinities, coattention_forward
from heatmap1d.codec import HeatmapSpec, decode_argmax, encode1d, encode2d, encode_targets, marginalize, output_size
from heatmap1d.detector import DetectorConfig, DetectorParams, detector_loss, forward
from heatmap1d.experiments import gamma_ablation, lambda_ablation, mean_by, resolution_sweep
from heatmap1d.gradcheck import grad_check
from heatmap1d.optim import Adam
from heatmap1d.synth import generate_clip, generate_clip_dataset, generate_dataset, generate_scene
from heatmap1d.tensor import (Tensor, add, conv2d, conv_transpose2d, make_rng, matmul, mse, mul, relu, reshape,
                              scale, softmax_rows, sub, sum_squares, swap_last, transpose, tsum, upsample_nearest)
from heatmap1d.tracker import (TrackerConfig, TrackerParams, TrackerState, temporal_fuse, track_step,
                               tracker_loss, unroll)

# desk-scale experiment settings shared by criteria 8-10
F, N = 64, 5
SEEDS = (0, 1, 2)
TRAIN_SEED, TEST_SEED = 1000, 2000
DESK = DetectorConfig(F=F, L=192, N=N, learning_rate=1e-3, epochs=20)
SWEEP_L = (16, 64, 192)

CLIP_T, CLIP_OCCLUSION = 8, 0.3
N_TRAIN_CLIPS, N_TEST_CLIPS = 60, 20
TRACK = TrackerConfig(dataclasses.replace(DESK, epochs=15), clip_length=CLIP_T, learning_rate=1e-3, epochs=30)


@pytest.fixture(scope="module")
def detector_data():
    return generate_dataset(500, F, N, TRAIN_SEED), generate_dataset(100, F, N, TEST_SEED)


def _minutes(t0):
    return (time.perf_counter() - t0) / 60.0


def test_criterion_01_quantization_example(acceptance_log):
    t0 = time.perf_counter()
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main(["analyze-quant", "--p", "142.84", "--q", "188.72", "--F", "256", "--L-list", "128,768"])
    rows = {int(r.split(",")[0]): float(r.split(",")[-1]) for r in buf.getvalue().strip().splitlines()[1:]}
    elapsed = time.perf_counter() - t0
    ok = code == 0 and abs(rows[128] - 1.11) <= 0.005 and abs(rows[768] - 0.18) <= 0.005 and elapsed < 1.0
    acceptance_log(1, ok, f"E(L/F=0.5)={rows[128]:.4f} E(L/F=3)={rows[768]:.4f} in {elapsed:.3f}s")
    assert ok


def test_criterion_02_output_complexity(acceptance_log):
    t0 = time.perf_counter()
    ok = True
    details = []
    for n in (5, 68):
        tables = {}
        for kind in ("1d", "2d"):
            buf = io.StringIO()
            with redirect_stdout(buf):
                ok &= main(["bench-mem", "--N", str(n), "--L-list", "64,256,768", "--kind", kind]) == 0
            tables[kind] = [r.split(",") for r in buf.getvalue().strip().splitlines()[1:]]
        for r1, r2 in zip(tables["1d"], tables["2d"]):
            L = int(r1[2])
            p1, p2 = int(r1[4]), int(r2[4])
            ok &= p1 == output_size(n, L, "1d") == 2 * n * L and p2 == output_size(n, L, "2d") == n * L * L
            ok &= p2 * 2 == p1 * L
            if r1[6] == "ok" and r2[6] == "ok":
                ok &= int(r2[5]) * 2 == int(r1[5]) * L
            details.append(f"N={n},L={L}:{p2 // p1 if p2 % p1 == 0 else p2 / p1}{'' if r2[6] == 'ok' else '(2d OOM)'}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 10.0
    acceptance_log(2, ok, f"2D/1D ratio = L/2: {' '.join(details)} in {elapsed:.2f}s")
    assert ok


def test_criterion_03_codec_consistency(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for sigma in (1.0, 2.5, 4.0):
        spec = HeatmapSpec(64, 96, sigma)
        for p, q in rng.uniform(0, 64, size=(100, 2)):
            mx, my = marginalize(encode2d((p, q), spec))
            worst = max(worst, np.abs(encode1d(p, spec, "x").values - mx.values).max(),
                        np.abs(encode1d(q, spec, "y").values - my.values).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10.0
    acceptance_log(3, ok, f"max |encode1d - marginal| = {worst:.2e} in {elapsed:.2f}s")
    assert ok


def test_criterion_04_decode_bound(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_ratio = 0.0
    for L in (16, 32, 64, 128, 192):
        spec = HeatmapSpec(64, L)
        for c in rng.uniform(0, 64, size=10_000):
            worst_ratio = max(worst_ratio, abs(decode_argmax(encode1d(c, spec)) - c) / (64 / L))
    elapsed = time.perf_counter() - t0
    ok = worst_ratio <= 1.0 and elapsed < 30.0
    acceptance_log(4, ok, f"max |decode - c| / (F/L) = {worst_ratio:.4f} over 5 x 10^4 in {elapsed:.1f}s")
    assert ok


def _op_cases(rng):
    a = lambda *s: Tensor(rng.standard_normal(s), requires_grad=True)
    c = lambda *s: Tensor(rng.standard_normal(s))
    w_mse, w_rs, w_tr, w_sw, w_sm, w_up = c(2, 5), c(6, 2), c(4, 2, 3), c(2, 4, 3), c(3, 6), c(1, 2, 6, 8)
    signs = rng.uniform(0.1, 1, (4, 4)) * rng.choice([-1, 1], (4, 4))
    return {
        "add": (lambda x, y: sum_squares(add(x, y)), [a(3, 4), a(4)]),
        "sub": (lambda x, y: sum_squares(sub(x, y)), [a(2, 3), a(2, 1)]),
        "mul": (lambda x, y: sum_squares(mul(x, y)), [a(3, 4), a(3, 4)]),
        "scale": (lambda x: sum_squares(scale(x, -1.7)), [a(5)]),
        "relu": (lambda x: sum_squares(relu(x)), [Tensor(signs, requires_grad=True)]),
        "tsum": (lambda x: tsum(mul(x, x)), [a(3, 3)]),
        "sum_squares": (lambda x: sum_squares(x), [a(6)]),
        "mse": (lambda x: mse(x, w_mse), [a(2, 5)]),
        "reshape": (lambda x: tsum(mul(reshape(x, (6, 2)), w_rs)), [a(3, 4)]),
        "transpose": (lambda x: tsum(mul(transpose(x, (2, 0, 1)), w_tr)), [a(2, 3, 4)]),
        "swap_last": (lambda x: tsum(mul(swap_last(x), w_sw)), [a(2, 3, 4)]),
        "matmul": (lambda x, y: sum_squares(matmul(x, y)), [a(2, 3, 4), a(4, 5)]),
        "softmax_rows": (lambda x: tsum(mul(softmax_rows(x), w_sm)), [a(3, 6)]),
        "conv2d": (lambda x, k, b: sum_squares(conv2d(x, k, b, stride=(2, 1), padding=1)),
                   [a(2, 3, 7, 6), a(4, 3, 3, 3), a(4)]),
        "conv_transpose2d": (lambda x, k, b: sum_squares(conv_transpose2d(x, k, b, stride=(1, 3))),
                             [a(2, 3, 2, 4), a(3, 2, 1, 3), a(2)]),
        "upsample_nearest": (lambda x: tsum(mul(upsample_nearest(x, 2), w_up)), [a(1, 2, 3, 4)]),
    }


def test_criterion_05_gradient_suite(acceptance_log):
    t0 = time.perf_counter()
    rng = make_rng(5)
    errors = {name: grad_check(f, xs) for name, (f, xs) in _op_cases(rng).items()}

    coatt = CoAttentionParams.init(4, 0.4, seed=1, noise=0.3)
    dx, dy = Tensor(rng.standard_normal((3, 8, 4)), requires_grad=True), Tensor(rng.standard_normal((3, 4, 8)),
                                                                                 requires_grad=True)
    wx, wy = Tensor(rng.standard_normal((3, 8, 4))), Tensor(rng.standard_normal((3, 4, 8)))

    def coatt_loss(*_):
        ox, oy = coattention_forward(dx, dy, coatt)
        return add(tsum(mul(ox, wx)), tsum(mul(oy, wy)))

    errors["coattention"] = grad_check(coatt_loss, [dx, dy, coatt.P, coatt.Q])

    small = DetectorConfig(F=32, L=24, N=5, base_channels=4, head_channels=8, deconv_channels=4)
    det = DetectorParams.init(small)
    det.coatt.P.data = det.coatt.P.data + rng.normal(0, 0.3, det.coatt.P.shape)
    # zero biases on exactly-black pixels put pre-activations on the ReLU kink; move off it
    for name, t in det.named().items():
        if name.endswith(".b"):
            t.data = rng.normal(0, 0.1, t.shape)
    data = generate_dataset(2, 32, 5, seed=55)
    gx, gy = encode_targets(data.landmarks, small.heatmap_spec)

    def det_loss(*_):
        hx, hy = forward(data.images, det)
        return detector_loss(hx, hy, gx, gy)

    errors["detector(F=32)"] = grad_check(det_loss, det.parameters(), max_elements=8)

    tcfg = TrackerConfig(small, lam=0.4, clip_length=3, channels=6)
    trk = TrackerParams.init(tcfg, det)
    for axis in ("x", "y"):
        trk.tensors[f"cnn4_{axis}.1.w"].data = rng.normal(0, 0.3, trk.tensors[f"cnn4_{axis}.1.w"].shape)
    clip = generate_clip(56, 32, 5, 3)
    tgx, tgy = encode_targets(clip.tracks[None], small.heatmap_spec)

    def trk_loss(*_):
        seq = [forward(clip.frames[t][None], det) for t in range(3)]
        return tracker_loss(unroll([a for a, _ in seq], [b for _, b in seq], trk), tgx, tgy)

    errors["tracker(T=3)"] = grad_check(trk_loss, trk.parameters(), max_elements=6)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = all(e <= 1e-4 for e in errors.values()) and elapsed < 300
    acceptance_log(5, ok, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e} in {elapsed:.1f}s")
    assert ok, errors


def test_criterion_06_coattention_identity(acceptance_log):
    t0 = time.perf_counter()
    rng = make_rng(6)
    dx, dy = Tensor(rng.standard_normal((16, 16, 4))), Tensor(rng.standard_normal((16, 4, 16)))
    ox, oy = coattention_forward(dx, dy, CoAttentionParams.init(4, 0.0, seed=2))
    identity = ox.data.tobytes() == dx.data.tobytes() and oy.data.tobytes() == dy.data.tobytes()
    p4 = CoAttentionParams.init(4, 0.4, seed=2)
    ox4, oy4 = coattention_forward(dx, dy, p4)
    differs = not np.array_equal(ox4.data, dx.data) and not np.array_equal(oy4.data, dy.data)
    w_xy, w_yx = affinities(dx, dy, p4)
    row_err = max(np.abs(w_xy.data.sum(-1) - 1).max(), np.abs(w_yx.data.sum(-1) - 1).max())
    elapsed = time.perf_counter() - t0
    ok = identity and differs and row_err <= 1e-12 and elapsed < 10
    acceptance_log(6, ok, f"gamma=0 bitwise identity={identity}, gamma=0.4 differs={differs}, "
                          f"row-sum err {row_err:.1e}")
    assert ok


def test_criterion_07_temporal_fusion(acceptance_log):
    t0 = time.perf_counter()
    rng = make_rng(7)
    worst = 0.0
    for lam in (0.0, 0.3, 1.0):
        for T in range(1, 17):
            us = [rng.standard_normal((2, 4, 1, 6)) for _ in range(T)]
            state = TrackerState()
            for t in range(1, T + 1):
                (v, _), state = temporal_fuse(Tensor(us[t - 1]), Tensor(us[t - 1]), state, lam, t)
                ref = us[t - 1] + sum(lam ** (t - tau) * us[tau - 1] for tau in range(1, t))
                worst = max(worst, np.abs(v.data - ref).max())

    small = DetectorConfig(F=32, L=16, N=5, base_channels=4, head_channels=8, deconv_channels=4)
    trk = TrackerParams.init(TrackerConfig(small, lam=0.0, clip_length=6, channels=6))
    for axis in ("x", "y"):
        trk.tensors[f"cnn4_{axis}.1.w"].data = rng.normal(0, 0.3, trk.tensors[f"cnn4_{axis}.1.w"].shape)
    a = generate_clip(71, 32, 5, 6, occlusion_prob=0.3).frames
    b = generate_clip(72, 32, 5, 6, occlusion_prob=0.3).frames
    b[-1] = a[-1]
    sa, sb = TrackerState(), TrackerState()
    for t in range(6):
        _, (ha, ga), sa = track_step(a[t], sa, trk)
        _, (hb, gb), sb = track_step(b[t], sb, trk)
    swap_ok = ha.data.tobytes() == hb.data.tobytes() and ga.data.tobytes() == gb.data.tobytes()
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and swap_ok and elapsed < 30
    acceptance_log(7, ok, f"streaming vs direct sum max err {worst:.1e}; lambda=0 prefix swap bitwise equal={swap_ok}")
    assert ok


def test_criterion_08_resolution_trend(acceptance_log, detector_data, experiment_cache):
    train, test = detector_data
    t0 = time.perf_counter()
    rows = resolution_sweep(SWEEP_L, train, test, DESK, SEEDS, cache=experiment_cache)
    minutes = _minutes(t0)
    means = mean_by(rows, "L")
    seq = [means[L] for L in SWEEP_L]
    ok = all(a > b for a, b in zip(seq, seq[1:])) and minutes < 60
    per = ", ".join(f"L/F={L / F:g}: {means[L]:.3f}" for L in SWEEP_L)
    acceptance_log(8, ok, f"mean test NRMSE {per} (3 seeds) in {minutes:.1f} min")
    assert ok, rows


def test_criterion_09_lambda_ablation(acceptance_log, experiment_cache):
    t0 = time.perf_counter()
    train = generate_clip_dataset(N_TRAIN_CLIPS, F, N, CLIP_T, 3000, occlusion_prob=CLIP_OCCLUSION)
    test = generate_clip_dataset(N_TEST_CLIPS, F, N, CLIP_T, 4000, occlusion_prob=CLIP_OCCLUSION)
    rows = lambda_ablation((0.0, 0.3), train, test, TRACK, SEEDS)
    minutes = _minutes(t0)
    means = mean_by(rows, "value")
    ok = means[0.3] < means[0.0] and minutes < 60
    acceptance_log(9, ok, f"mean NRMSE lambda=0.3: {means[0.3]:.3f} vs lambda=0.0: {means[0.0]:.3f} "
                          f"(3 seeds) in {minutes:.1f} min")
    assert ok, rows


def test_criterion_10_gamma_ablation(acceptance_log, detector_data, experiment_cache):
    train, test = detector_data
    t0 = time.perf_counter()
    reused = sum(1 for k in experiment_cache if k[0] == "detector")
    rows = gamma_ablation((0.0, 0.4), train, test, DESK, SEEDS, cache=experiment_cache)
    minutes = _minutes(t0)
    means = mean_by(rows, "value")
    ok = means[0.4] <= means[0.0] and minutes < 60
    note = " (gamma=0.4 cells shared with criterion 8)" if reused else ""
    acceptance_log(10, ok, f"mean NRMSE gamma=0.4: {means[0.4]:.3f} vs gamma=0.0: {means[0.0]:.3f} "
                           f"(3 seeds) in {minutes:.1f} min{note}")
    assert ok, rows


def test_criterion_11_determinism(acceptance_log, tmp_path):
    small = ["--F", "32", "--L", "16", "--base_channels", "4", "--head_channels", "8", "--deconv_channels", "4",
             "--learning_rate", "0.001"]
    quiet = io.StringIO()
    with redirect_stdout(quiet):
        assert main(["gen-data", "--F", "32", "--n_train", "20", "--n_val", "5", "--n_train_clips", "4",
                     "--n_val_clips", "2", "--clip_length", "3", "--occlusion_prob", "0.3",
                     "--out", str(tmp_path / "data")]) == 0
        for run in ("a", "b"):
            assert main(["train-detect", "--data", str(tmp_path / "data"), "--out", str(tmp_path / f"det_{run}"),
                         "--epochs", "2", "--seed", "3"] + small) == 0
            assert main(["train-track", "--data", str(tmp_path / "data"), "--out", str(tmp_path / f"trk_{run}"),
                         "--epochs", "1", "--track_epochs", "2", "--clip_length", "3", "--seed", "3"] + small) == 0
    same = []
    for d in ("det", "trk"):
        for f in ("detector.ckpt" if d == "det" else "tracker.ckpt", "log.csv"):
            same.append((tmp_path / f"{d}_a" / f).read_bytes() == (tmp_path / f"{d}_b" / f).read_bytes())
    ok = all(same)
    acceptance_log(11, ok, f"train-detect and train-track repeated with seed 3: "
                           f"{sum(same)}/{len(same)} checkpoint/log files bit-identical")
    assert ok


def test_criterion_12_overfit(acceptance_log):
    t0 = time.perf_counter()
    cfg = DetectorConfig()
    assert cfg.learning_rate == 1e-4
    p = DetectorParams.init(cfg)
    img, lm = generate_scene(0, cfg.F, cfg.N)
    gx, gy = encode_targets(lm.coords[None], cfg.heatmap_spec)
    opt = Adam(p.parameters(), lr=cfg.learning_rate)
    first = None
    for step in range(201):
        hx, hy = forward(img[None], p)
        loss = detector_loss(hx, hy, gx, gy)
        first = loss.item() if first is None else first
        if step == 200:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    last = loss.item()
    elapsed = time.perf_counter() - t0
    ok = first / last >= 100 and elapsed < 120
    acceptance_log(12, ok, f"loss {first:.4g} -> {last:.4g} ({first / last:.1f}x) in 200 Adam steps at lr 1e-4, "
                           f"{elapsed:.1f}s")
    assert ok
