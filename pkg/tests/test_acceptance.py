"""Acceptance gate: one test per criterion, each recorded as PASS, FAIL or SKIP.

The summary printed at the end of the session lists every criterion on its
own line (see ``conftest.pytest_terminal_summary``).
"""

import math
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_RESULTS
from rgbtkit.box_codec import (EncodedBox, GridSpec, KernelGrid, ResidualDelta, decode_anchor,
                               decode_offset_field, decode_residual, encode_anchor, encode_residual)
from rgbtkit.cli import main
from rgbtkit.evaluation import (MatchResult, ShiftSweepConfig, build_curve, evaluate_modality,
                                match_image, shift_sweep)
from rgbtkit.feature_mining import ConvWeights, deform_conv_forward
from rgbtkit.geometry import BoundingBox, ScoredBox, translate
from rgbtkit.homography import (CornerJitter, image_corners, jitter_homography, project_points,
                                sample_jitter, solve_homography, warp_box)
from rgbtkit.io.formats import write_tensor
from rgbtkit.io.synth import SynthConfig, synth_fixture
from rgbtkit.nms import DetectionPair, NmsConfig, decoupled_nms, fusion_weights, gate, greedy_nms, pairwise_nms
from rgbtkit.pairing import assignment_cost, hungarian

SEED = 20240611


@contextmanager
def criterion(name):
    try:
        yield
    except pytest.skip.Exception:
        ACCEPTANCE_RESULTS[name] = "SKIP"
        raise
    except BaseException:
        ACCEPTANCE_RESULTS[name] = "FAIL"
        raise
    ACCEPTANCE_RESULTS[name] = "PASS"


def rel_err(a, b):
    # relative error with a unit floor so values near zero are judged absolutely
    return abs(a - b) / max(1.0, abs(b))


def test_criterion_01_codec_round_trips():
    with criterion("1 codec round trips (1e5 boxes, 1e-9 rel, < 5 s)"):
        rng = np.random.default_rng(SEED)
        n = 100_000
        strides = rng.choice([8, 16, 32], n)
        cells = rng.integers(0, 80, (n, 2))
        logits = np.c_[rng.uniform(-2, 2, (n, 2)), rng.uniform(-3, 3, (n, 2))]
        props = np.c_[rng.uniform(-200, 800, (n, 2)), rng.uniform(0.5, 400, (n, 2))]
        deltas = rng.uniform(-0.45, 0.45, (n, 4))
        worst = 0.0
        start = time.perf_counter()
        for k in range(n):
            g = GridSpec(float(strides[k]), 80, 80)
            cell = (int(cells[k, 0]), int(cells[k, 1]))
            e = EncodedBox(*logits[k], cell)
            b = decode_anchor(e, g)
            back = encode_anchor(b, g, cell)
            again = decode_anchor(back, g)
            p = BoundingBox.from_xywh(*props[k])
            d = ResidualDelta(*deltas[k])
            t = decode_residual(p, d)
            d2 = encode_residual(p, t)
            t2 = decode_residual(p, d2)
            worst = max(worst,
                        max(rel_err(u, v) for u, v in zip(back.as_tuple(), e.as_tuple())),
                        max(rel_err(u, v) for u, v in zip(again.to_list(), b.to_list())),
                        max(rel_err(u, v) for u, v in zip(d2.as_tuple(), d.as_tuple())),
                        max(rel_err(u, v) for u, v in zip(t2.to_list(), t.to_list())))
        elapsed = time.perf_counter() - start
        assert worst <= 1e-9, worst
        assert elapsed < 5.0, elapsed


def test_criterion_02_offset_containment():
    with criterion("2 offset containment (1e4 proposals, 1e-9)"):
        rng = np.random.default_rng(SEED + 2)
        k = KernelGrid(5)
        n, h, w, stride = 400, 5, 5, 8.0  # 400 * 25 cells = 1e4 proposals
        xy = rng.uniform(-50, 100, (n, 2, h, w))
        props = np.concatenate([xy, xy + rng.uniform(1, 120, (n, 2, h, w))], axis=1)
        o = rng.random((n, 2 * k.taps, h, w))
        o[:7] = np.round(o[:7])  # exact interval endpoints
        dec = decode_offset_field(o, props, stride, 5)
        jj, ii = np.mgrid[0:h, 0:w]
        ax = (ii + 0.5)[None, None] + k.offsets[:, 0][None, :, None, None] + dec[:, 0::2]
        ay = (jj + 0.5)[None, None] + k.offsets[:, 1][None, :, None, None] + dec[:, 1::2]
        lo_x, lo_y = props[:, 0:1] / stride, props[:, 1:2] / stride
        hi_x, hi_y = props[:, 2:3] / stride, props[:, 3:4] / stride
        tol = 1e-9
        assert np.all(ax >= lo_x - tol) and np.all(ax <= hi_x + tol)
        assert np.all(ay >= lo_y - tol) and np.all(ay <= hi_y + tol)


def test_criterion_03_deformable_forward_oracle():
    with criterion("3 deformable forward vs naive and classic-conv oracles (1e-6 rel)"):
        rng = np.random.default_rng(SEED + 3)
        for case in range(50):
            groups = int(rng.choice([1, 2, 4]))
            k = int(rng.choice([3, 5]))
            c = groups * int(rng.integers(1, 8 // groups + 1))
            h, w = (int(v) for v in rng.integers(3, 11, 2))
            if case < 2:
                c, h, w = 8, 10, 10  # the largest stated shape
            conv_groups = groups if case % 2 else 1
            cin = c // conv_groups
            out_ch = conv_groups * int(rng.integers(1, 3))
            f = rng.normal(size=(1, c, h, w))
            off = rng.uniform(-2.5, 2.5, (1, groups * 2 * k * k, h, w))
            wt = ConvWeights(rng.normal(size=(out_ch, cin, k, k)), rng.normal(size=out_ch))
            scale = np.abs(wt.weight).sum() * np.abs(f).max()
            out = deform_conv_forward(f, off, wt)
            ref = np.array(oracles.deform_conv(f, off, wt.weight, wt.bias))
            np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-12 * scale)
            if case % 5 == 0:
                plain = deform_conv_forward(f, np.zeros_like(off), wt)
                conv = np.array(oracles.conv2d_same(f, wt.weight, wt.bias))
                np.testing.assert_allclose(plain, conv, rtol=1e-6, atol=1e-12 * scale)


def test_criterion_04_homography():
    with criterion("4 homography identity, uniform translation, DLT residual < 1e-6 px"):
        rng = np.random.default_rng(SEED + 4)
        w, h = 640, 512
        for seed in range(20):
            lam = jitter_homography(w, h, sample_jitter(0.0, seed))
            assert np.abs(lam.matrix - np.eye(3)).max() <= 1e-9
        for _ in range(200):
            t = rng.uniform(-10, 10, 2)
            lam = jitter_homography(w, h, CornerJitter(10.0, np.tile(t, (4, 1)), 0))
            b = BoundingBox(*rng.uniform(0, 300, 2), *rng.uniform(300, 600, 2))
            assert warp_box(b, lam) == translate(b, t[0], t[1])
        corners = image_corners(w, h)
        worst = 0.0
        for seed in range(1000):
            jit = sample_jitter(10.0, SEED, seed)
            lam = solve_homography(corners, corners + jit.shifts)
            worst = max(worst, float(np.abs(project_points(lam, corners) - (corners + jit.shifts)).max()))
        assert worst < 1e-6, worst


def _scene(rng, n=12):
    xy = rng.uniform(0, 60, (n, 2))
    wh = rng.uniform(5, 30, (n, 2))
    scores = np.round(rng.random(n), 2)
    return [ScoredBox(BoundingBox(*xy[i], *(xy[i] + wh[i])), float(scores[i])) for i in range(n)]


def test_criterion_05_nms_oracles():
    with criterion("5 NMS brute force, registered pairwise == decoupled, gate/weights"):
        rng = np.random.default_rng(SEED + 5)
        for _ in range(1000):
            dets = _scene(rng)
            thr = float(rng.choice([0.3, 0.5, 0.65]))
            ref = oracles.greedy_nms([d.box.to_list() for d in dets], [d.score for d in dets], thr)
            assert set(greedy_nms(dets, thr)) == set(ref)
        cfg = NmsConfig()
        for _ in range(300):
            dets = [d for d in _scene(rng) if d.score >= cfg.tau]
            pairs = [DetectionPair(i, d, d) for i, d in enumerate(dets)]
            rgb, thermal = decoupled_nms(pairs, cfg)
            kept = pairwise_nms(pairs, cfg)
            assert [p.rgb for p in kept] == rgb and [p.thermal for p in kept] == thermal
        x, y, tau = rng.random(100_000), rng.random(100_000), rng.random(100_000)
        for a, b, t in zip(x.tolist(), y.tolist(), tau.tolist()):
            lo, hi = (a, b) if a <= b else (b, a)
            assert gate(lo, t) <= gate(hi, t)
            if gate(a, t) + gate(b, t) > 0:
                wa, wb = fusion_weights(a, b, t)
                assert abs(wa + wb - 1.0) <= 1e-15 and wa >= 0 and wb >= 0


def test_criterion_06_hungarian_exhaustive():
    with criterion("6 Hungarian == exhaustive search up to 6x6 (1e3 trials, exact)"):
        rng = np.random.default_rng(SEED + 6)
        for trial in range(1000):
            n, m = (int(v) for v in rng.integers(1, 7, 2))
            cost = rng.integers(0, 30, (n, m)).astype(float) if trial % 2 else rng.random((n, m))
            _, best = oracles.min_assignment(cost.tolist())
            ours = hungarian(cost)
            assert len(ours) == min(n, m)
            assert assignment_cost(cost, ours) == assignment_cost(cost, best)


SCHEDULE = [("tp", 50), ("fp", 2), ("tp", 10), ("fp", 3), ("tp", 10), ("fp", 7), ("tp", 10),
            ("fp", 38), ("tp", 5), ("fp", 50), ("tp", 5)]
HAND_MR_AT_REFS = [0.5, 0.5, 0.4, 0.3, 0.3, 0.2, 0.2, 0.15, 0.1]


def _planted():
    per_image = [([], []) for _ in range(100)]
    score, n_tp, n_fp = 1.0, 0, 0
    for kind, count in SCHEDULE:
        for _ in range(count):
            score -= 1e-3
            if kind == "tp":
                img, n_tp = n_tp, n_tp + 1
            else:
                img, n_fp = n_fp % 100, n_fp + 1
            per_image[img][0].append(score)
            per_image[img][1].append(kind == "tp")
    return [MatchResult(np.array(s), np.array(t, dtype=bool), 1) for s, t in per_image]


def test_criterion_07_evaluation_fixtures():
    with criterion("7 evaluation fixtures exact, suite < 60 s"):
        empty = [MatchResult(np.zeros(0), np.zeros(0, dtype=bool), 2) for _ in range(10)]
        assert build_curve(empty, 10).lamr == 1.0
        half = [MatchResult(np.array([0.8]), np.array([True]), 2) for _ in range(10)]
        assert build_curve(half, 10).lamr == 0.5
        planted = _planted()
        curve = build_curve(planted, 100)
        assert abs(curve.lamr - oracles.lamr_by_hand(HAND_MR_AT_REFS)) <= 1e-9
        doubled = build_curve(planted + planted, 200)
        assert doubled.points == curve.points and doubled.lamr == curve.lamr

        rng = np.random.default_rng(SEED + 7)
        for _ in range(500):
            gts = [BoundingBox.from_xywh(*(rng.integers(0, 480, 2) / 8), 20, 50) for _ in range(4)]
            dets = [ScoredBox(BoundingBox.from_xywh(*(rng.integers(0, 480, 2) / 8), 20, 50), float(rng.random()))
                    for _ in range(6)]
            dx, dy = (int(v) for v in rng.integers(-100, 100, 2))
            a = match_image(dets, gts)
            b = match_image([ScoredBox(translate(d.box, dx, dy), d.score) for d in dets],
                            [translate(g, dx, dy) for g in gts])
            assert np.array_equal(a.tp, b.tp)


def test_criterion_08_shift_sweep_plumbing():
    with criterion("8 level-0 sweep == plain evaluation, rho == mean MR"):
        fx = synth_fixture(SynthConfig(n_images=40, miss_rate=0.1, fp_per_image=0.5, seed=8))
        sizes = {e.image_id: (e.width, e.height) for e in fx.manifest}
        plain = evaluate_modality(fx.detections, fx.gt, "thermal").lamr
        zero = shift_sweep(fx.gt, lambda d, lv: fx.detections, ShiftSweepConfig(levels=(0,)), sizes=sizes)
        assert all(zero.mr[(d, 0)] == plain for d in (0, 45, 90, 135))
        sweep = ShiftSweepConfig(directions=(0, 45), levels=(-6, -3, 0, 3, 6))
        res = shift_sweep(fx.gt, lambda d, lv: fx.detections, sweep, sizes=sizes)
        for d in sweep.directions:
            mrs = [res.mr[(d, lv)] for lv in sweep.levels]
            assert res.rho[d] == math.fsum(mrs) / len(mrs)
            assert len(set(mrs)) > 1


def _gated_shift(capsys, prefix, target, tol):
    gt = os.environ.get(f"{prefix}_GT")
    rgb, thermal = os.environ.get(f"{prefix}_RGB"), os.environ.get(f"{prefix}_THERMAL")
    if gt:
        argv = ["stats", "mean-shift", "--gt", gt]
    elif rgb and thermal:
        argv = ["stats", "mean-shift", "--rgb", rgb, "--thermal", thermal]
    else:
        return None
    assert main(argv) == 0
    line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("mean_shift=")][0]
    shift = float(line.split()[0].split("=")[1])
    assert abs(shift - target) <= tol, shift
    return shift


def test_criterion_09_dataset_mean_shift(capsys):
    with criterion("9 dataset-gated mean shift (CVC-14 17.32 +- 0.5, KAIST 1.4 +- 0.3)"):
        cvc = _gated_shift(capsys, "RGBTKIT_CVC14", 17.32, 0.5)
        kaist = _gated_shift(capsys, "RGBTKIT_KAIST", 1.4, 0.3)
        if cvc is None and kaist is None:
            pytest.skip("set RGBTKIT_CVC14_GT / RGBTKIT_KAIST_GT (or *_RGB and *_THERMAL annotation "
                        "files) to run the dataset checks")


def _pipeline(root: Path):
    fx = root / "fx"
    steps = [
        ["synth", "--out-dir", fx, "--n-images", 6, "--width", 128, "--height", 96, "--fp-per-image", 1,
         "--miss-rate", 0.1, "--seed", 11, "--images"],
        ["synth", "--out-dir", root / "fxh", "--n-images", 4, "--shift-model", "homography", "--seed", 12],
        ["nms", "--dets", fx / "detections.jsonl", "--out", root / "pair.jsonl", "--enclosing", "fused"],
        ["nms", "--dets", fx / "detections.jsonl", "--out", root / "dec.jsonl", "--mode", "decoupled"],
        ["eval", "--dets", root / "pair.jsonl", "--gt", fx / "gt.jsonl", "--modality", "thermal",
         "--out", root / "curve.csv"],
        ["eval", "--dets", root / "dec.jsonl", "--gt", fx / "gt.jsonl", "--modality", "rgb",
         "--manifest", fx / "manifest.jsonl", "--tag", "night", "--out", root / "night.csv"],
        ["homography-aug", "--manifest", fx / "manifest.jsonl", "--gt", fx / "gt.jsonl",
         "--out-dir", root / "aug", "--alpha", 10, "--seed", 5],
        ["stats", "mean-shift", "--gt", root / "fxh" / "gt.jsonl"],
    ]
    assert main([str(a) for a in steps.pop(0)]) == 0
    dets_dir = root / "dets"
    dets_dir.mkdir()
    for lv in (-2, 0, 2):
        (dets_dir / f"0_{lv}.jsonl").write_bytes((fx / "detections.jsonl").read_bytes())
    steps.append(["shift-sweep", "--gt", fx / "gt.jsonl", "--manifest", fx / "manifest.jsonl",
                  "--dets-dir", dets_dir, "--directions", "0", "--levels", "-2,0,2", "--out", root / "sweep.csv"])
    rng = np.random.default_rng(3)
    write_tensor(root / "f.cmft", rng.normal(size=(1, 4, 6, 6)))
    write_tensor(root / "w.cmft", rng.normal(size=(2, 4, 3, 3)))
    write_tensor(root / "o.cmft", rng.normal(size=(1, 2 * 2 * 9, 6, 6)))
    xy = rng.uniform(0, 30, (1, 2, 6, 6))
    write_tensor(root / "p.cmft", np.concatenate([xy, xy + 12.0], axis=1))
    steps.append(["mine", "--features", root / "f.cmft", "--proposals", root / "p.cmft", "--weights",
                  root / "w.cmft", "--offsets", root / "o.cmft", "--out", root / "mined.cmft"])
    for s in steps:
        assert main([str(a) for a in s]) == 0


def test_criterion_10_cli_determinism(tmp_path, capsys):
    with criterion("10 CLI pipelines byte-identical across re-runs"):
        outs = []
        for run in ("a", "b"):
            _pipeline(tmp_path / run)
            outs.append(capsys.readouterr().out.replace(str(tmp_path / run), "<root>"))
        assert outs[0] == outs[1]
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b and len(files_a) > 20
        for f in files_a:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
