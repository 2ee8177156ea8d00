"""Release acceptance gate.

Each test prints a `[criterion N] PASS/FAIL` line (visible with `pytest -s`
or on failure) and asserts the release threshold.  The heavy criteria (6-8)
share session-scoped fixtures: one default-dataset training run, one ablation
grid, one template-matching baseline sweep.

Criterion 5 pins the full-preset parameter budget window [2.5M, 3.5M]; the
faithful architecture lands at 1,395,123 parameters, so that assertion is
expected to fail until the budget window is revised (see the analysis in the
project notes).
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from ccdet.data import SynthConfig, generate_synthetic
from ccdet.evaluate import (Detection, Interval, average_precision, iou_1d,
                            nms)
from ccdet.gradreport import run_gradcheck_suite
from ccdet.head import (assign_labels, classification_loss, decode_offsets,
                        derive_alpha, encode_offsets, generate_anchors,
                        smooth_l1)
from ccdet.model import Detector, desk_preset, full_preset
from ccdet.tmatch import Template, detect_tm, mad, normalized_cc, sliding_cc
from ccdet.train import TrainConfig, evaluate, train


def _check(n, ok, desc, detail=""):
    status = "PASS" if ok else "FAIL"
    line = f"[criterion {n}] {status}: {desc}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


def _limit_threads(n):
    """Cap BLAS pools at n threads, never above the core count: on a
    single-core box a larger pool just thrashes."""
    import os
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=min(n, os.cpu_count() or 1))
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# shared heavy fixtures

@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic(SynthConfig())


@pytest.fixture(scope="session")
def trained_desk(default_dataset):
    """The reference 20-epoch desk-preset run on the default dataset."""
    _limit_threads(4)
    model = Detector(desk_preset())
    t0 = time.monotonic()
    train(model, default_dataset, TrainConfig(epochs=20, seed=0, eval_every=2))
    wall = time.monotonic() - t0
    report = evaluate(model, default_dataset, "test")
    return SimpleNamespace(model=model, wall_seconds=wall, report=report)


@pytest.fixture(scope="session")
def ablation_grid(default_dataset):
    """Mean test AP over 3 seeds for the three head/scale variants."""
    _limit_threads(4)
    variants = {
        "contextual-multiscale": dict(contextual=True),
        "noncontextual-multiscale": dict(contextual=False),
        "contextual-singlescale": dict(contextual=True, active_scales=(1,)),
    }
    results = {}
    for name, overrides in variants.items():
        maps = []
        for seed in (0, 1, 2):
            model = Detector(desk_preset(seed=seed, **overrides))
            train(model, default_dataset, TrainConfig(epochs=6, seed=seed,
                                                      eval_every=100))
            maps.append(evaluate(model, default_dataset, "test").map)
        results[name] = float(np.mean(maps))
    return results


# ---------------------------------------------------------------------------
# criterion 1: gradient fidelity

def test_criterion_1_gradient_fidelity():
    t0 = time.monotonic()
    report = run_gradcheck_suite(trials=100, tolerance=1e-4)
    wall = time.monotonic() - t0
    _check(1, not report["failed"] and report["max_rel_error"] < 1e-4
           and wall < 120.0,
           "gradcheck over all layer types + head stack, 100 trials",
           f"max rel err {report['max_rel_error']:.2e}, {wall:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: evaluator oracle equivalence

def _ap_bruteforce(dets, gts, tau):
    order = sorted(dets, key=lambda d: (-d.score, d.interval.begin,
                                        d.scale_index))
    taken, tps = set(), []
    for d in order:
        best = max(((iou_1d(d.interval, g), -g.begin, j)
                    for j, g in enumerate(gts) if j not in taken),
                   default=(0.0, 0, -1))
        if best[2] >= 0 and best[0] >= tau:
            taken.add(best[2])
            tps.append(1)
        else:
            tps.append(0)
    recalls = np.cumsum(tps) / len(gts)
    precisions = np.cumsum(tps) / np.arange(1, len(tps) + 1)
    points = {}
    for i, t in enumerate(tps):
        if not t:
            continue
        r = recalls[i]
        if r not in points:
            points[r] = max(precisions[j] for j in range(i, len(tps)))
    return float(np.mean(list(points.values()))) if points else 0.0


def test_criterion_2_evaluator_oracle():
    # hand case: ranked TP, FP, TP over 2 gts -> recalls 1/2, 1 with
    # max-precision-after 1 and 2/3 -> AP = (1 + 2/3)/2 = 5/6
    gts = [Interval(0, 100), Interval(200, 300)]
    dets = [Detection(Interval(0, 100), 0.9), Detection(Interval(400, 500), 0.8),
            Detection(Interval(200, 300), 0.7)]
    hand = average_precision(dets, gts, 0.5)
    ok = abs(hand - 5 / 6) <= 1e-12
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(500):
        n_gt = int(rng.integers(1, 7))
        gts_r, cursor = [], 0
        for _ in range(n_gt):
            cursor += int(rng.integers(5, 60))
            w = int(rng.integers(10, 90))
            gts_r.append(Interval(cursor, cursor + w))
            cursor += w
        dets_r = []
        for _ in range(int(rng.integers(0, 13))):
            b = int(rng.integers(0, cursor + 50))
            dets_r.append(Detection(Interval(b, b + int(rng.integers(5, 100))),
                                    round(float(rng.random()), 3)))
        for tau in (0.5, 0.75, 0.95):
            if abs(average_precision(dets_r, gts_r, tau)
                   - _ap_bruteforce(dets_r, gts_r, tau)) > 1e-12:
                mismatches += 1
    _check(2, ok and mismatches == 0,
           "AP matches brute-force oracle on 500 instances + 5/6 hand case",
           f"hand {hand:.12f}, mismatches {mismatches}")


# ---------------------------------------------------------------------------
# criterion 3: geometry oracles

def test_criterion_3_geometry_oracles():
    rng = np.random.default_rng(33)
    bad = 0
    # IoU + encode/decode, 1000 cases each
    for _ in range(1000):
        a0 = int(rng.integers(0, 1000)); a1 = a0 + int(rng.integers(1, 500))
        b0 = int(rng.integers(0, 1000)); b1 = b0 + int(rng.integers(1, 500))
        ov = max(0, min(a1, b1) - max(a0, b0))
        want = ov / (max(a1, b1) - min(a0, b0)) if ov > 0 else 0.0
        if abs(iou_1d((a0, a1), (b0, b1)) - want) > 1e-12:
            bad += 1
        c = float(rng.uniform(0, 4096)); w = float(rng.uniform(16, 2048))
        gb = int(rng.integers(0, 4000))
        gt = Interval(gb, gb + int(w * rng.uniform(0.3, 3.0)) + 1)
        t_x, t_w = encode_offsets(c, w, gt)
        db, de = decode_offsets(c, w, t_x, t_w)
        if abs(db - gt.begin) > 1e-9 or abs(de - gt.end) > 1e-9:
            bad += 1
    # NMS vs naive re-implementation, 1000 cases
    for _ in range(1000):
        dets = [Detection(Interval(int(b), int(b) + int(wd)), float(s))
                for b, wd, s in zip(rng.integers(0, 800, 12),
                                    rng.integers(5, 300, 12),
                                    np.round(rng.random(12), 3))]
        kept = nms(dets, 0.05)
        naive = []
        for d in sorted(dets, key=lambda d: (-d.score, d.interval.begin,
                                             d.scale_index)):
            if not any(iou_1d(d.interval, k.interval) > 0.05 for k in naive):
                naive.append(d)
        if kept != naive:
            bad += 1
    # label assignment vs per-anchor loop, 1000 anchor/gt draws
    anchors = generate_anchors(4096, 64, 512, 0)
    for _ in range(20):  # 20 draws x 64 anchors > 1000 anchor decisions
        gts = []
        cursor = 0
        for _ in range(int(rng.integers(1, 5))):
            cursor += int(rng.integers(100, 600))
            w = int(rng.integers(100, 1500))
            gts.append(Interval(cursor, cursor + w))
            cursor += w
        labels = assign_labels(anchors, gts)
        for i in range(len(anchors)):
            best = max(iou_1d((anchors.begins[i], anchors.ends[i]), g)
                       for g in gts)
            want = 1 if best > 0.5 else (-1 if best < 0.3 else 0)
            if labels.classes[i] != want:
                bad += 1
    _check(3, bad == 0, "IoU/NMS/labels/encode-decode match naive references",
           f"{bad} mismatches")


# ---------------------------------------------------------------------------
# criterion 4: loss identities

def test_criterion_4_loss_identities():
    rng = np.random.default_rng(4)
    d = rng.standard_normal(200)
    t = rng.choice([-1, 1], 200)
    lhs = classification_loss(d, t, alpha=0.5)
    rhs = 0.5 * np.log1p(np.exp(-t * d))
    ok = np.allclose(lhs, rhs, rtol=0, atol=1e-12)
    ok = ok and abs(derive_alpha(0.0, 0.1) - 0.55) < 1e-12
    vals = smooth_l1(np.array([0.0, 0.5, 2.0]))
    ok = ok and np.allclose(vals, [0.0, 0.125, 1.5], atol=1e-15)
    _check(4, ok, "alpha=0.5 halves logistic loss; derive_alpha(0,0.1)=0.55; "
                  "smooth-L1 {0,0.5,2} -> {0,0.125,1.5}")


# ---------------------------------------------------------------------------
# criterion 5: architecture ledger (parameter window expected unattainable)

def test_criterion_5_architecture_ledger():
    model = Detector(full_preset())
    x = np.random.default_rng(0).standard_normal(24_576).astype(np.float32)
    pyr = model.backbone.forward(x)
    dims_ok = (
        [f.shape for f in pyr.features]
        == [(24_576 // s, 240) for s in (16, 32, 64, 128, 256, 512, 1024)]
        and pyr.strides == [16, 32, 64, 128, 256, 512, 1024]
        and model.backbone.anchor_sizes == [128, 256, 512, 1024, 2048,
                                            4096, 8192])
    n_params = sum(p.value.size for p in model.params())
    in_window = 2_500_000 <= n_params <= 3_500_000
    _check(5, dims_ok and in_window,
           "full preset reproduces the dimension table and a ~3M parameter "
           "count in [2.5M, 3.5M]",
           f"dims_ok={dims_ok}, parameters={n_params:,} "
           "(faithful architecture; window documented as unattainable)")


# ---------------------------------------------------------------------------
# criterion 6: end-to-end desk-scale learning

def test_criterion_6_end_to_end_learning(trained_desk):
    rep = trained_desk.report
    ap50 = rep.ap_per_threshold[0.5]
    ok = ap50 >= 0.80 and rep.map >= 0.35 and trained_desk.wall_seconds <= 1800
    _check(6, ok, "desk preset, 20 epochs on default dataset: AP@.50 >= 0.80, "
                  "AP@[.50,.95] >= 0.35, <= 30 min",
           f"AP@.50 {ap50:.3f}, mAP {rep.map:.3f}, "
           f"{trained_desk.wall_seconds / 60:.1f} min")


# ---------------------------------------------------------------------------
# criterion 7: ablation ordering

def test_criterion_7_ablation_ordering(ablation_grid):
    ctx = ablation_grid["contextual-multiscale"]
    nonctx = ablation_grid["noncontextual-multiscale"]
    single = ablation_grid["contextual-singlescale"]
    ok = (ctx - nonctx >= 0.02) and (ctx - single >= 0.02)
    _check(7, ok, "contextual-multiscale beats non-contextual and "
                  "single-scale by >= 2 AP (3-seed means)",
           f"ctx {ctx:.3f}, non-ctx {nonctx:.3f}, single {single:.3f}")


# ---------------------------------------------------------------------------
# criterion 8: template-matching baseline ordering

def test_criterion_8_baseline_ordering(trained_desk, default_dataset):
    ds = default_dataset
    templates = []
    for ev in ds.split_events("train")[:400]:
        try:
            templates.append(Template(ds.waveform[ev.begin:ev.end], ev))
        except ValueError:
            continue
    begin, end = ds.split_region("test")
    dets = detect_tm(templates, ds.waveform[begin:end], mu=8.0)
    dets = [Detection(Interval(d.interval.begin + begin,
                               d.interval.end + begin), d.score)
            for d in dets]
    from ccdet.train import evaluate_detections
    tm_map = evaluate_detections(dets, ds.split_events("test")).map
    margin_ok = trained_desk.report.map - tm_map >= 0.20

    # exact-copy recovery: plant copies of one template into fresh noise
    rng = np.random.default_rng(88)
    tpl = templates[0]
    m = tpl.samples.size
    w = rng.standard_normal(60 * m)
    planted = []
    for i in range(10):
        p = (2 + 5 * i) * m
        w[p:p + m] += tpl.samples
        planted.append(Interval(p, p + m))
    copies = detect_tm([tpl], w, mu=8.0)
    hits = sum(1 for g in planted
               if any(iou_1d(d.interval, g) >= 0.5 for d in copies))
    recall_ok = hits >= 5
    _check(8, margin_ok and recall_ok,
           "trained detector beats TM (mu=8) by >= 20 mAP; TM finds >= 50% "
           "of exact copies",
           f"model mAP {trained_desk.report.map:.3f}, TM mAP {tm_map:.3f}, "
           f"copy recall {hits}/10")


# ---------------------------------------------------------------------------
# criterion 9: template-matching unit fidelity

def test_criterion_9_tm_unit_fidelity():
    rng = np.random.default_rng(9)
    a = rng.standard_normal(256)
    ok = abs(normalized_cc(a, a) - 1.0) <= 1e-12
    ok = ok and abs(normalized_cc(a, -a) + 1.0) <= 1e-12
    w = rng.standard_normal(2000)
    t = rng.standard_normal(64)
    from ccdet.tmatch import sliding_cc_naive
    ok = ok and np.max(np.abs(sliding_cc(w, t) - sliding_cc_naive(w, t))) <= 1e-9
    ok = ok and mad([1, 2, 3, 4, 5]) == 1.0
    _check(9, ok, "CC(a,a)=1, CC(a,-a)=-1, fast CC == naive to 1e-9, "
                  "MAD({1..5})=1")


# ---------------------------------------------------------------------------
# criterion 10: determinism

def test_criterion_10_determinism():
    cfg = SynthConfig(total_length=200_000, event_count=50, seed=77)
    a = generate_synthetic(cfg)
    b = generate_synthetic(cfg)
    data_ok = (a.waveform.tobytes() == b.waveform.tobytes()
               and a.events == b.events)
    losses = []
    for _ in range(2):
        model = Detector(desk_preset())
        metrics, _ = train(model, a, TrainConfig(epochs=1, seed=0,
                                                 eval_every=100))
        losses.append(metrics[0].loss)
    _check(10, data_ok and losses[0] == losses[1],
           "identical seeds: bit-identical datasets, identical epoch-0 loss",
           f"losses {losses[0]:.6f} / {losses[1]:.6f}")
