"""Training-loop behavior: schedule, determinism, checkpointing, and the
evaluation plumbing.  Learning-quality thresholds live in the acceptance
tests; here training runs are kept tiny.
"""

import csv

import numpy as np
import pytest

from ccdet.data import SynthConfig, generate_synthetic, normalize_segment
from ccdet.errors import NumericalError
from ccdet.evaluate import Detection, Interval
from ccdet.head import LossParams
from ccdet.model import Detector, clip_events_to_segment, desk_preset
from ccdet.train import (TrainConfig, detect_over_region, evaluate,
                         evaluate_detections, train, write_metrics_csv)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_synthetic(SynthConfig(total_length=60_000, event_count=15,
                                          seed=11))


def _quick_config(**kw):
    base = dict(epochs=1, seed=0, eval_every=100)
    base.update(kw)
    return TrainConfig(**base)


class TestLrSchedule:
    def test_decimation_every_ten_epochs(self):
        cfg = TrainConfig(initial_lr=5e-4, lr_decay=0.1, decay_every=10)
        assert cfg.lr_at(0) == pytest.approx(5e-4)
        assert cfg.lr_at(9) == pytest.approx(5e-4)
        assert cfg.lr_at(10) == pytest.approx(5e-5)
        assert cfg.lr_at(19) == pytest.approx(5e-5)
        assert cfg.lr_at(20) == pytest.approx(5e-6)

    def test_defaults_match_published_protocol(self):
        cfg = TrainConfig()
        assert cfg.initial_lr == 5e-4
        assert cfg.lr_decay == 0.1
        assert cfg.decay_every == 10
        assert cfg.epochs == 20


class TestClipEventsToSegment:
    def test_partition(self):
        events = [Interval(0, 100), Interval(900, 1100), Interval(1500, 1600),
                  Interval(2900, 3100), Interval(5000, 5100)]
        inside, truncated = clip_events_to_segment(events, 1000, 2048)
        assert inside == [Interval(500, 600)]
        assert truncated == [Interval(0, 100), Interval(1900, 2048)]

    def test_far_events_dropped(self):
        inside, truncated = clip_events_to_segment([Interval(0, 10)], 5000, 1024)
        assert inside == [] and truncated == []


class TestTrainLoop:
    def test_zero_epochs_leaves_weights_untouched(self, tiny_ds):
        model = Detector(desk_preset())
        before = {k: v.copy() for k, v in model.state_dict().items()}
        metrics, _ = train(model, tiny_ds, _quick_config(epochs=0))
        assert metrics == []
        for k, v in model.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_loss_decreases_on_one_segment_overfit(self, tiny_ds):
        model = Detector(desk_preset())
        cfg = model.config
        off = 0
        seg = normalize_segment(tiny_ds.waveform[off:off + cfg.segment_length])
        inside, truncated = clip_events_to_segment(tiny_ds.events, off,
                                                   cfg.segment_length)
        rng = np.random.default_rng(0)
        opt = model.make_optimizer(lr=1e-3)
        losses = []
        for _ in range(30):
            opt.zero_grad()
            loss = model.training_step(seg, inside, rng, neutral_gts=truncated)
            opt.step()
            losses.append(loss)
        assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])

    def test_seed_determinism(self, tiny_ds):
        runs = []
        for _ in range(2):
            model = Detector(desk_preset())
            metrics, _ = train(model, tiny_ds, _quick_config(epochs=2, seed=3))
            runs.append(([m.loss for m in metrics], model.state_dict()))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])

    def test_metrics_csv_schema(self, tiny_ds, tmp_path):
        model = Detector(desk_preset())
        path = tmp_path / "metrics.csv"
        train(model, tiny_ds, _quick_config(epochs=2, eval_every=1,
                                            metrics_path=str(path)))
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "loss", "val_map", "lr"]
        assert len(rows) == 3
        assert [r[0] for r in rows[1:]] == ["0", "1"]
        for r in rows[1:]:
            float(r[1]), float(r[2]), float(r[3])

    def test_checkpoint_round_trip_preserves_predictions(self, tiny_ds, tmp_path):
        model = Detector(desk_preset())
        ckpt = tmp_path / "model.ckpt"
        train(model, tiny_ds, _quick_config(epochs=1, eval_every=1,
                                            checkpoint_path=str(ckpt)))
        seg = normalize_segment(tiny_ds.waveform[:model.config.segment_length])
        before = model.detect(seg)
        clone = Detector(desk_preset())
        clone.load_checkpoint(ckpt)
        after = clone.detect(seg)
        assert [(d.interval, round(d.score, 5)) for d in before] == \
            [(d.interval, round(d.score, 5)) for d in after]

    def test_non_finite_loss_raises_numerical_error(self, tiny_ds):
        model = Detector(desk_preset())
        # poison a head weight so logits go to NaN
        model.heads.cls.weight.value[...] = np.nan
        with pytest.raises(NumericalError):
            train(model, tiny_ds, _quick_config(epochs=1))


class TestLossParamsPlumbing:
    def test_lambda_zero_trains_classification_only(self, tiny_ds):
        model = Detector(desk_preset(loss=LossParams(alpha=0.55, lam=0.0)))
        seg = normalize_segment(tiny_ds.waveform[:model.config.segment_length])
        inside, truncated = clip_events_to_segment(tiny_ds.events, 0,
                                                   model.config.segment_length)
        rng = np.random.default_rng(0)
        model.zero_grad()
        model.training_step(seg, inside, rng, neutral_gts=truncated)
        # regression head receives no gradient
        assert float(np.abs(model.heads.reg.weight.grad).sum()) == 0.0
        assert float(np.abs(model.heads.cls.weight.grad).sum()) > 0.0


class TestEvaluationPlumbing:
    def test_oracle_detections_score_perfect_map(self, tiny_ds):
        gts = tiny_ds.split_events("test")
        dets = [Detection(g, 0.99) for g in gts]
        rep = evaluate_detections(dets, gts)
        assert rep.map == 1.0
        assert rep.missed == 0 and rep.fp == 0

    def test_detect_over_region_returns_global_coordinates(self, tiny_ds):
        model = Detector(desk_preset())
        begin, end = tiny_ds.split_region("test")
        dets = detect_over_region(model, tiny_ds.waveform, begin, end)
        for d in dets:
            assert begin <= d.interval.center < end

    def test_evaluate_runs_end_to_end_untrained(self, tiny_ds):
        model = Detector(desk_preset())
        rep = evaluate(model, tiny_ds, "test")
        assert 0.0 <= rep.map <= 1.0
