"""Training loop and evaluation protocol gluing the detector to the data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, normalize_segment, segment_offsets
from .engine import clip_grad_norm
from .errors import NumericalError
from .evaluate import Detection, EvalReport, Interval, ap_range, nms
from .model import Detector, clip_events_to_segment


@dataclass
class TrainConfig:
    epochs: int = 20
    initial_lr: float = 5e-4
    lr_decay: float = 0.1
    decay_every: int = 10
    grad_clip: float = 10.0
    seed: int = 0
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    eval_every: int = 1

    def lr_at(self, epoch):
        return self.initial_lr * self.lr_decay ** (epoch // self.decay_every)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    val_map: float
    lr: float


def _train_segments(model, dataset: Dataset):
    cfg = model.config
    begin, end = dataset.split_region("train")
    # align segment grid to the region start
    offs = [begin + o for o in segment_offsets(end - begin, cfg.segment_length,
                                               cfg.overlap)] \
        if end - begin >= cfg.segment_length else [begin]
    return offs


def train(model: Detector, dataset: Dataset, config: TrainConfig,
          progress=None):
    """Runs the loop, keeps the best-by-validation checkpoint, returns
    (metrics list, best state dict)."""
    mcfg = model.config
    rng = np.random.default_rng(config.seed)
    optimizer = model.make_optimizer(lr=config.initial_lr)
    offsets = _train_segments(model, dataset)
    train_events = dataset.split_events("train")
    metrics = []
    best_map = -1.0
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    for epoch in range(config.epochs):
        optimizer.lr = config.lr_at(epoch)
        order = rng.permutation(len(offsets))
        losses = []
        for si in order:
            off = offsets[si]
            raw = dataset.waveform[off:off + mcfg.segment_length]
            segment = normalize_segment(raw)
            inside, truncated = clip_events_to_segment(train_events, off,
                                                       mcfg.segment_length)
            optimizer.zero_grad()
            try:
                loss = model.training_step(segment, inside, rng,
                                           neutral_gts=truncated)
            except NumericalError as exc:
                raise NumericalError(
                    f"epoch {epoch}, segment offset {off}: {exc}") from exc
            if loss is None:
                continue
            if config.grad_clip:
                clip_grad_norm(optimizer.params, config.grad_clip)
            optimizer.step()
            losses.append(loss)
        val_map = float("nan")
        if dataset.splits.get("val") and (epoch % config.eval_every == 0
                                          or epoch == config.epochs - 1):
            val_map = evaluate(model, dataset, "val").map
            if val_map > best_map:
                best_map = val_map
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
        entry = EpochMetrics(epoch, float(np.mean(losses)) if losses else float("nan"),
                             val_map, optimizer.lr)
        metrics.append(entry)
        if progress:
            progress(entry)
    if best_map < 0:
        best_state = {k: v.copy() for k, v in model.state_dict().items()}
    if config.checkpoint_path:
        model.load_state_dict(best_state)
        model.save_checkpoint(config.checkpoint_path)
    if config.metrics_path:
        write_metrics_csv(config.metrics_path, metrics)
    return metrics, best_state


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_map", "lr"])
        for m in metrics:
            writer.writerow([m.epoch, f"{m.loss:.6f}", f"{m.val_map:.6f}",
                             f"{m.lr:.2e}"])


def detect_over_region(model: Detector, waveform, begin, end):
    """Run detection over [begin, end) with overlapping segments, map to
    global coordinates, and deduplicate with a second global NMS pass."""
    cfg = model.config
    length = end - begin
    if length < cfg.segment_length:
        offs = [max(0, min(begin, len(waveform) - cfg.segment_length))]
    else:
        offs = [begin + o for o in segment_offsets(length, cfg.segment_length,
                                                   cfg.overlap)]
    pooled = []
    for off in offs:
        segment = normalize_segment(waveform[off:off + cfg.segment_length])
        for det in model.detect(segment):
            iv = Interval(det.interval.begin + off, det.interval.end + off)
            pooled.append(Detection(iv, det.score, det.scale_index))
    merged = nms(pooled, cfg.nms_iou)
    return [d for d in merged if begin <= d.interval.center < end]


def evaluate(model: Detector, dataset: Dataset, split: str) -> EvalReport:
    begin, end = dataset.split_region(split)
    dets = detect_over_region(model, dataset.waveform, begin, end)
    return evaluate_detections(dets, dataset.split_events(split))


def evaluate_detections(dets, events) -> EvalReport:
    return ap_range(dets, events)
