"""Full detector: backbone + contextual block + shared sibling heads."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone as bb
from .engine import Adam, Module
from .errors import NumericalError
from .evaluate import Interval
from .head import (ContextualBlock, LossParams, SiblingHeads, assign_labels,
                   detect_from_outputs, generate_anchors, joint_loss,
                   sample_proposals)

FULL_QUOTAS = (64, 64, 64, 64, 32, 32, 16)
DESK_QUOTAS = (64, 64, 32)


@dataclass
class ModelConfig:
    backbone: bb.BackboneConfig = field(default_factory=bb.full_config)
    first_anchor: int = 128
    dilations: tuple = (4, 8, 12)
    contextual: bool = True
    active_scales: tuple | None = None    # None = all scales
    quotas: tuple = FULL_QUOTAS
    loss: LossParams = field(default_factory=LossParams)
    segment_length: int = 24_576
    overlap: float = 0.5
    nms_iou: float = 0.05
    score_threshold: float = 0.5
    seed: int = 0

    def scales(self):
        if self.active_scales is None:
            return tuple(range(self.backbone.num_scales))
        return tuple(self.active_scales)


def full_preset(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


def desk_preset(**overrides) -> ModelConfig:
    cfg = ModelConfig(
        backbone=bb.desk_config(),
        first_anchor=512,
        quotas=DESK_QUOTAS,
        segment_length=4096,
    )
    return replace(cfg, **overrides)


class Detector(Module):
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone = bb.Backbone(config.backbone, first_anchor=config.first_anchor,
                                    dtype=dtype)
        feature_dim = config.backbone.feature_dim
        self.contextual = ContextualBlock(feature_dim, config.dilations, rng, dtype) \
            if config.contextual else None
        self.heads = SiblingHeads(feature_dim, rng, dtype)
        self._anchor_cache = {}

    # -- plumbing ----------------------------------------------------------

    def anchor_sets(self, segment_length):
        key = segment_length
        if key not in self._anchor_cache:
            strides = self.config.backbone.scale_strides()
            sizes = self.backbone.anchor_sizes
            self._anchor_cache[key] = [
                generate_anchors(segment_length, strides[i], sizes[i], i)
                for i in range(self.config.backbone.num_scales)]
        return self._anchor_cache[key]

    def forward_heads(self, segment, train=False):
        """Returns (pyramid, logits per scale, offsets per scale); inactive
        scales get None outputs."""
        pyramid = self.backbone.forward(segment, train)
        active = set(self.config.scales())
        logits, offsets = [], []
        for i, feat in enumerate(pyramid.features):
            if i not in active:
                logits.append(None)
                offsets.append(None)
                continue
            h = self.contextual.forward(feat, train) if self.contextual else feat
            lg, off = self.heads.forward(h, train)
            logits.append(lg)
            offsets.append(off)
        return pyramid, logits, offsets

    def backward_heads(self, pyramid, grad_logits, grad_offsets):
        """Backward through heads/contextual (reverse scale order), then the
        backbone.  Inactive scales contribute zero gradients."""
        active = set(self.config.scales())
        scale_grads = [None] * len(pyramid.features)
        for i in reversed(range(len(pyramid.features))):
            feat = pyramid.features[i]
            if i not in active:
                scale_grads[i] = np.zeros_like(feat)
                continue
            g = self.heads.backward(grad_logits[i].astype(feat.dtype),
                                    grad_offsets[i].astype(feat.dtype))
            if self.contextual:
                g = self.contextual.backward(g)
            scale_grads[i] = g
        self.backbone.backward(scale_grads)

    # -- training ----------------------------------------------------------

    def training_step(self, segment, gts, rng, neutral_gts=()):
        """One forward/backward on a normalized segment.  Leaves gradients in
        the parameters; returns the joint loss (or None if nothing sampled)."""
        cfg = self.config
        pyramid, logits, offsets = self.forward_heads(segment, train=True)
        anchors = self.anchor_sets(len(segment))
        batches = []  # per active scale: (i, idx, labels, t_x, t_w)
        for i in cfg.scales():
            labels = assign_labels(anchors[i], gts, neutral_gts)
            idx, cls = sample_proposals(labels.classes, cfg.quotas[i], rng)
            if len(idx):
                batches.append((i, idx, cls, labels.t_x[idx], labels.t_w[idx]))
        if not batches:
            self._drain(pyramid, logits, offsets)
            return None
        d_cls = np.concatenate([logits[i][idx, 0] for i, idx, *_ in batches])
        d_x = np.concatenate([offsets[i][idx, 0] for i, idx, *_ in batches])
        d_w = np.concatenate([offsets[i][idx, 1] for i, idx, *_ in batches])
        t_cls = np.concatenate([b[2] for b in batches])
        t_x = np.concatenate([b[3] for b in batches])
        t_w = np.concatenate([b[4] for b in batches])
        loss, g_cls, g_x, g_w = joint_loss(d_cls, d_x, d_w, t_cls, t_x, t_w, cfg.loss)
        if not np.isfinite(loss):
            raise NumericalError(
                f"non-finite loss on segment with {len(gts)} events; "
                f"logit range [{d_cls.min():.3g}, {d_cls.max():.3g}]")
        grad_logits = [None] * len(logits)
        grad_offsets = [None] * len(offsets)
        pos = 0
        for i, idx, *_ in batches:
            n = len(idx)
            gl = np.zeros_like(logits[i])
            go = np.zeros_like(offsets[i])
            gl[idx, 0] = g_cls[pos:pos + n]
            go[idx, 0] = g_x[pos:pos + n]
            go[idx, 1] = g_w[pos:pos + n]
            grad_logits[i] = gl
            grad_offsets[i] = go
            pos += n
        for i in cfg.scales():
            if grad_logits[i] is None:  # active scale with empty sample
                grad_logits[i] = np.zeros_like(logits[i])
                grad_offsets[i] = np.zeros_like(offsets[i])
        self.backward_heads(pyramid, grad_logits, grad_offsets)
        return loss

    def _drain(self, pyramid, logits, offsets):
        # backward zeros to unwind the cache stacks
        zl = [np.zeros_like(lg) if lg is not None else None for lg in logits]
        zo = [np.zeros_like(off) if off is not None else None for off in offsets]
        self.backward_heads(pyramid, zl, zo)

    # -- inference ---------------------------------------------------------

    def detect(self, segment):
        """Detections in local segment coordinates (segment pre-normalized)."""
        pyramid, logits, offsets = self.forward_heads(segment, train=False)
        anchors = self.anchor_sets(len(segment))
        active = self.config.scales()
        return detect_from_outputs(
            [anchors[i] for i in active],
            [logits[i] for i in active],
            [offsets[i] for i in active],
            len(segment), self.config.nms_iou, self.config.score_threshold)

    # -- persistence -------------------------------------------------------

    def state_dict(self):
        return dict(self.named_state())

    def load_state_dict(self, state):
        for name, arr in self.named_state():
            if name not in state:
                raise KeyError(f"checkpoint missing array {name!r}")
            arr[...] = state[name].reshape(arr.shape)

    def save_checkpoint(self, path):
        bb.save_state(path, self.named_state())

    def load_checkpoint(self, path):
        self.load_state_dict(bb.load_state(path))

    def make_optimizer(self, lr=5e-4):
        return Adam(list(self.params()), lr=lr)


def clip_events_to_segment(events, offset, length):
    """Split global events into (fully inside local intervals, truncated local
    intervals).  Truncated events only mark anchors neutral during training."""
    inside, truncated = [], []
    for ev in events:
        if ev.end <= offset or ev.begin >= offset + length:
            continue
        b = ev.begin - offset
        e = ev.end - offset
        if b >= 0 and e <= length:
            inside.append(Interval(b, e))
        else:
            truncated.append(Interval(max(b, 0), min(e, length)))
    return inside, truncated
