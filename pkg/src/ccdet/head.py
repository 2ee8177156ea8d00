"""Anchor geometry, contextual atrous block, shared sibling heads, losses,
proposal sampling, and decoding of detections.

One anchor per feature node: center j * stride, width = the scale's anchor
size.  The head weights are shared across every scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import BatchNorm1d, Concat, Conv1d, Module, ReLU, sigmoid
from .errors import ShapeError
from .evaluate import Detection, Interval, iou_matrix, nms

LOGIT_CLAMP = 20.0
DECODE_WIDTH_CAP = 4.0  # cap on d_w before exp

POSITIVE, NEGATIVE, NEUTRAL = 1, -1, 0


@dataclass
class LossParams:
    alpha: float = 0.5
    lam: float = 10.0
    rho_plus: float = 0.0
    rho_minus: float = 0.0


def derive_alpha(rho_plus, rho_minus):
    """Optimal positive-class weight from the two label-noise rates."""
    for name, rho in (("rho_plus", rho_plus), ("rho_minus", rho_minus)):
        if not 0.0 <= rho < 1.0:
            raise ValueError(f"{name}={rho} outside [0, 1)")
    return (1.0 - rho_plus + rho_minus) / 2.0


@dataclass
class AnchorSet:
    centers: np.ndarray       # float centers in sample coordinates
    width: float              # shared width at this scale
    stride: int
    scale_index: int

    def __len__(self):
        return len(self.centers)

    @property
    def begins(self):
        return self.centers - 0.5 * self.width

    @property
    def ends(self):
        return self.centers + 0.5 * self.width


def generate_anchors(segment_length, stride, width, scale_index) -> AnchorSet:
    if segment_length % stride:
        raise ShapeError(f"segment length {segment_length} not divisible by stride {stride}")
    n = segment_length // stride
    centers = np.arange(n, dtype=np.float64) * stride
    return AnchorSet(centers, float(width), stride, scale_index)


@dataclass
class LabelSet:
    classes: np.ndarray       # +1 / -1 / 0 per anchor
    matched_gt: np.ndarray    # index of matched ground truth (positives only)
    t_x: np.ndarray
    t_w: np.ndarray


def encode_offsets(anchor_center, anchor_width, gt: Interval):
    if gt.width <= 0:
        raise ValueError(f"ground truth {gt} has non-positive width")
    t_x = (gt.center - anchor_center) / anchor_width
    t_w = np.log(gt.width / anchor_width)
    return t_x, t_w


def decode_offsets(anchor_center, anchor_width, d_x, d_w, segment_length=None):
    """Returns (begin, end) floats; d_w above the cap is clamped."""
    d_w = min(d_w, DECODE_WIDTH_CAP)
    g_x = anchor_width * d_x + anchor_center
    g_w = anchor_width * np.exp(d_w)
    begin, end = g_x - 0.5 * g_w, g_x + 0.5 * g_w
    if segment_length is not None:
        begin = max(begin, 0.0)
        end = min(end, float(segment_length))
    return begin, end


def assign_labels(anchors: AnchorSet, ground_truth, neutral_gt=()) -> LabelSet:
    """positive iff best IoU > 0.5; negative iff best IoU < 0.3; else neutral.

    ``neutral_gt`` intervals (e.g. events truncated by the segment boundary)
    force any anchor overlapping them above 0.3 IoU to neutral instead.
    """
    n = len(anchors)
    classes = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    t_x = np.zeros(n)
    t_w = np.zeros(n)
    if ground_truth:
        gts = sorted(ground_truth, key=lambda g: g.begin)  # ties go to earlier begin
        ious = iou_matrix(anchors.begins, anchors.ends,
                          [g.begin for g in gts], [g.end for g in gts])
        best = ious.argmax(axis=1)
        best_iou = ious[np.arange(n), best]
        classes[best_iou >= 0.3] = NEUTRAL
        pos = best_iou > 0.5
        classes[pos] = POSITIVE
        matched[pos] = best[pos]
        for i in np.nonzero(pos)[0]:
            t_x[i], t_w[i] = encode_offsets(anchors.centers[i], anchors.width,
                                            gts[best[i]])
    if len(neutral_gt):
        ious = iou_matrix(anchors.begins, anchors.ends,
                          [g.begin for g in neutral_gt], [g.end for g in neutral_gt])
        touched = ious.max(axis=1) >= 0.3
        classes[touched & (classes != POSITIVE)] = NEUTRAL
    return LabelSet(classes, matched, t_x, t_w)


# ---------------------------------------------------------------------------
# losses (vectorized, with analytic gradients)

def classification_loss(d_cls, t_cls, alpha):
    """Label-dependent logistic loss, numerically stable."""
    d = np.asarray(d_cls, dtype=np.float64)
    t = np.asarray(t_cls)
    # ln(1 + e^{-t*d}) in log-sum-exp form
    z = -t * d
    loss = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    weight = np.where(t > 0, alpha, 1.0 - alpha)
    return weight * loss


def classification_loss_grad(d_cls, t_cls, alpha):
    d = np.asarray(d_cls, dtype=np.float64)
    t = np.asarray(t_cls)
    weight = np.where(t > 0, alpha, 1.0 - alpha)
    # d/dd of ln(1 + e^{-t d}) = -t * sigmoid(-t d)
    return weight * (-t) * sigmoid(-t * d)


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.clip(x, -1.0, 1.0)


def regression_loss(d_u, t_u):
    return smooth_l1(np.asarray(t_u) - np.asarray(d_u))


def joint_loss(d_cls, d_x, d_w, t_cls, t_x, t_w, params: LossParams):
    """Mean joint loss over a sampled batch plus gradients w.r.t. predictions.

    Returns (loss, grad_d_cls, grad_d_x, grad_d_w).  Only positive proposals
    contribute regression terms.
    """
    d_cls = np.asarray(d_cls, dtype=np.float64)
    n = d_cls.size
    if n == 0:
        raise ValueError("joint_loss: empty proposal sample")
    d_clamped = np.clip(d_cls, -LOGIT_CLAMP, LOGIT_CLAMP)
    cls_terms = classification_loss(d_clamped, t_cls, params.alpha)
    g_cls = classification_loss_grad(d_clamped, t_cls, params.alpha) / n
    g_cls[np.abs(d_cls) > LOGIT_CLAMP] = 0.0
    pos = np.asarray(t_cls) > 0
    rx = np.asarray(t_x) - np.asarray(d_x)
    rw = np.asarray(t_w) - np.asarray(d_w)
    reg_terms = np.where(pos, smooth_l1(rx) + smooth_l1(rw), 0.0)
    loss = float(cls_terms.mean() + params.lam * reg_terms.mean())
    g_x = np.where(pos, -params.lam * smooth_l1_grad(rx), 0.0) / n
    g_w = np.where(pos, -params.lam * smooth_l1_grad(rw), 0.0) / n
    return loss, g_cls, g_x, g_w


def sample_proposals(classes, quota, rng):
    """Pick up to ``quota`` anchor indices with positives:negatives at 1:1.

    Positives are capped at quota // 2; the remainder is filled with negatives,
    then neutrals relabelled as negatives when negatives run short.
    Returns (indices, labels in {+1, -1}).
    """
    pos_idx = np.nonzero(classes == POSITIVE)[0]
    neg_idx = np.nonzero(classes == NEGATIVE)[0]
    neu_idx = np.nonzero(classes == NEUTRAL)[0]
    n_pos = min(len(pos_idx), quota // 2)
    chosen_pos = rng.choice(pos_idx, size=n_pos, replace=False) if n_pos else \
        np.empty(0, dtype=np.int64)
    want_neg = min(quota - n_pos, len(neg_idx) + len(neu_idx))
    if len(neg_idx) >= want_neg:
        chosen_neg = rng.choice(neg_idx, size=want_neg, replace=False)
    else:
        extra = rng.choice(neu_idx, size=want_neg - len(neg_idx), replace=False)
        chosen_neg = np.concatenate([neg_idx, extra])
    idx = np.concatenate([chosen_pos, chosen_neg]).astype(np.int64)
    labels = np.concatenate([np.ones(len(chosen_pos)), -np.ones(len(chosen_neg))])
    return idx, labels


# ---------------------------------------------------------------------------
# network modules

class ContextualBlock(Module):
    """Three parallel atrous conv branches (dilations 4/8/12, BN+ReLU) merged
    with the input through a 1x1 convolution back to the feature dimension."""

    def __init__(self, feature_dim, dilations=(4, 8, 12), rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.feature_dim = feature_dim
        self.dilations = tuple(dilations)
        self.branch_convs = [Conv1d(feature_dim, feature_dim, kernel_size=3,
                                    dilation=d, padding=d, rng=rng, dtype=dtype)
                             for d in self.dilations]
        self.branch_bns = [BatchNorm1d(feature_dim, dtype=dtype) for _ in self.dilations]
        self.branch_acts = [ReLU() for _ in self.dilations]
        self.merge = Conv1d(feature_dim * (1 + len(self.dilations)), feature_dim,
                            kernel_size=1, rng=rng, dtype=dtype)

    def forward(self, x, train=False):
        if x.shape[1] != self.feature_dim:
            raise ShapeError(f"contextual block expects {self.feature_dim} channels, "
                             f"got {x.shape[1]}")
        parts = [x]
        for conv, bn, act in zip(self.branch_convs, self.branch_bns, self.branch_acts):
            parts.append(act.forward(bn.forward(conv.forward(x, train), train), train))
        return self.merge.forward(Concat.forward(parts), train)

    def backward(self, grad_out):
        g = self.merge.backward(grad_out)
        counts = [self.feature_dim] * (1 + len(self.dilations))
        parts = Concat.backward(g, counts)
        gx = parts[0].copy()
        for conv, bn, act, gp in zip(reversed(self.branch_convs), reversed(self.branch_bns),
                                     reversed(self.branch_acts), reversed(parts[1:])):
            gx += conv.backward(bn.backward(act.backward(gp)))
        return gx


class SiblingHeads(Module):
    """Per-node classifier logit and (d_x, d_w) offsets; weights shared across
    all scales."""

    def __init__(self, feature_dim, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.cls = Conv1d(feature_dim, 1, kernel_size=1, rng=rng, dtype=dtype)
        self.reg = Conv1d(feature_dim, 2, kernel_size=1, rng=rng, dtype=dtype)

    def forward(self, x, train=False):
        return self.cls.forward(x, train), self.reg.forward(x, train)

    def backward(self, grad_cls, grad_reg):
        return self.cls.backward(grad_cls) + self.reg.backward(grad_reg)


def decode_detections(anchors: AnchorSet, logits, offsets, segment_length,
                      score_threshold=0.5):
    """Candidates where sigmoid(logit) > threshold, decoded and clamped."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    scores = sigmoid(np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP))
    out = []
    for i in np.nonzero(scores > score_threshold)[0]:
        begin, end = decode_offsets(anchors.centers[i], anchors.width,
                                    float(offsets[i, 0]), float(offsets[i, 1]),
                                    segment_length)
        b, e = int(round(begin)), int(round(end))
        if e <= b:
            continue
        out.append(Detection(Interval(b, e), float(scores[i]), anchors.scale_index))
    return out


def detect_from_outputs(anchor_sets, logits_per_scale, offsets_per_scale,
                        segment_length, nms_iou=0.05, score_threshold=0.5):
    """Pool decoded candidates across scales and run global NMS."""
    cands = []
    for anchors, logits, offsets in zip(anchor_sets, logits_per_scale, offsets_per_scale):
        cands.extend(decode_detections(anchors, logits, offsets, segment_length,
                                       score_threshold))
    return nms(cands, nms_iou)
