"""Gradient audit: every layer type plus the desk-scale contextual/head stack
against central finite differences in double precision."""

from __future__ import annotations

import numpy as np

from .engine import (AvgPool1d, BatchNorm1d, Conv1d, MaxPool1d, Module, ReLU,
                     Sequential, Sigmoid, grad_check)
from .head import ContextualBlock, SiblingHeads


class _HeadStack(Module):
    """Contextual block followed by the classifier branch, flattened to one
    output so grad_check can drive it."""

    def __init__(self, feature_dim, rng, dtype=np.float64):
        self.context = ContextualBlock(feature_dim, rng=rng, dtype=dtype)
        self.heads = SiblingHeads(feature_dim, rng=rng, dtype=dtype)

    def forward(self, x, train=False):
        h = self.context.forward(x, train)
        logits, offsets = self.heads.forward(h, train)
        return np.concatenate([logits, offsets], axis=1)

    def backward(self, grad_out):
        g = self.heads.backward(grad_out[:, :1], grad_out[:, 1:])
        return self.context.backward(g)


def _layer_cases(rng):
    dt = np.float64
    yield "conv_k3", Conv1d(3, 4, 3, padding=1, rng=rng, dtype=dt), (12, 3)
    yield "conv_strided", Conv1d(2, 3, 3, stride=2, padding=1, rng=rng, dtype=dt), (12, 2)
    yield "conv_dilated", Conv1d(2, 2, 3, dilation=2, padding=2, rng=rng, dtype=dt), (12, 2)
    yield "conv_1x1", Conv1d(4, 2, 1, rng=rng, dtype=dt), (8, 4)
    yield "batchnorm", BatchNorm1d(3, dtype=dt), (10, 3)
    yield "relu", ReLU(), (10, 3)
    yield "sigmoid", Sigmoid(), (10, 3)
    yield "maxpool", MaxPool1d(3, 2, padding=1), (12, 2)
    yield "avgpool", AvgPool1d(2, 2), (12, 2)
    yield "avgpool_odd", AvgPool1d(2, 2, cover_all=True), (11, 2)
    yield "conv_bn_relu", Sequential(Conv1d(2, 3, 3, padding=1, rng=rng, dtype=dt),
                                     BatchNorm1d(3, dtype=dt), ReLU()), (12, 2)


def run_gradcheck_suite(trials=100, tolerance=1e-4, stack_tolerance=1e-4,
                        verbose=False, seed=0):
    """Returns {"max_rel_error", "failed", "per_case"}."""
    rng = np.random.default_rng(seed)
    per_case = {}
    worst = 0.0
    for trial in range(trials):
        for name, layer, shape in _layer_cases(rng):
            x = rng.standard_normal(shape)
            # keep pre-activation signs stable across the FD step
            x[np.abs(x) < 0.05] += 0.1
            rep = grad_check(layer, x, rng=rng)
            err = np.inf if rep.failed else rep.max_rel_error
            per_case[name] = max(per_case.get(name, 0.0), err)
    worst = max(per_case.values())

    stack = _HeadStack(feature_dim=32, rng=rng)
    x = rng.standard_normal((24, 32))
    rep = grad_check(stack, x, rng=rng, max_coords_per_array=24)
    per_case["head_stack"] = np.inf if rep.failed else rep.max_rel_error

    failed = worst > tolerance or per_case["head_stack"] > stack_tolerance
    if verbose:
        for name in sorted(per_case):
            print(f"  {name}: max rel err {per_case[name]:.3e}")
    return {
        "max_rel_error": max(per_case.values()),
        "failed": bool(failed),
        "per_case": per_case,
    }
