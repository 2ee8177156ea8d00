"""Cascaded densely connected backbone producing multi-scale proposal features.

The stem downsamples by 4 (conv7 stride 2, max-pool3 stride 2); dense blocks
alternate with transitions (optional 1x1 compression + avg-pool2 stride 2).
The last ``num_scales`` dense blocks are detection stages; each emits exactly
``feature_dim`` channels, at input strides 16, 32, ... doubling per stage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .engine import (AvgPool1d, BatchNorm1d, Concat, Conv1d, MaxPool1d, Module,
                     ReLU)
from .errors import DataFormatError, ShapeError

CHECKPOINT_MAGIC = b"CCR1"
CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    stem_channels: int = 24
    growth_rates: tuple = (12, 12, 12, 20, 20, 20, 20, 20, 20)  # per dense block
    layers_per_block: int = 6
    num_scales: int = 7               # last num_scales blocks are detection stages
    # channels after each transition's optional 1x1 compression (None = keep);
    # one entry per transition (len(growth_rates) - 1 transitions)
    compress: tuple = (None, None, 120, 120, 120, 120, 120, 120)
    feature_dim: int = 240
    seed: int = 0

    def __post_init__(self):
        if len(self.compress) != len(self.growth_rates) - 1:
            raise ShapeError(
                f"backbone config: {len(self.growth_rates)} blocks need "
                f"{len(self.growth_rates) - 1} transitions, got {len(self.compress)}")
        if self.num_scales > len(self.growth_rates):
            raise ShapeError("more detection scales than dense blocks")

    @property
    def base_stride(self):
        return 16  # stem /4, two pre-detection transitions /2 each

    def scale_strides(self):
        return [self.base_stride * 2 ** i for i in range(self.num_scales)]


def full_config() -> BackboneConfig:
    return BackboneConfig()


def desk_config() -> BackboneConfig:
    return BackboneConfig(
        stem_channels=16,
        growth_rates=(8, 8, 8, 8, 8),
        layers_per_block=4,
        num_scales=3,
        compress=(None, 64, 64, 64),
        feature_dim=96,
    )


@dataclass
class FeaturePyramid:
    features: list                 # per-scale (length_i, feature_dim) arrays
    strides: list                  # stride of each scale on the input
    anchor_sizes: list
    segment_length: int = 0


class DenseLayer(Module):
    """Pre-activation composite: concat(x, conv3(relu(bn(x))))."""

    def __init__(self, in_channels, growth, rng, dtype):
        self.bn = BatchNorm1d(in_channels, dtype=dtype)
        self.act = ReLU()
        self.conv = Conv1d(in_channels, growth, kernel_size=3, padding=1,
                           rng=rng, dtype=dtype)
        self.in_channels = in_channels
        self.growth = growth

    def forward(self, x, train=False):
        h = self.conv.forward(self.act.forward(self.bn.forward(x, train), train), train)
        return Concat.forward([x, h])

    def backward(self, grad_out):
        gx, gh = Concat.backward(grad_out, [self.in_channels, self.growth])
        gx = gx + self.bn.backward(self.act.backward(self.conv.backward(gh)))
        return gx


class DenseBlock(Module):
    def __init__(self, in_channels, growth, layers, rng, dtype=np.float32):
        self.layers = [DenseLayer(in_channels + i * growth, growth, rng, dtype)
                       for i in range(layers)]
        self.out_channels = in_channels + growth * layers

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


class Transition(Module):
    """Optional BN-ReLU-conv1 compression followed by avg-pool2 stride 2."""

    def __init__(self, in_channels, compress_to, rng, dtype=np.float32):
        if compress_to is not None:
            self.bn = BatchNorm1d(in_channels, dtype=dtype)
            self.act = ReLU()
            self.conv = Conv1d(in_channels, compress_to, kernel_size=1, rng=rng,
                               dtype=dtype)
        else:
            self.bn = self.act = self.conv = None
        self.pool = AvgPool1d(2, 2, cover_all=True)
        self.out_channels = compress_to if compress_to is not None else in_channels

    def forward(self, x, train=False):
        if self.conv is not None:
            x = self.conv.forward(self.act.forward(self.bn.forward(x, train), train), train)
        return self.pool.forward(x, train)

    def backward(self, grad_out):
        grad_out = self.pool.backward(grad_out)
        if self.conv is not None:
            grad_out = self.bn.backward(self.act.backward(self.conv.backward(grad_out)))
        return grad_out


class Backbone(Module):
    def __init__(self, config: BackboneConfig, first_anchor=128, dtype=np.float32):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.stem_conv = Conv1d(1, config.stem_channels, kernel_size=7, stride=2,
                                padding=3, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm1d(config.stem_channels, dtype=dtype)
        self.stem_act = ReLU()
        self.stem_pool = MaxPool1d(3, 2, padding=1)
        self.blocks = []
        self.transitions = []
        channels = config.stem_channels
        n_blocks = len(config.growth_rates)
        self.first_detection = n_blocks - config.num_scales
        for i, growth in enumerate(config.growth_rates):
            block = DenseBlock(channels, growth, config.layers_per_block, rng, dtype)
            self.blocks.append(block)
            channels = block.out_channels
            if i >= self.first_detection and channels != config.feature_dim:
                raise ShapeError(
                    f"detection block {i} emits {channels} channels, expected "
                    f"{config.feature_dim}")
            if i < n_blocks - 1:
                tr = Transition(channels, config.compress[i], rng, dtype)
                self.transitions.append(tr)
                channels = tr.out_channels
        self.anchor_sizes = [first_anchor * 2 ** i for i in range(config.num_scales)]

    def required_multiple(self):
        return self.config.base_stride * 2 ** (self.config.num_scales - 1)

    def forward(self, segment, train=False):
        """segment: (L,) or (L, 1) array -> FeaturePyramid."""
        x = np.asarray(segment)
        if x.ndim == 1:
            x = x[:, None]
        length = x.shape[0]
        mult = self.required_multiple()
        if length % mult:
            raise ShapeError(
                f"segment length {length} must be a multiple of {mult}")
        x = self.stem_pool.forward(
            self.stem_act.forward(self.stem_bn.forward(
                self.stem_conv.forward(x, train), train), train), train)
        features = []
        for i, block in enumerate(self.blocks):
            x = block.forward(x, train)
            if i >= self.first_detection:
                features.append(x)
            if i < len(self.transitions):
                x = self.transitions[i].forward(x, train)
        return FeaturePyramid(features, self.config.scale_strides(),
                              list(self.anchor_sizes), length)

    def backward(self, scale_grads):
        """scale_grads: one gradient array per detection scale, deepest last."""
        if len(scale_grads) != self.config.num_scales:
            raise ShapeError(
                f"expected {self.config.num_scales} scale gradients, got {len(scale_grads)}")
        grad = None
        for i in reversed(range(len(self.blocks))):
            if i < len(self.transitions):
                grad = self.transitions[i].backward(grad)
            if i >= self.first_detection:
                g = scale_grads[i - self.first_detection]
                grad = g if grad is None else grad + g
            grad = self.blocks[i].backward(grad)
        grad = self.stem_conv.backward(self.stem_bn.backward(
            self.stem_act.backward(self.stem_pool.backward(grad))))
        return grad

    def parameter_count(self, include_buffers=False):
        total = sum(p.value.size for p in self.params())
        if include_buffers:
            total += sum(v.size for n, v in self.named_state() if "running" in n)
        return total


# ---------------------------------------------------------------------------
# checkpoint format: magic "CCR1", u32 version, u32 entry count, then per entry
# u32 name length, utf-8 name, u32 ndim, u32 dims..., little-endian f32 data.

def save_state(path, named_arrays):
    items = list(named_arrays)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_state(path):
    def need(fh, n, what):
        data = fh.read(n)
        if len(data) < n:
            raise DataFormatError(f"{path}: truncated while reading {what}")
        return data

    out = {}
    with open(path, "rb") as fh:
        if need(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: bad checkpoint magic at byte 0")
        version, count = struct.unpack("<II", need(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", need(fh, 4, "name length"))
            name = need(fh, nlen, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", need(fh, 4, "ndim"))
            shape = struct.unpack(f"<{ndim}I", need(fh, 4 * ndim, "shape"))
            size = int(np.prod(shape)) if ndim else 1
            data = need(fh, 4 * size, f"data for {name}")
            out[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return out
