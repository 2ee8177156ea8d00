"""Minimal differentiable 1D tensor engine.

Arrays are (length, channels) float ndarrays.  Every layer caches what its
backward pass needs on a stack, so a layer instance may be applied several
times per step (weight sharing across scales) as long as backward calls come
in reverse order of the forward calls.  Gradients accumulate into ``Param.grad``
until ``zero_grad`` is called.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError, ShapeError


class Param:
    """A trainable array paired with its gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Module:
    """Base class: parameter/state discovery by attribute scan."""

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def __call__(self, x, train=False):
        return self.forward(x, train=train)

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Param, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Param, Module)):
                        yield f"{key}.{i}", item

    def params(self):
        for _, p in self.named_params():
            yield p

    def named_params(self, prefix=""):
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            else:
                yield from val.named_params(prefix=name + ".")

    def named_state(self, prefix=""):
        """Params plus non-trainable buffers (BN running stats)."""
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val.value
            else:
                yield from val.named_state(prefix=name + ".")
        for key, buf in getattr(self, "buffers", lambda: [])():
            yield f"{prefix}{key}", buf

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0


def _check_input(x, channels, who):
    if x.ndim != 2:
        raise ShapeError(f"{who}: expected (length, channels) input, got shape {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f"{who}: expected {channels} input channels, got {x.shape[1]}")


class Conv1d(Module):
    """Dilated/strided 1D convolution with symmetric zero padding.

    Weight layout is (kernel_size, in_channels, out_channels); output node i is
    sum_k x[i*stride + k*dilation] @ W[k] + bias (in padded coordinates).
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, dilation=1,
                 padding=0, rng=None, dtype=np.float32):
        if kernel_size < 1 or stride < 1 or dilation < 1:
            raise ShapeError(
                f"conv1d: kernel_size={kernel_size}, stride={stride}, dilation={dilation} "
                "must all be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        rng = rng or np.random.default_rng(0)
        fan_in = kernel_size * in_channels
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kernel_size, in_channels, out_channels))
        self.weight = Param(w.astype(dtype), "weight")
        self.bias = Param(np.zeros(out_channels, dtype=dtype), "bias")
        self._cache = []

    def out_length(self, length):
        span = self.dilation * (self.kernel_size - 1)
        n = (length + 2 * self.padding - span - 1) // self.stride + 1
        if n < 1:
            raise ShapeError(
                f"conv1d: input length {length} too short for kernel {self.kernel_size} "
                f"dilation {self.dilation} padding {self.padding}")
        return n

    def forward(self, x, train=False):
        _check_input(x, self.in_channels, "conv1d")
        length = x.shape[0]
        n_out = self.out_length(length)
        p = self.padding
        if p:
            xp = np.zeros((length + 2 * p, self.in_channels), dtype=x.dtype)
            xp[p:p + length] = x
        else:
            xp = x
        w = self.weight.value.astype(x.dtype, copy=False)
        out = np.tile(self.bias.value.astype(x.dtype, copy=False), (n_out, 1))
        hi = (n_out - 1) * self.stride + 1
        for k in range(self.kernel_size):
            off = k * self.dilation
            out += xp[off:off + hi:self.stride] @ w[k]
        if train:
            self._cache.append((xp, length))
        return out

    def backward(self, grad_out):
        xp, length = self._cache.pop()
        n_out = grad_out.shape[0]
        if grad_out.shape != (n_out, self.out_channels) or n_out != self.out_length(length):
            raise ShapeError(
                f"conv1d backward: grad_out shape {grad_out.shape} does not match "
                f"output ({self.out_length(length)}, {self.out_channels})")
        w = self.weight.value
        gxp = np.zeros_like(xp)
        hi = (n_out - 1) * self.stride + 1
        for k in range(self.kernel_size):
            off = k * self.dilation
            seg = xp[off:off + hi:self.stride]
            self.weight.grad[k] += seg.T @ grad_out
            gxp[off:off + hi:self.stride] += grad_out @ w[k].astype(grad_out.dtype, copy=False).T
        self.bias.grad += grad_out.sum(axis=0)
        p = self.padding
        return gxp[p:p + length] if p else gxp


class BatchNorm1d(Module):
    """Per-channel batch normalization over the timestep axis.

    By default inference also normalizes with the current input's statistics:
    a "batch" here is one waveform segment, and segment statistics swing with
    event density, so frozen running averages misplace the operating point of
    everything downstream.  Running stats are still tracked (and checkpointed)
    and are used when ``eval_batch_stats`` is off or the input is a single
    timestep.
    """

    def __init__(self, channels, momentum=0.9, epsilon=1e-5, dtype=np.float32,
                 eval_batch_stats=True):
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.eval_batch_stats = eval_batch_stats
        self.scale = Param(np.ones(channels, dtype=dtype), "scale")
        self.shift = Param(np.zeros(channels, dtype=dtype), "shift")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = []

    def buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def forward(self, x, train=False):
        _check_input(x, self.channels, "batchnorm")
        if train:
            if x.shape[0] < 2:
                raise ShapeError(
                    f"batchnorm: train-mode batch of length {x.shape[0]} is degenerate")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            xhat = (x - mean) * inv_std
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * mean
            self.running_var[...] = m * self.running_var + (1 - m) * var
            self._cache.append((xhat, inv_std))
        elif self.eval_batch_stats and x.shape[0] >= 2:
            mean = x.mean(axis=0)
            inv_std = 1.0 / np.sqrt(x.var(axis=0) + self.epsilon)
            xhat = (x - mean) * inv_std
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.epsilon)
            xhat = (x - self.running_mean) * inv_std
        return xhat * self.scale.value + self.shift.value

    def backward(self, grad_out):
        xhat, inv_std = self._cache.pop()
        g = grad_out * self.scale.value
        self.scale.grad += (grad_out * xhat).sum(axis=0)
        self.shift.grad += grad_out.sum(axis=0)
        # d/dx of ((x - mean)/std * scale) with mean/var functions of x
        return inv_std * (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0))


class ReLU(Module):
    def __init__(self):
        self._cache = []

    def forward(self, x, train=False):
        mask = x > 0
        if train:
            self._cache.append(mask)
        return np.where(mask, x, 0.0)

    def backward(self, grad_out):
        mask = self._cache.pop()
        return np.where(mask, grad_out, 0.0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Module):
    def __init__(self):
        self._cache = []

    def forward(self, x, train=False):
        out = sigmoid(x)
        if train:
            self._cache.append(out)
        return out

    def backward(self, grad_out):
        out = self._cache.pop()
        return grad_out * out * (1.0 - out)


class MaxPool1d(Module):
    """Max pooling; backward routes the gradient to the first argmax on ties."""

    def __init__(self, pool, stride, padding=0):
        if pool < 1 or stride < 1:
            raise ShapeError(f"maxpool: pool={pool}, stride={stride} must be >= 1")
        self.pool = pool
        self.stride = stride
        self.padding = padding
        self._cache = []

    def out_length(self, length):
        return (length + 2 * self.padding - self.pool) // self.stride + 1

    def forward(self, x, train=False):
        _check_input(x, None, "maxpool")
        length, channels = x.shape
        p = self.padding
        if p:
            xp = np.full((length + 2 * p, channels), -np.inf, dtype=x.dtype)
            xp[p:p + length] = x
        else:
            xp = x
        n_out = self.out_length(length)
        hi = (n_out - 1) * self.stride + 1
        windows = np.stack([xp[k:k + hi:self.stride] for k in range(self.pool)], axis=1)
        arg = windows.argmax(axis=1)  # first max on ties
        out = np.take_along_axis(windows, arg[:, None, :], axis=1)[:, 0, :]
        if train:
            self._cache.append((arg, length))
        return out

    def backward(self, grad_out):
        arg, length = self._cache.pop()
        n_out, channels = grad_out.shape
        gxp = np.zeros((length + 2 * self.padding, channels), dtype=grad_out.dtype)
        rows = np.arange(n_out)[:, None] * self.stride + arg
        np.add.at(gxp, (rows, np.arange(channels)[None, :]), grad_out)
        p = self.padding
        return gxp[p:p + length] if p else gxp


class AvgPool1d(Module):
    """Average pooling.  With ``cover_all`` a trailing partial window is kept
    and averaged over the samples it actually covers (pad-then-pool with floor
    semantics for odd lengths)."""

    def __init__(self, pool, stride, cover_all=False):
        if pool < 1 or stride < 1:
            raise ShapeError(f"avgpool: pool={pool}, stride={stride} must be >= 1")
        self.pool = pool
        self.stride = stride
        self.cover_all = cover_all
        self._cache = []

    def out_length(self, length):
        if self.cover_all:
            return -((length - self.pool) // -self.stride) + 1 if length > self.pool \
                else 1
        return (length - self.pool) // self.stride + 1

    def forward(self, x, train=False):
        _check_input(x, None, "avgpool")
        length, channels = x.shape
        n_out = self.out_length(length)
        pad_to = (n_out - 1) * self.stride + self.pool
        if pad_to > length:
            xp = np.zeros((pad_to, channels), dtype=x.dtype)
            xp[:length] = x
        else:
            xp = x
        hi = (n_out - 1) * self.stride + 1
        out = np.zeros((n_out, channels), dtype=x.dtype)
        for k in range(self.pool):
            out += xp[k:k + hi:self.stride]
        counts = np.minimum(
            np.arange(n_out) * self.stride + self.pool, length) - np.arange(n_out) * self.stride
        out /= counts[:, None]
        if train:
            self._cache.append((length, counts))
        return out

    def backward(self, grad_out):
        length, counts = self._cache.pop()
        n_out, channels = grad_out.shape
        pad_to = (n_out - 1) * self.stride + self.pool
        gxp = np.zeros((max(pad_to, length), channels), dtype=grad_out.dtype)
        g = grad_out / counts[:, None]
        hi = (n_out - 1) * self.stride + 1
        for k in range(self.pool):
            gxp[k:k + hi:self.stride] += g
        return gxp[:length]


class Concat:
    """Channel-wise concatenation with a split backward.  Functional helper."""

    @staticmethod
    def forward(xs):
        lengths = {x.shape[0] for x in xs}
        if len(lengths) != 1:
            raise ShapeError(f"concat: inputs disagree on length: {sorted(lengths)}")
        return np.concatenate(xs, axis=1)

    @staticmethod
    def backward(grad_out, channel_counts):
        splits = np.cumsum(channel_counts)[:-1]
        return np.split(grad_out, splits, axis=1)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


class Adam:
    """Adam with bias correction; one shared step counter for all parameters."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_grad_norm(params, max_norm):
    total = 0.0
    for p in params:
        total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


class GradCheckReport:
    def __init__(self, max_rel_error, per_param, skipped=0, failed=False, reason=""):
        self.max_rel_error = max_rel_error
        self.per_param = per_param  # name -> max rel error
        self.skipped = skipped
        self.failed = failed
        self.reason = reason

    def __repr__(self):
        return (f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
                f"skipped={self.skipped}, failed={self.failed})")


def _clear_caches(mod):
    cache = getattr(mod, "_cache", None)
    if cache is not None:
        cache.clear()
    for _, child in mod._children():
        if isinstance(child, Module):
            _clear_caches(child)


def _rel_err(a, n):
    denom = max(abs(a), abs(n))
    if denom < 1e-7:
        return abs(a - n)
    return abs(a - n) / denom


def grad_check(fragment, x, h=1e-5, max_coords_per_array=None, rng=None,
               check_input=True):
    """Compare analytic gradients of ``sum(out * R)`` against central differences.

    ``fragment`` is any Module; everything runs in float64.  Coordinates where
    two finite-difference step sizes disagree (ReLU kink crossings) are skipped.
    Returns a GradCheckReport.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = rng or np.random.default_rng(0)

    probe = fragment.forward(x, train=True)
    _clear_caches(fragment)
    weights = rng.standard_normal(probe.shape)

    def loss_at():
        out = fragment.forward(x, train=True)
        _clear_caches(fragment)
        return float((out * weights).sum())

    fragment.zero_grad()
    out = fragment.forward(x, train=True)
    if not np.all(np.isfinite(out)):
        return GradCheckReport(np.inf, {}, failed=True, reason="non-finite forward")
    grad_in = fragment.backward(weights)
    # Collect (name, analytic grad array, setter target) for params and input.
    targets = [(name, p.value, p.grad.copy()) for name, p in fragment.named_params()]
    if check_input:
        targets.append(("input", x, np.asarray(grad_in)))

    per_param = {}
    max_err = 0.0
    skipped = 0
    for name, arr, agrad in targets:
        flat = arr.reshape(-1)
        aflat = agrad.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords_per_array is not None and flat.size > max_coords_per_array:
            idx = rng.choice(flat.size, size=max_coords_per_array, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            ests = []
            for step in (h, 0.5 * h):
                flat[i] = orig + step
                lp = loss_at()
                flat[i] = orig - step
                lm = loss_at()
                ests.append((lp - lm) / (2 * step))
            flat[i] = orig
            n1, n2 = ests
            if not (np.isfinite(n1) and np.isfinite(n2)):
                return GradCheckReport(np.inf, per_param, failed=True,
                                       reason="non-finite finite difference")
            # inconsistent FD estimates mean a kink was crossed; skip the coord
            if abs(n1 - n2) > 1e-4 * max(1.0, abs(n1), abs(n2)):
                skipped += 1
                continue
            worst = max(worst, _rel_err(aflat[i], n2))
        per_param[name] = worst
        max_err = max(max_err, worst)
    return GradCheckReport(max_err, per_param, skipped=skipped)
