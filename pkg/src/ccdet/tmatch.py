"""Template-matching baseline: sliding normalized cross-correlation per
template, MAD-based thresholding, and greedy cross-template suppression.

CC is raw cosine similarity (no mean subtraction), matching the detector it
is compared against; a zero-mean variant is available by flag.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve, find_peaks

from .evaluate import Detection, Interval, nms


@dataclass
class Template:
    samples: np.ndarray
    source_interval: Interval

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size < 2:
            raise ValueError("template shorter than 2 samples")
        if not np.linalg.norm(self.samples) > 0:
            raise ValueError("template has zero norm")


def normalized_cc(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"normalized_cc: lengths differ ({a.size} vs {b.size})")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("normalized_cc: zero-norm input")
    return float(np.dot(a, b) / (na * nb))


def mad(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("mad: empty input")
    return float(np.median(np.abs(values - np.median(values))))


def sliding_cc(waveform, template, zero_mean=False):
    """CC of the template against every window; prefix sums give the window
    norms, the numerator dot products come from one FFT correlation."""
    w = np.asarray(waveform, dtype=np.float64)
    t = np.asarray(template, dtype=np.float64)
    m = t.size
    if w.size < m:
        raise ValueError(f"waveform ({w.size}) shorter than template ({m})")
    if zero_mean:
        t = t - t.mean()
    tn = np.linalg.norm(t)
    if tn == 0.0:
        raise ValueError("sliding_cc: zero-norm template")
    num = fftconvolve(w, t[::-1], mode="valid")
    csum2 = np.concatenate([[0.0], np.cumsum(w * w)])
    win_sq = csum2[m:] - csum2[:-m]
    if zero_mean:
        csum = np.concatenate([[0.0], np.cumsum(w)])
        win_sum = csum[m:] - csum[:-m]
        win_sq = win_sq - win_sum * win_sum / m
        num = num - win_sum * t.sum() / m  # t already zero-mean, second term is 0
    denom = tn * np.sqrt(np.maximum(win_sq, 0.0))
    out = np.zeros(w.size - m + 1)
    ok = denom > 0
    out[ok] = num[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def sliding_cc_naive(waveform, template, zero_mean=False):
    """Quadratic per-window oracle used by the tests."""
    w = np.asarray(waveform, dtype=np.float64)
    t = np.asarray(template, dtype=np.float64)
    if zero_mean:
        t = t - t.mean()
    m = t.size
    out = np.zeros(w.size - m + 1)
    for i in range(out.size):
        win = w[i:i + m]
        if zero_mean:
            win = win - win.mean()
        nw, nt = np.linalg.norm(win), np.linalg.norm(t)
        out[i] = np.dot(win, t) / (nw * nt) if nw > 0 and nt > 0 else 0.0
    return out


def detect_tm(templates, waveform, mu=8.0, nms_iou=0.05, zero_mean=False,
              max_candidates_per_template=200):
    """Threshold each template's CC trace at mu * MAD(trace); candidates take
    the template's length, score = CC; highest-CC wins among overlaps."""
    if mu <= 0:
        raise ValueError(f"mu={mu} must be positive")
    waveform = np.asarray(waveform, dtype=np.float64)
    candidates = []
    for template in templates:
        m = template.samples.size
        if waveform.size < m:
            warnings.warn(f"waveform shorter than template of length {m}; skipped")
            continue
        trace = sliding_cc(waveform, template.samples, zero_mean=zero_mean)
        tau = mu * mad(trace)
        # local peaks only: a plateau of above-threshold offsets is one event
        hits, _ = find_peaks(trace, height=tau, distance=max(1, m // 2))
        if trace.size == 1 and trace[0] > tau:
            hits = np.array([0])
        if hits.size > max_candidates_per_template:
            hits = hits[np.argsort(trace[hits])[::-1][:max_candidates_per_template]]
        for off in hits:
            candidates.append(Detection(Interval(int(off), int(off) + m),
                                        float(trace[off]), -1))
    return nms(candidates, nms_iou)
