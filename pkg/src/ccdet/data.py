"""Synthetic seismic dataset generation, file formats, segmentation, normalization.

Stands in for a proprietary laboratory dataset: background Gaussian noise with
oscillatory bursts whose fast-rise / exponential-decay envelope defines the
ground-truth interval.  Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .evaluate import Interval

WAVEFORM_MAGIC = b"WV1D"


@dataclass
class SynthConfig:
    total_length: int = 3_400_000
    event_count: int = 1000
    length_median: int = 1500
    length_sigma: float = 0.55        # log-normal shape parameter
    length_clip: tuple = (200, 8192)
    noise_sigma: float = 1.0
    min_gap: int = 512
    amplitude_range: tuple = (3.0, 12.0)
    # probability of a mid-event amplitude dip (events that look like two
    # smaller ones unless surrounding context is considered)
    dip_prob: float = 0.5
    seed: int = 0


@dataclass
class Dataset:
    waveform: np.ndarray                  # float32 samples
    events: list                          # sorted, non-overlapping Intervals
    splits: dict = field(default_factory=dict)  # name -> list of event indices
    config: SynthConfig | None = None

    def split_events(self, name):
        return [self.events[i] for i in self.splits[name]]

    def split_region(self, name):
        """Contiguous waveform region owned by a split: midpoints between the
        boundary events of adjacent splits, clamped to the waveform."""
        order = ["train", "val", "test"]
        pos = order.index(name)
        idx = self.splits[name]
        if not idx:
            raise ValueError(f"split {name!r} is empty")
        before = [i for nm in order[:pos] for i in self.splits.get(nm, [])]
        after = [i for nm in order[pos + 1:] for i in self.splits.get(nm, [])]
        begin = 0 if not before else \
            (self.events[max(before)].end + self.events[min(idx)].begin) // 2
        end = len(self.waveform) if not after else \
            (self.events[max(idx)].end + self.events[min(after)].begin) // 2
        return begin, end


def _event_envelope(length, rng, dip_prob):
    """Rise over the first 10%, exponential decay to 35% of peak, then a
    linear release over the last 10% so both boundaries stay visible above
    the noise floor."""
    n_rise = max(1, int(round(0.1 * length)))
    n_tail = max(1, int(round(0.1 * length)))
    env = np.ones(length)
    env[:n_rise] = np.linspace(0.0, 1.0, n_rise, endpoint=False) + 1.0 / n_rise
    n_decay = length - n_rise
    if n_decay > 0:
        rate = np.log(0.35) / n_decay
        env[n_rise:] = np.exp(rate * np.arange(1, n_decay + 1))
    if length > n_rise + n_tail:
        env[-n_tail:] *= np.linspace(1.0, 0.0, n_tail, endpoint=False)
    if rng.random() < dip_prob:
        center = rng.uniform(0.3, 0.7) * length
        width = rng.uniform(0.05, 0.15) * length
        depth = rng.uniform(0.4, 0.8)
        env *= 1.0 - depth * np.exp(-0.5 * ((np.arange(length) - center) / width) ** 2)
    return env


def generate_synthetic(config: SynthConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    n = config.event_count
    lengths = np.exp(rng.normal(np.log(config.length_median), config.length_sigma, size=n))
    lengths = np.clip(np.round(lengths), *config.length_clip).astype(int)
    occupied = int(lengths.sum()) + (n + 1) * config.min_gap
    if occupied > config.total_length:
        raise ValueError(
            f"infeasible packing: events plus gaps need {occupied} samples, "
            f"waveform has {config.total_length}")
    # distribute the slack over the n+1 gaps
    slack = config.total_length - occupied
    if n > 0:
        extra = rng.multinomial(slack, np.full(n + 1, 1.0 / (n + 1)))
    else:
        extra = np.array([slack])
    waveform = rng.normal(0.0, config.noise_sigma, size=config.total_length)
    events = []
    cursor = 0
    for i in range(n):
        cursor += config.min_gap + int(extra[i])
        length = int(lengths[i])
        env = _event_envelope(length, rng, config.dip_prob)
        freq = rng.uniform(0.02, 0.25)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(*config.amplitude_range)
        carrier = np.sin(2 * np.pi * freq * np.arange(length) + phase)
        waveform[cursor:cursor + length] += amp * env * carrier
        events.append(Interval(cursor, cursor + length))
        cursor += length
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    splits = {
        "train": list(range(0, n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, n)),
    }
    return Dataset(waveform.astype(np.float32), events, splits, config)


def segment_offsets(total, segment_length, overlap):
    """Offsets covering every sample; the final segment is right-aligned."""
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap {overlap} outside [0, 1)")
    if segment_length > total:
        raise ValueError(f"segment length {segment_length} exceeds waveform {total}")
    step = max(1, int(round((1.0 - overlap) * segment_length)))
    offsets = list(range(0, total - segment_length + 1, step))
    if offsets[-1] + segment_length < total:
        offsets.append(total - segment_length)
    return offsets


def segment_waveform(waveform, segment_length, overlap):
    return [(off, waveform[off:off + segment_length])
            for off in segment_offsets(len(waveform), segment_length, overlap)]


def normalize_segment(segment):
    """Zero mean, unit population variance; constant segments map to zeros."""
    seg = np.asarray(segment, dtype=np.float32)
    mean = seg.mean()
    var = seg.var()
    return (seg - mean) / np.sqrt(max(var, 1e-12))


# ---------------------------------------------------------------------------
# file formats

def save_waveform(path, waveform):
    waveform = np.asarray(waveform, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(WAVEFORM_MAGIC)
        fh.write(struct.pack("<I", len(waveform)))
        fh.write(waveform.tobytes())


def load_waveform(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WAVEFORM_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r} at byte 0")
        header = fh.read(4)
        if len(header) < 4:
            raise DataFormatError(f"{path}: truncated header at byte 4")
        (count,) = struct.unpack("<I", header)
        data = fh.read(4 * count)
        if len(data) < 4 * count:
            raise DataFormatError(
                f"{path}: truncated at byte {8 + len(data)}, expected {4 * count} data bytes")
        return np.frombuffer(data, dtype="<f4").copy()


def save_events(path, events):
    with open(path, "w") as fh:
        fh.write("begin,end\n")
        for ev in events:
            fh.write(f"{ev.begin},{ev.end}\n")


def load_events(path):
    events = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "begin,end":
            raise DataFormatError(f"{path}: expected header 'begin,end', got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                begin_s, end_s = line.split(",")
                begin, end = int(begin_s), int(end_s)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: unparseable row {line!r}") from exc
            if begin >= end:
                raise DataFormatError(f"{path}:{lineno}: begin {begin} >= end {end}")
            if events and begin < events[-1].end:
                raise DataFormatError(
                    f"{path}:{lineno}: events unsorted or overlapping at begin {begin}")
            events.append(Interval(begin, end))
    return events


def save_dataset(out_dir, dataset: Dataset):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_waveform(out_dir / "waveform.wv1d", dataset.waveform)
    save_events(out_dir / "events.csv", dataset.events)
    manifest = {
        "waveform": "waveform.wv1d",
        "events": "events.csv",
        "splits": dataset.splits,
        "generator_config": asdict(dataset.config) if dataset.config else None,
        "seed": dataset.config.seed if dataset.config else None,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(in_dir) -> Dataset:
    in_dir = Path(in_dir)
    try:
        manifest = json.loads((in_dir / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{in_dir}/manifest.json: invalid JSON: {exc}") from exc
    waveform = load_waveform(in_dir / manifest["waveform"])
    events = load_events(in_dir / manifest["events"])
    config = None
    if manifest.get("generator_config"):
        raw = dict(manifest["generator_config"])
        for key in ("length_clip", "amplitude_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        config = SynthConfig(**raw)
    splits = {k: list(v) for k, v in manifest["splits"].items()}
    return Dataset(waveform, events, splits, config)


def save_detections_csv(path, detections):
    """CSV `begin,end,score,scale`; integer half-open indices, 6-decimal score."""
    with open(path, "w") as fh:
        fh.write("begin,end,score,scale\n")
        for det in detections:
            fh.write(f"{det.interval.begin},{det.interval.end},"
                     f"{det.score:.6f},{det.scale_index}\n")


def load_detections_csv(path):
    from .evaluate import Detection
    dets = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "begin,end,score,scale":
            raise DataFormatError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                b, e, s, sc = line.split(",")
                dets.append(Detection(Interval(int(b), int(e)), float(s), int(sc)))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: unparseable row {line!r}") from exc
    return dets
