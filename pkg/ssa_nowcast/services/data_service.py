"""Synthetic sequences, RSEQ archives, preprocessing and window assembly."""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from ..errors import ArchiveError, ConfigurationError, DataError, DimensionError, IntegrityError
from ..models import (DatasetSpec, FilterRule, FrameSequence, HorizonSpec, SampleWindow,
                      SynthParams, Task)
from ..tensor.tensor import decode_rten, encode_rten

logger = logging.getLogger(__name__)

MIN_SIZE = 32
RSEQ_MAGIC = b"RSEQ"
TIME_MAGIC = b"TIME"
_RSEQ_HEADER = struct.Struct("<4s4I")
_TIME_HEADER = struct.Struct("<4sI")


# ------------------------------------------------------------------ synthesis

def _check_size(h: int, w: int):
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ConfigurationError(f"frame size {h}x{w} is below the minimum of {MIN_SIZE}")


def _timestamps(n_frames: int, interval: int) -> np.ndarray:
    return np.arange(n_frames, dtype=np.int64) * interval


def synth_generate(n_frames: int, h: int, w: int, seed: int,
                   params: Optional[SynthParams] = None) -> FrameSequence:
    """Anisotropic Gaussian rain cells advected over a periodic domain.

    Every cell drifts along a shared heading with its own speed, which
    oscillates smoothly in time; amplitudes grow or decay exponentially.
    """
    _check_size(h, w)
    params = params or SynthParams()
    rng = np.random.default_rng(seed)
    k = params.n_blobs
    heading = rng.uniform(0, 2 * np.pi)
    centers = rng.uniform((0, 0), (h, w), size=(k, 2))
    sigmas = rng.uniform(*params.sigma_range, size=(k, 2))
    angles = rng.uniform(0, np.pi, size=k)
    amplitudes = rng.uniform(0.3, 1.0, size=k) * params.max_intensity
    growth = rng.uniform(-params.growth_rate, params.growth_rate, size=k)
    speeds = params.speed * (1 + params.speed_jitter * rng.standard_normal(k))
    phases = rng.uniform(0, 2 * np.pi, size=k)
    period = max(n_frames, 1)

    t = np.arange(n_frames)[:, None]
    velocity = speeds[None, :] * (1 + params.speed_jitter * np.sin(2 * np.pi * t / period + phases[None, :]))
    # position at frame t is the start plus the distance covered in frames 0..t-1
    travel = np.vstack([np.zeros((1, k)), np.cumsum(velocity, axis=0)[:-1]])
    direction = np.array([np.sin(heading), np.cos(heading)])

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cos_a, sin_a = np.cos(angles), np.sin(angles)
    frames = np.zeros((n_frames, h, w), dtype=np.float32)
    for f in range(n_frames):
        field = np.zeros((h, w))
        for b in range(k):
            cy, cx = centers[b] + travel[f, b] * direction
            dy = (yy - cy + h / 2) % h - h / 2
            dx = (xx - cx + w / 2) % w - w / 2
            u = cos_a[b] * dx + sin_a[b] * dy
            v = -sin_a[b] * dx + cos_a[b] * dy
            amp = amplitudes[b] * np.exp(growth[b] * f)
            field += amp * np.exp(-0.5 * ((u / sigmas[b, 0]) ** 2 + (v / sigmas[b, 1]) ** 2))
        frames[f] = np.clip(field, 0.0, params.max_intensity)
    logger.debug("synthesised %d precipitation frames %dx%d (seed %d)", n_frames, h, w, seed)
    return FrameSequence(frames=frames, timestamps=_timestamps(n_frames, Task.PRECIP.interval_minutes),
                         interval_minutes=Task.PRECIP.interval_minutes)


def synth_cloud(n_frames: int, h: int, w: int, seed: int, threshold: float = 0.0,
                smoothing: float = 8.0, speed: float = 1.0, evolution: float = 0.05) -> FrameSequence:
    """Binary cloud masks: a smoothed noise field that drifts and slowly morphs, then thresholded."""
    _check_size(h, w)
    rng = np.random.default_rng(seed)
    fields = []
    for _ in range(2):
        noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), smoothing, mode="wrap")
        fields.append((noise - noise.mean()) / (noise.std() or 1.0))
    heading = rng.uniform(0, 2 * np.pi)
    step = speed * np.array([np.sin(heading), np.cos(heading)])

    frames = np.zeros((n_frames, h, w), dtype=np.float32)
    for f in range(n_frames):
        phase = evolution * f
        mixed = np.cos(phase) * fields[0] + np.sin(phase) * fields[1]
        moved = ndimage.shift(mixed, step * f, order=1, mode="grid-wrap")
        frames[f] = moved > threshold
    return FrameSequence(frames=frames, timestamps=_timestamps(n_frames, Task.CLOUD.interval_minutes),
                         interval_minutes=Task.CLOUD.interval_minutes)


# -------------------------------------------------------------- preprocessing

def center_crop(frames: np.ndarray, side: int) -> np.ndarray:
    """Square crop of a (T, h, w) stack around the frame centre; offset (h - side) // 2."""
    h, w = frames.shape[-2:]
    if side > h or side > w:
        raise DimensionError(f"crop {side} is larger than frame {h}x{w}")
    top, left = (h - side) // 2, (w - side) // 2
    return frames[..., top:top + side, left:left + side]


def preprocess(seq: FrameSequence, crop: Optional[int] = None,
               train_max: Optional[float] = None) -> Tuple[FrameSequence, float]:
    """Center-crop, then divide by train_max (the sequence's own max when absent)."""
    frames = center_crop(seq.frames, crop) if crop is not None else seq.frames
    constant = float(frames.max()) if train_max is None else float(train_max)
    if not constant > 0:
        raise DataError(f"normalization constant must be positive, got {constant} (all-dry training frames?)")
    normalized = (frames / constant).astype(seq.frames.dtype)
    return FrameSequence(frames=normalized, timestamps=seq.timestamps,
                         interval_minutes=seq.interval_minutes, normalization=constant), constant


def denormalize(data: Union[FrameSequence, np.ndarray], constant: float):
    if isinstance(data, FrameSequence):
        return FrameSequence(frames=data.frames * constant, timestamps=data.timestamps,
                             interval_minutes=data.interval_minutes, normalization=None)
    return data * constant


def split_sequence(seq: FrameSequence, fractions: Sequence[float] = (0.7, 0.15, 0.15)):
    """Chronological (train, val, test) split."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be three values summing to 1, got {tuple(fractions)}")
    n = len(seq)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    return seq.slice(0, n_train), seq.slice(n_train, n_train + n_val), seq.slice(n_train + n_val, n)


# ------------------------------------------------------------------- windows

def _contiguous_runs(seq: FrameSequence) -> List[Tuple[int, int]]:
    """[start, stop) index ranges whose timestamps are spaced exactly one interval apart."""
    if len(seq) == 0:
        return []
    gaps = np.nonzero(np.diff(seq.timestamps) != seq.interval_minutes)[0]
    bounds = [0] + [int(g) + 1 for g in gaps] + [len(seq)]
    return list(zip(bounds[:-1], bounds[1:]))


def make_windows(seq: FrameSequence, n_in: int, horizon: HorizonSpec, stride: int = 1) -> List[SampleWindow]:
    """Sliding windows; input channels run oldest to newest, target k is offsets[k] steps after the last input."""
    if stride < 1:
        raise ConfigurationError(f"window stride must be >= 1, got {stride}")
    span = n_in + horizon.max_offset
    normalization = seq.normalization if seq.normalization is not None else 1.0
    windows = []
    for run_start, run_stop in _contiguous_runs(seq):
        for start in range(run_start, run_stop - span + 1, stride):
            last = start + n_in - 1
            inputs = seq.frames[start:start + n_in][None]
            targets = seq.frames[[last + o for o in horizon.offsets]][None]
            windows.append(SampleWindow(inputs=np.ascontiguousarray(inputs),
                                        targets=np.ascontiguousarray(targets),
                                        horizon=horizon, start_index=start,
                                        normalization=normalization))
    return windows


def rainy_fraction(frame: np.ndarray, rain_cutoff: float = 0.0) -> float:
    return float(np.mean(frame > rain_cutoff))


def filter_windows(windows: List[SampleWindow], threshold: float, rain_cutoff: float = 0.0,
                   rule: FilterRule = FilterRule.ALL) -> List[SampleWindow]:
    """Keep windows whose target frames have at least ``threshold`` rainy pixels."""
    if threshold <= 0:
        return list(windows)
    combine = all if rule is FilterRule.ALL else any
    kept = [w for w in windows
            if combine(rainy_fraction(frame, rain_cutoff) >= threshold for frame in w.targets[0])]
    logger.debug("rain filter %.2f (%s) kept %d of %d windows", threshold, rule.value, len(kept), len(windows))
    return kept


# ------------------------------------------------------------------ archives

def save_archive(seq: FrameSequence, path) -> Path:
    """RSEQ v1: header (frame count, interval, h, w), RTEN frames, then a TIME trailer of int64 stamps."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = seq.shape
    parts = [_RSEQ_HEADER.pack(RSEQ_MAGIC, len(seq), seq.interval_minutes, h, w)]
    parts += [encode_rten(frame[None, None]) for frame in seq.frames]
    stamps = np.asarray(seq.timestamps, dtype="<i8")
    parts += [_TIME_HEADER.pack(TIME_MAGIC, stamps.size), stamps.tobytes()]
    path.write_bytes(b"".join(parts))
    return path


def load_archive(path) -> FrameSequence:
    try:
        buf = Path(path).read_bytes()
    except OSError as ex:
        raise DataError(f"{path}: cannot read archive: {ex.strerror or ex}") from ex
    if len(buf) < _RSEQ_HEADER.size:
        raise ArchiveError("truncated RSEQ header", 0)
    magic, count, interval, h, w = _RSEQ_HEADER.unpack_from(buf, 0)
    if magic != RSEQ_MAGIC:
        raise ArchiveError(f"bad RSEQ magic {magic!r}", 0)
    offset = _RSEQ_HEADER.size
    frames = []
    while len(frames) < count:
        if offset == len(buf) or buf[offset:offset + 4] == TIME_MAGIC:
            raise IntegrityError(f"{path}: header declares {count} frames, archive holds {len(frames)}")
        frame, offset = decode_rten(buf, offset)
        if frame.shape != (1, 1, h, w):
            raise IntegrityError(f"{path}: frame {len(frames)} has shape {frame.shape}, header says {h}x{w}")
        frames.append(frame[0, 0])

    timestamps = _timestamps(count, interval)
    if offset < len(buf):
        if buf[offset:offset + 4] == b"RTEN":
            raise IntegrityError(f"{path}: archive holds more frames than the {count} declared")
        if len(buf) - offset < _TIME_HEADER.size:
            raise ArchiveError("truncated TIME trailer", offset)
        tmagic, n_stamps = _TIME_HEADER.unpack_from(buf, offset)
        if tmagic != TIME_MAGIC:
            raise ArchiveError(f"unexpected block {tmagic!r} after frames", offset)
        if n_stamps != count:
            raise IntegrityError(f"{path}: {n_stamps} timestamps for {count} frames")
        start = offset + _TIME_HEADER.size
        if len(buf) - start != 8 * count:
            raise ArchiveError("TIME trailer length does not match its count", start)
        timestamps = np.frombuffer(buf, dtype="<i8", count=count, offset=start).astype(np.int64)

    stack = np.stack(frames) if frames else np.zeros((0, h, w), dtype=np.float32)
    logger.info("loaded %s: %d frames %dx%d every %d min", path, count, h, w, interval)
    return FrameSequence(frames=stack, timestamps=timestamps, interval_minutes=interval)


# ----------------------------------------------------------------- pipeline

@dataclass
class PreparedData:
    """Normalised windows per split plus the training-set normalization constant."""
    train: List[SampleWindow] = field(default_factory=list)
    val: List[SampleWindow] = field(default_factory=list)
    test: List[SampleWindow] = field(default_factory=list)
    normalization: float = 1.0


class DataService:
    """Runs the preprocessing chain from a raw sequence to filtered windows."""

    def __init__(self, spec: Optional[DatasetSpec] = None):
        self.spec = spec or DatasetSpec()

    def prepare(self, seq: FrameSequence, n_in: int, horizon: HorizonSpec,
                train_stride: int = 1, eval_stride: int = 6, crop: Optional[int] = None) -> PreparedData:
        if crop is not None:
            seq = FrameSequence(frames=center_crop(seq.frames, crop), timestamps=seq.timestamps,
                                interval_minutes=seq.interval_minutes)
        train, val, test = split_sequence(seq, self.spec.split_fractions)
        if len(train) == 0:
            raise DataError("training split is empty")
        constant = self.spec.normalization
        if constant is None:
            constant = float(train.frames.max())
        splits = [preprocess(part, train_max=constant)[0] for part in (train, val, test)]
        strides = (train_stride, eval_stride, eval_stride)
        threshold = self.spec.filter_kind.fraction
        windows = [filter_windows(make_windows(part, n_in, horizon, stride), threshold,
                                  self.spec.rain_cutoff, self.spec.filter_rule)
                   for part, stride in zip(splits, strides)]
        logger.info("windows: %d train, %d val, %d test (filter %s, normalization %.6g)",
                    *(len(w) for w in windows), self.spec.filter_kind.value, constant)
        return PreparedData(*windows, normalization=constant)
