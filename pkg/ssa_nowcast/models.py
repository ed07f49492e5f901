"""Data models for the SSA-UNet nowcasting engine."""
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


class AttentionKind(Enum):
    SHUFFLE = "shuffle"
    CBAM = "cbam"


class Task(Enum):
    PRECIP = "precip"
    CLOUD = "cloud"

    @property
    def interval_minutes(self) -> int:
        return 5 if self is Task.PRECIP else 15

    @property
    def input_frames(self) -> int:
        return 12 if self is Task.PRECIP else 4


class FilterKind(Enum):
    NONE = "none"
    NL20 = "nl20"
    NL50 = "nl50"

    @property
    def fraction(self) -> float:
        return {"none": 0.0, "nl20": 0.2, "nl50": 0.5}[self.value]


class FilterRule(Enum):
    ALL = "all"
    ANY = "any"


class Precision(Enum):
    STANDARD = "standard"
    HIGH = "high"

    @property
    def dtype(self):
        return np.float32 if self is Precision.STANDARD else np.float64


def _ints(value) -> Tuple[int, ...]:
    if isinstance(value, str):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return tuple(int(v) for v in value)


@dataclass
class ModelConfig:
    """Architectural hyperparameters of an SSA-UNet (or its CBAM baseline)."""
    in_channels: int = 12
    out_channels: int = 12
    kernels_per_layer: int = 3
    decoder_kernels_per_layer: int = 2
    widths: Tuple[int, ...] = (64, 128, 256, 512, 1024)
    # None means classic blocks on every encoder level
    shuffle_groups: Optional[Tuple[int, ...]] = (16, 16, 32, 32)
    sa_groups: Tuple[int, ...] = (2, 4, 8, 16, 32)
    attention: AttentionKind = AttentionKind.SHUFFLE
    bilinear_factor: int = 2
    cbam_reduction: int = 16
    seed: int = 0

    @classmethod
    def ssa_unet(cls, in_channels: int = 12, out_channels: int = 12, **overrides) -> "ModelConfig":
        return cls(in_channels=in_channels, out_channels=out_channels, **overrides)

    @classmethod
    def reduced(cls, in_channels: int = 12, out_channels: int = 12, **overrides) -> "ModelConfig":
        return cls(in_channels=in_channels, out_channels=out_channels,
                   kernels_per_layer=2, **overrides)

    @classmethod
    def baseline(cls, in_channels: int = 12, out_channels: int = 12, **overrides) -> "ModelConfig":
        """CBAM model with classic blocks everywhere, used for parameter parity."""
        params = dict(kernels_per_layer=2, shuffle_groups=None,
                      attention=AttentionKind.CBAM)
        params.update(overrides)
        return cls(in_channels=in_channels, out_channels=out_channels, **params)

    @classmethod
    def tiny(cls, in_channels: int = 12, out_channels: int = 6, **overrides) -> "ModelConfig":
        """Desk-scale configuration with widths 8..128."""
        params = dict(widths=(8, 16, 32, 64, 128), shuffle_groups=(2, 2, 4, 4),
                      cbam_reduction=4)
        params.update(overrides)
        return cls(in_channels=in_channels, out_channels=out_channels, **params)

    @property
    def encoder_widths(self) -> Tuple[int, ...]:
        """Output channels of each encoder level; the bottleneck is divided by the bilinear factor."""
        return tuple(self.widths[:4]) + (self.widths[4] // self.bilinear_factor,)

    @property
    def decoder_layout(self) -> List[Tuple[int, int, int]]:
        """(in, mid, out) channels for decoder levels 1..4, bottom to top."""
        enc = self.encoder_widths
        layout = []
        prev = enc[4]
        for level in range(1, 5):
            skip = enc[4 - level]
            c_in = prev + skip
            c_out = self.widths[4 - level] // self.bilinear_factor if level < 4 else self.widths[0]
            layout.append((c_in, c_in // 2, c_out))
            prev = c_out
        return layout

    def validate(self):
        """Raise ConfigurationError naming the first violated constraint."""
        if len(self.widths) != 5:
            raise ConfigurationError(f"widths must list 5 levels, got {len(self.widths)}")
        if len(self.sa_groups) != 5:
            raise ConfigurationError(f"SA group list must have 5 entries, got {len(self.sa_groups)}")
        if self.shuffle_groups is not None and len(self.shuffle_groups) != 4:
            raise ConfigurationError(
                f"shuffle groups cover encoder levels 2..5 (4 entries), got {len(self.shuffle_groups)}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("in_channels and out_channels must be >= 1")
        if self.kernels_per_layer < 1 or self.decoder_kernels_per_layer < 1:
            raise ConfigurationError("kernels per layer must be >= 1")
        if self.widths[4] % self.bilinear_factor:
            raise ConfigurationError(
                f"bottleneck width {self.widths[4]} not divisible by bilinear factor {self.bilinear_factor}")
        enc = self.encoder_widths
        for level, width in enumerate(enc, start=1):
            if self.attention is AttentionKind.SHUFFLE:
                groups = self.sa_groups[level - 1]
                if groups < 1 or width % (2 * groups):
                    raise ConfigurationError(
                        f"level {level}: width {width} not divisible by 2*G = {2 * groups}")
            elif width % self.cbam_reduction:
                raise ConfigurationError(
                    f"level {level}: width {width} not divisible by CBAM reduction {self.cbam_reduction}")
        if self.shuffle_groups is not None:
            for level in range(2, 6):
                groups = self.shuffle_groups[level - 2]
                mid = enc[level - 2] * self.kernels_per_layer
                if groups < 1 or mid % groups or enc[level - 1] % groups:
                    raise ConfigurationError(
                        f"level {level}: shuffled conv needs {mid} and {enc[level - 1]} "
                        f"divisible by group count {groups}")

    def to_dict(self) -> Dict[str, str]:
        return {
            "in_channels": str(self.in_channels),
            "out_channels": str(self.out_channels),
            "kernels_per_layer": str(self.kernels_per_layer),
            "decoder_kernels_per_layer": str(self.decoder_kernels_per_layer),
            "widths": ",".join(str(w) for w in self.widths),
            "shuffle_groups": ("none" if self.shuffle_groups is None
                               else ",".join(str(g) for g in self.shuffle_groups)),
            "sa_groups": ",".join(str(g) for g in self.sa_groups),
            "attention": self.attention.value,
            "bilinear_factor": str(self.bilinear_factor),
            "cbam_reduction": str(self.cbam_reduction),
            "seed": str(self.seed),
        }

    @classmethod
    def from_dict(cls, data):
        shuffle = data.get("shuffle_groups", "16,16,32,32")
        return cls(
            in_channels=int(data.get("in_channels", 12)),
            out_channels=int(data.get("out_channels", 12)),
            kernels_per_layer=int(data.get("kernels_per_layer", 3)),
            decoder_kernels_per_layer=int(data.get("decoder_kernels_per_layer", 2)),
            widths=_ints(data.get("widths", (64, 128, 256, 512, 1024))),
            shuffle_groups=None if shuffle in (None, "none") else _ints(shuffle),
            sa_groups=_ints(data.get("sa_groups", (2, 4, 8, 16, 32))),
            attention=AttentionKind(data.get("attention", "shuffle")),
            bilinear_factor=int(data.get("bilinear_factor", 2)),
            cbam_reduction=int(data.get("cbam_reduction", 16)),
            seed=int(data.get("seed", 0)),
        )


@dataclass
class HorizonSpec:
    """Future frame offsets (in steps after the last input) covered by the targets."""
    offsets: Tuple[int, ...]
    interval_minutes: int = 5

    @classmethod
    def for_outputs(cls, n_out: int, task: Task = Task.PRECIP) -> "HorizonSpec":
        if task is Task.CLOUD:
            if n_out != 6:
                raise ConfigurationError(f"cloud task predicts 6 frames, got {n_out}")
            return cls(offsets=tuple(range(1, 7)), interval_minutes=15)
        if n_out == 1:
            # single map 30 minutes ahead
            return cls(offsets=(6,), interval_minutes=5)
        if n_out in (6, 12):
            return cls(offsets=tuple(range(1, n_out + 1)), interval_minutes=5)
        raise ConfigurationError(f"precipitation outputs must be one of 1, 6, 12; got {n_out}")

    @property
    def minutes(self) -> Tuple[int, ...]:
        return tuple(o * self.interval_minutes for o in self.offsets)

    @property
    def max_offset(self) -> int:
        return max(self.offsets)


@dataclass
class FrameSequence:
    """Single-channel maps ordered in time; frames has shape (T, h, w)."""
    frames: np.ndarray
    timestamps: np.ndarray
    interval_minutes: int = 5
    normalization: Optional[float] = None

    def __len__(self):
        return int(self.frames.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.frames.shape[1]), int(self.frames.shape[2])

    def slice(self, start: int, stop: int) -> "FrameSequence":
        return FrameSequence(
            frames=self.frames[start:stop],
            timestamps=self.timestamps[start:stop],
            interval_minutes=self.interval_minutes,
            normalization=self.normalization,
        )


@dataclass
class SampleWindow:
    """One training/evaluation instance with frames stacked along channels."""
    inputs: np.ndarray
    targets: np.ndarray
    horizon: HorizonSpec
    start_index: int = 0
    normalization: float = 1.0

    @property
    def n_in(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def n_out(self) -> int:
        return int(self.targets.shape[1])


@dataclass
class SynthParams:
    """Knobs of the advected-blob precipitation generator."""
    n_blobs: int = 6
    max_intensity: float = 10.0
    sigma_range: Tuple[float, float] = (4.0, 14.0)
    speed: float = 1.5
    speed_jitter: float = 0.3
    growth_rate: float = 0.02


@dataclass
class DatasetSpec:
    """How a dataset is sourced, split and filtered."""
    source: str = "synthetic"
    split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    filter_kind: FilterKind = FilterKind.NONE
    filter_rule: FilterRule = FilterRule.ALL
    rain_cutoff: float = 0.0
    normalization: Optional[float] = None

    def __post_init__(self):
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions must sum to 1, got {self.split_fractions}")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricsRecord:
    """Per-model, per-horizon evaluation row."""
    model: str
    horizon_min: Optional[int]
    mse: float
    precision: float
    recall: float
    accuracy: float
    f1: float
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)
    threshold: float = 0.5
    degenerate: bool = False

    def to_dict(self):
        return {
            "model": self.model,
            "horizon_min": "all" if self.horizon_min is None else self.horizon_min,
            "mse": self.mse,
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "tn": self.counts.tn,
            "fn": self.counts.fn,
            "threshold": self.threshold,
            "degenerate": int(self.degenerate),
        }

    @classmethod
    def from_dict(cls, data):
        horizon = data.get("horizon_min", "all")
        return cls(
            model=data.get("model", ""),
            horizon_min=None if horizon == "all" else int(horizon),
            mse=float(data.get("mse", 0.0)),
            precision=float(data.get("precision", 0.0)),
            recall=float(data.get("recall", 0.0)),
            accuracy=float(data.get("accuracy", 0.0)),
            f1=float(data.get("f1", 0.0)),
            counts=ConfusionCounts(int(data.get("tp", 0)), int(data.get("fp", 0)),
                                   int(data.get("tn", 0)), int(data.get("fn", 0))),
            threshold=float(data.get("threshold", 0.5)),
            degenerate=bool(int(data.get("degenerate", 0))),
        )


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainState:
    """Epoch bookkeeping shared by the plateau schedule and early stopping."""
    epoch: int = 0
    lr: float = 1e-3
    best_val_loss: float = float("inf")
    plateau_best: float = float("inf")
    plateau_counter: int = 0
    stop_best: float = float("inf")
    stop_counter: int = 0

    def to_dict(self):
        return {
            "epoch": str(self.epoch),
            "lr": repr(self.lr),
            "best_val_loss": repr(self.best_val_loss),
            "plateau_best": repr(self.plateau_best),
            "plateau_counter": str(self.plateau_counter),
            "stop_best": repr(self.stop_best),
            "stop_counter": str(self.stop_counter),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            epoch=int(data.get("epoch", 0)),
            lr=float(data.get("lr", 1e-3)),
            best_val_loss=float(data.get("best_val_loss", "inf")),
            plateau_best=float(data.get("plateau_best", "inf")),
            plateau_counter=int(data.get("plateau_counter", 0)),
            stop_best=float(data.get("stop_best", "inf")),
            stop_counter=int(data.get("stop_counter", 0)),
        )


@dataclass
class TrainConfig:
    """Training protocol settings."""
    epochs: int = 200
    batch_size: int = 6
    lr: float = 1e-3
    lr_patience: int = 4
    lr_factor: float = 0.1
    stop_patience: int = 15
    seed: int = 0
    output_dir: str = "runs"
    prefetch: bool = True


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float


@dataclass
class HeatmapRequest:
    """What to explain: checkpoint, window, layers (None for the full sweep) and output frame."""
    checkpoint_path: str = ""
    window_index: int = 0
    layers: Optional[List[str]] = None
    frame_index: int = -1
    with_composite: bool = False


@dataclass
class Heatmap:
    """Normalised Grad-CAM map at input resolution."""
    values: np.ndarray
    layer: str
    source_resolution: Tuple[int, int]
    degenerate: bool = False


@dataclass
class RunManifest:
    """Everything needed to re-run an artifact-producing command."""
    command: str
    argv: List[str] = field(default_factory=list)
    config: Dict[str, object] = field(default_factory=dict)
    seed: int = 0
    tool_version: str = ""
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    host: Dict[str, object] = field(default_factory=dict)
    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None

    def to_dict(self):
        return {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "host": self.host,
            "start_time": self.start_time.isoformat() if self.start_time else None,
            "end_time": self.end_time.isoformat() if self.end_time else None,
        }

    @classmethod
    def from_dict(cls, data):
        start = data.get("start_time")
        end = data.get("end_time")
        return cls(
            command=data.get("command", ""),
            argv=data.get("argv", []),
            config=data.get("config", {}),
            seed=data.get("seed", 0),
            tool_version=data.get("tool_version", ""),
            inputs=data.get("inputs", []),
            outputs=data.get("outputs", []),
            host=data.get("host", {}),
            start_time=datetime.fromisoformat(start) if start else None,
            end_time=datetime.fromisoformat(end) if end else None,
        )
