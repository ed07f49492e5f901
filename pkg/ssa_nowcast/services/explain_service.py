"""Grad-CAM heatmaps over named model layers, rendered as 8-bit PGM images."""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError, DataError
from ..models import Heatmap, HeatmapRequest, Mode, SampleWindow
from ..nn.module import Tape
from ..nn.unet import SSAUNet
from ..tensor import ops

logger = logging.getLogger(__name__)

COMPOSITE_GAP = 2


def _resolve(model: SSAUNet, layers: Iterable[str]) -> List[str]:
    known = {path for path, _ in model.named_modules() if path}
    layers = list(layers)
    for layer in layers:
        if layer not in known:
            raise ConfigurationError(
                f"unknown layer '{layer}'; available layers: {', '.join(model.explainable_layers())}")
    return layers


def normalize_heatmap(cam: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Min-max to [0, 1]. A flat map is flagged and becomes all ones if positive, else all zeros."""
    low, high = float(cam.min()), float(cam.max())
    if high > low:
        return (cam - low) / (high - low), False
    return (np.ones_like(cam) if high > 0 else np.zeros_like(cam)), True


def _heatmap(activation: np.ndarray, gradient: np.ndarray, layer: str, size) -> Heatmap:
    weights = gradient[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activation[0], axes=1), 0)
    source = cam.shape
    upsampled, _ = ops.bilinear_resize(cam[None, None], *size)
    values, degenerate = normalize_heatmap(upsampled[0, 0])
    if degenerate:
        logger.debug("layer %s produced a flat heatmap", layer)
    return Heatmap(values=values, layer=layer, source_resolution=(int(source[0]), int(source[1])),
                   degenerate=degenerate)


def explain_sweep(model: SSAUNet, window: SampleWindow, layers: Optional[Sequence[str]] = None,
                  frame_index: int = -1, scale: float = 1.0) -> List[Heatmap]:
    """Grad-CAM for several layers from one forward/backward pass.

    The target scalar is ``scale`` times the sum of output frame ``frame_index``.
    Parameter gradients are left untouched.
    """
    layers = _resolve(model, model.explainable_layers() if layers is None else layers)
    tape = Tape(capture=set(layers), accumulate_grads=False)
    out = model(window.inputs, Mode.EVAL, tape)
    if not -out.shape[1] <= frame_index < out.shape[1]:
        raise ConfigurationError(f"frame index {frame_index} outside the {out.shape[1]} output frames")
    seed = np.zeros_like(out)
    seed[:, frame_index] = scale
    model.backprop(seed, tape)
    size = window.inputs.shape[2:]
    return [_heatmap(tape.activations[layer], tape.gradients[layer], layer, size) for layer in layers]


def grad_cam(model: SSAUNet, window: SampleWindow, layer: str, frame_index: int = -1,
             scale: float = 1.0) -> Heatmap:
    return explain_sweep(model, window, [layer], frame_index, scale)[0]


def heatmap_filename(layer: str) -> str:
    """``encoder.level3.block.conv1`` -> ``conv1.encoder3.pgm``."""
    parts = layer.split(".")
    if len(parts) >= 3 and parts[1].startswith("level"):
        return f"{parts[-1]}.{parts[0]}{parts[1][len('level'):]}.pgm"
    return f"{layer}.pgm"


def render_pgm(image, path) -> Path:
    """Binary 8-bit PGM; [0, 1] maps linearly to 0..255, values outside are clipped."""
    values = image.values if isinstance(image, Heatmap) else np.asarray(image)
    if values.ndim != 2:
        raise ConfigurationError(f"PGM needs a 2-D map, got shape {values.shape}")
    pixels = np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise DataError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos + 1)
    if pixels.size != w * h:
        raise DataError(f"{path}: expected {w * h} pixels, found {pixels.size}")
    return pixels.reshape(h, w).copy()


def composite(panels: Sequence[np.ndarray]) -> np.ndarray:
    """Panels side by side (e.g. input | prediction | target | heatmap) with white separators."""
    h = panels[0].shape[0]
    gap = np.ones((h, COMPOSITE_GAP))
    row = []
    for i, panel in enumerate(panels):
        if panel.shape[0] != h:
            raise ConfigurationError("composite panels must share a height")
        if i:
            row.append(gap)
        row.append(np.clip(panel, 0.0, 1.0))
    return np.hstack(row)


class ExplainService:
    """Writes heatmaps (optionally as composites) for one model and window."""

    def __init__(self, model: SSAUNet, output_dir):
        self.model = model
        self.output_dir = Path(output_dir)

    def run(self, window: SampleWindow, layers: Optional[Sequence[str]] = None, frame_index: int = -1,
            with_composite: bool = False) -> Dict[str, Path]:
        heatmaps = explain_sweep(self.model, window, layers, frame_index)
        prediction = None
        if with_composite:
            prediction = self.model(window.inputs, Mode.EVAL)[0, frame_index]
        written = {}
        for heatmap in heatmaps:
            image = heatmap.values
            if with_composite:
                image = composite([window.inputs[0, -1], prediction, window.targets[0, frame_index], image])
            written[heatmap.layer] = render_pgm(image, self.output_dir / heatmap_filename(heatmap.layer))
        logger.info("wrote %d heatmaps to %s", len(written), self.output_dir)
        return written

    def handle(self, request: HeatmapRequest, windows: Sequence[SampleWindow]) -> Dict[str, Path]:
        if not 0 <= request.window_index < len(windows):
            raise DataError(f"window index {request.window_index} outside the {len(windows)} windows")
        return self.run(windows[request.window_index], request.layers, request.frame_index,
                        request.with_composite)
