"""SSAC v1 checkpoints: model config, parameters, batch-norm statistics and Adam moments.

Layout (little-endian): magic "SSAC", u32 version, u32-length-prefixed UTF-8
key=value block, then two tensor tables (model, optimizer), each a u32 count
followed by (u32 name length, name, RTEN blob) entries.
"""
import logging
import os
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import ArchiveError, CheckpointError, ShapeMismatchError
from ..models import ModelConfig, OptimizerState, Precision
from ..nn.unet import SSAUNet, build
from ..tensor.tensor import decode_rten, encode_rten

logger = logging.getLogger(__name__)

MAGIC = b"SSAC"
VERSION = 1
MOMENT_SUFFIXES = (".adam_m", ".adam_v")
_U32 = struct.Struct("<I")


def _as_4d(value: np.ndarray) -> np.ndarray:
    return value.reshape(1, -1, 1, 1) if value.ndim == 1 else value


def _encode_table(entries: List[Tuple[str, np.ndarray]]) -> bytes:
    parts = [_U32.pack(len(entries))]
    for name, value in entries:
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, encode_rten(_as_4d(value))]
    return b"".join(parts)


def _read_u32(buf: bytes, offset: int) -> Tuple[int, int]:
    if len(buf) - offset < _U32.size:
        raise ArchiveError("truncated checkpoint", offset)
    return _U32.unpack_from(buf, offset)[0], offset + _U32.size


def _decode_table(buf: bytes, offset: int) -> Tuple[List[Tuple[str, np.ndarray]], int]:
    count, offset = _read_u32(buf, offset)
    entries = []
    for _ in range(count):
        length, offset = _read_u32(buf, offset)
        if len(buf) - offset < length:
            raise ArchiveError("truncated tensor name", offset)
        name = buf[offset:offset + length].decode("utf-8")
        tensor, offset = decode_rten(buf, offset + length)
        entries.append((name, tensor))
    return entries, offset


def save_checkpoint(model: SSAUNet, optimizer_state: Optional[OptimizerState],
                    meta: Dict[str, str], path) -> Path:
    """Write model, optimizer moments and meta to path atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = dict(model.config.to_dict())
    keys["precision"] = model.precision.value
    opt_entries = []
    if optimizer_state is not None:
        keys.update({
            "optimizer.lr": repr(optimizer_state.lr),
            "optimizer.beta1": repr(optimizer_state.beta1),
            "optimizer.beta2": repr(optimizer_state.beta2),
            "optimizer.epsilon": repr(optimizer_state.epsilon),
            "optimizer.step": str(optimizer_state.step),
        })
        for name in sorted(optimizer_state.first_moment):
            opt_entries.append((name + MOMENT_SUFFIXES[0], optimizer_state.first_moment[name]))
            opt_entries.append((name + MOMENT_SUFFIXES[1], optimizer_state.second_moment[name]))
    for key, value in meta.items():
        keys[f"meta.{key}"] = str(value)

    block = "".join(f"{k}={v}\n" for k, v in keys.items()).encode("utf-8")
    model_entries = [(name, p.value) for name, p in model.named_parameters()] + list(model.buffers())
    payload = b"".join([
        MAGIC, _U32.pack(VERSION), _U32.pack(len(block)), block,
        _encode_table(model_entries), _encode_table(opt_entries),
    ])
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    logger.debug("wrote checkpoint %s (%d bytes)", path, len(payload))
    return path


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> Tuple[SSAUNet, Optional[OptimizerState], Dict[str, str]]:
    """Rebuild the model from the embedded config (or ``config``) and restore its state.

    Nothing is returned unless every stored tensor matches a model tensor by name and shape.
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as ex:
        raise CheckpointError(f"{path}: cannot read checkpoint: {ex.strerror or ex}") from ex
    try:
        if buf[:4] != MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic {buf[:4]!r}")
        version, offset = _read_u32(buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        length, offset = _read_u32(buf, offset)
        if len(buf) - offset < length:
            raise ArchiveError("truncated key block", offset)
        keys = {}
        for line in buf[offset:offset + length].decode("utf-8").splitlines():
            if line:
                key, _, value = line.partition("=")
                keys[key] = value
        model_entries, offset = _decode_table(buf, offset + length)
        opt_entries, offset = _decode_table(buf, offset)
        if offset != len(buf):
            raise ArchiveError(f"{len(buf) - offset} trailing bytes", offset)
    except ArchiveError as ex:
        raise CheckpointError(f"{path}: {ex}") from ex
    except UnicodeDecodeError as ex:
        raise CheckpointError(f"{path}: key block or tensor name is not UTF-8") from ex

    try:
        precision = Precision(keys.get("precision", Precision.STANDARD.value))
        stored_config = config if config is not None else ModelConfig.from_dict(keys)
    except (KeyError, TypeError, ValueError) as ex:
        raise CheckpointError(f"{path}: unreadable model config: {ex}") from ex
    model = build(stored_config, precision)
    params = dict(model.named_parameters())
    buffers = {}
    for module_path, module in model.named_modules():
        running = getattr(module, "running", None)
        if running is not None:
            buffers[f"{module_path}.running_mean"] = running.mean
            buffers[f"{module_path}.running_var"] = running.var

    for name, tensor in model_entries:
        target = params[name].value if name in params else buffers.get(name)
        if target is None:
            raise CheckpointError(f"{path}: unknown tensor name '{name}'")
        if _as_4d(target).shape != tensor.shape:
            raise ShapeMismatchError(name, _as_4d(target).shape, tensor.shape)
    stored = {name for name, _ in model_entries}
    missing = [name for name in list(params) + list(buffers) if name not in stored]
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks tensor '{missing[0]}'")

    for name, tensor in model_entries:
        if name in params:
            params[name].value = tensor.reshape(params[name].value.shape).astype(precision.dtype)
            params[name].zero_grad()
        else:
            buffers[name][...] = tensor.reshape(buffers[name].shape)

    optimizer_state = None
    if "optimizer.step" in keys:
        try:
            optimizer_state = OptimizerState(
                lr=float(keys["optimizer.lr"]),
                beta1=float(keys["optimizer.beta1"]),
                beta2=float(keys["optimizer.beta2"]),
                epsilon=float(keys["optimizer.epsilon"]),
                step=int(keys["optimizer.step"]),
            )
        except (KeyError, ValueError) as ex:
            raise CheckpointError(f"{path}: unreadable optimizer state: {ex}") from ex
        for name, tensor in opt_entries:
            for suffix, moments in zip(MOMENT_SUFFIXES, (optimizer_state.first_moment, optimizer_state.second_moment)):
                if name.endswith(suffix):
                    base = name[:-len(suffix)]
                    if base not in params:
                        raise CheckpointError(f"{path}: optimizer moment for unknown parameter '{base}'")
                    moments[base] = tensor.reshape(params[base].value.shape)
                    break
            else:
                raise CheckpointError(f"{path}: unknown optimizer tensor '{name}'")

    meta = {k[len("meta."):]: v for k, v in keys.items() if k.startswith("meta.")}
    return model, optimizer_state, meta


class CheckpointService:
    """Per-epoch and best-model checkpoints inside one run directory."""

    def __init__(self, output_dir):
        self.output_dir = Path(output_dir)

    def epoch_path(self, epoch: int) -> Path:
        return self.output_dir / f"epoch-{epoch:03d}.ssac"

    @property
    def best_path(self) -> Path:
        return self.output_dir / "best.ssac"

    def save_epoch(self, model, optimizer_state, meta, epoch: int) -> Path:
        return save_checkpoint(model, optimizer_state, meta, self.epoch_path(epoch))

    def save_best(self, model, optimizer_state, meta) -> Path:
        logger.info("new best checkpoint at epoch %s (val %s)", meta.get("epoch"), meta.get("best_val_loss"))
        return save_checkpoint(model, optimizer_state, meta, self.best_path)
