"""MSE regression training: Adam, reduce-on-plateau, early stopping and per-epoch checkpoints."""
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import DataError, DimensionError, NumericError
from ..models import EpochRecord, Mode, OptimizerState, TrainConfig, TrainState
from ..nn.module import Parameter, Tape
from ..nn.unet import SSAUNet
from .checkpoint_service import CheckpointService

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_mse", "val_mse", "lr")


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient 2 (pred - target) / count."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return float(np.mean(diff * diff, dtype=np.float64)), (2.0 / diff.size) * diff


def adam_step(params: Iterable[Parameter], state: OptimizerState) -> OptimizerState:
    """One bias-corrected Adam update of every parameter from its accumulated grad."""
    state.step += 1
    t = state.step
    correction1 = 1 - state.beta1 ** t
    correction2 = 1 - state.beta2 ** t
    for p in params:
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros_like(p.value)
            state.second_moment[p.name] = np.zeros_like(p.value)
        v = state.second_moment[p.name]
        g = p.grad
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.value -= (state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)).astype(p.value.dtype)
    return state


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int = 4, factor: float = 0.1):
        self.patience = patience
        self.factor = factor

    def step(self, state: TrainState, val_loss: float) -> float:
        if val_loss < state.plateau_best:
            state.plateau_best = val_loss
            state.plateau_counter = 0
        else:
            state.plateau_counter += 1
            if state.plateau_counter >= self.patience:
                state.lr *= self.factor
                state.plateau_counter = 0
                logger.info("validation loss flat for %d epochs; learning rate now %.3g", self.patience, state.lr)
        return state.lr


class EarlyStopping:
    """Stop after ``patience`` epochs without strict improvement or once ``max_epochs`` have run."""

    def __init__(self, patience: int = 15, max_epochs: int = 200):
        self.patience = patience
        self.max_epochs = max_epochs

    def step(self, state: TrainState, val_loss: float) -> bool:
        if val_loss < state.stop_best:
            state.stop_best = val_loss
            state.stop_counter = 0
        else:
            state.stop_counter += 1
        if state.stop_counter >= self.patience:
            logger.info("early stopping: no improvement for %d epochs", self.patience)
            return True
        return state.epoch >= self.max_epochs


def _stack(windows, indices) -> Tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([windows[i].inputs for i in indices]),
            np.concatenate([windows[i].targets for i in indices]))


def iterate_batches(windows, order: np.ndarray, batch_size: int, prefetch: bool = False) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Batches in ``order``; the last partial batch is kept. One worker may assemble ahead."""
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if not prefetch or len(chunks) < 2:
        for chunk in chunks:
            yield _stack(windows, chunk)
        return
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = pool.submit(_stack, windows, chunks[0])
        for chunk in chunks[1:]:
            ready = pending.result()
            pending = pool.submit(_stack, windows, chunk)
            yield ready
        yield pending.result()


def write_history(history: List[EpochRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in history:
            writer.writerow([r.epoch, f"{r.train_mse:.9g}", f"{r.val_mse:.9g}", f"{r.lr:.9g}"])
    return path


@dataclass
class TrainResult:
    best_epoch: int
    best_val_loss: float
    best_checkpoint: Optional[Path]
    history: List[EpochRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


class TrainingService:
    """Runs the epoch loop for one model and writes its run directory."""

    def __init__(self, config: Optional[TrainConfig] = None):
        self.config = config or TrainConfig()
        self.schedule = PlateauSchedule(self.config.lr_patience, self.config.lr_factor)
        self.stopping = EarlyStopping(self.config.stop_patience, self.config.epochs)

    def _train_batch(self, model: SSAUNet, x, y, optimizer: OptimizerState) -> float:
        model.zero_grad()
        tape = Tape()
        pred = model(x, Mode.TRAIN, tape)
        loss, grad = mse_loss(pred, y.astype(pred.dtype, copy=False))
        model.backprop(grad, tape)
        culprit = next((name for name, p in model.named_parameters() if not np.all(np.isfinite(p.grad))), None)
        if not np.isfinite(loss) or culprit:
            where = f"first non-finite gradient in '{culprit}'" if culprit else "all parameter gradients finite"
            raise NumericError(f"training loss is {loss} ({where})")
        adam_step(model.parameters(), optimizer)
        return loss

    def validate(self, model: SSAUNet, windows) -> float:
        """Mean over validation batches of the batch MSE."""
        losses = []
        for x, y in iterate_batches(windows, np.arange(len(windows)), self.config.batch_size):
            pred = model(x, Mode.EVAL)
            losses.append(mse_loss(pred, y.astype(pred.dtype, copy=False))[0])
        return float(np.mean(losses))

    def train(self, model: SSAUNet, train_windows, val_windows, normalization: float = 1.0) -> TrainResult:
        if not train_windows or not val_windows:
            raise DataError(f"training needs non-empty splits (train {len(train_windows)}, val {len(val_windows)})")
        cfg = self.config
        out_dir = Path(cfg.output_dir)
        checkpoints = CheckpointService(out_dir)
        rng = np.random.default_rng(cfg.seed)
        optimizer = OptimizerState(lr=cfg.lr)
        state = TrainState(lr=cfg.lr)
        result = TrainResult(best_epoch=0, best_val_loss=float("inf"), best_checkpoint=None)

        for epoch in range(1, cfg.epochs + 1):
            state.epoch = epoch
            order = rng.permutation(len(train_windows))
            losses = [self._train_batch(model, x, y, optimizer)
                      for x, y in iterate_batches(train_windows, order, cfg.batch_size, cfg.prefetch)]
            train_mse = float(np.mean(losses))
            val_mse = self.validate(model, val_windows)
            record = EpochRecord(epoch=epoch, train_mse=train_mse, val_mse=val_mse, lr=optimizer.lr)
            result.history.append(record)
            logger.info("epoch %d: train %.6g, val %.6g, lr %.3g", epoch, train_mse, val_mse, optimizer.lr)

            improved = val_mse < state.best_val_loss
            if improved:
                state.best_val_loss = val_mse
            optimizer.lr = self.schedule.step(state, val_mse)
            stop = self.stopping.step(state, val_mse)

            meta = {"epoch": epoch, "val_loss": repr(val_mse), "best_val_loss": repr(state.best_val_loss),
                    "normalization": repr(normalization)}
            meta.update({f"state.{k}": v for k, v in state.to_dict().items()})
            result.checkpoints.append(checkpoints.save_epoch(model, optimizer, meta, epoch))
            if improved:
                result.best_epoch, result.best_val_loss = epoch, val_mse
                result.best_checkpoint = checkpoints.save_best(model, optimizer, meta)
            write_history(result.history, out_dir / "history.csv")
            if stop:
                break
        return result
