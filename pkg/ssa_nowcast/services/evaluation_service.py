"""Pixel MSE and binarised skill metrics per lead time, for a model and for persistence."""
import csv
import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from ..errors import DataError, DimensionError
from ..models import ConfusionCounts, MetricsRecord, Mode, SampleWindow
from ..nn.unet import SSAUNet, persistence_predict

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("model", "horizon_min", "mse", "precision", "recall", "accuracy", "f1",
               "tp", "fp", "tn", "fn", "threshold", "degenerate")
PERSISTENCE = "persistence"


def binarize(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    """Confusion counts with a pixel positive iff its value exceeds threshold."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    p = pred > threshold
    t = target > threshold
    return ConfusionCounts(tp=int(np.count_nonzero(p & t)), fp=int(np.count_nonzero(p & ~t)),
                           tn=int(np.count_nonzero(~p & ~t)), fn=int(np.count_nonzero(~p & t)))


def metrics_from_counts(counts: ConfusionCounts):
    """(precision, recall, accuracy, f1, degenerate); zero denominators give 0 and set the flag."""
    degenerate = False

    def ratio(num, den):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    precision = ratio(counts.tp, counts.tp + counts.fp)
    recall = ratio(counts.tp, counts.tp + counts.fn)
    accuracy = ratio(counts.tp + counts.tn, counts.total)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, accuracy, f1, degenerate


def _record(model: str, horizon: Optional[int], mse: float, counts: ConfusionCounts,
            threshold: float) -> MetricsRecord:
    precision, recall, accuracy, f1, degenerate = metrics_from_counts(counts)
    return MetricsRecord(model=model, horizon_min=horizon, mse=mse, precision=precision, recall=recall,
                         accuracy=accuracy, f1=f1, counts=counts, threshold=threshold, degenerate=degenerate)


class EvaluationService:
    """Accumulates per-horizon sums over windows in a fixed order."""

    def __init__(self, threshold: float = 0.5, batch_size: int = 6):
        self.threshold = threshold
        self.batch_size = batch_size

    def _score(self, name: str, predict: Callable[[List[SampleWindow]], np.ndarray],
               windows: Sequence[SampleWindow], normalization: float) -> List[MetricsRecord]:
        minutes = windows[0].horizon.minutes
        n_out = len(minutes)
        sse = np.zeros(n_out)
        pixels = np.zeros(n_out, dtype=np.int64)
        counts = [ConfusionCounts() for _ in range(n_out)]
        for start in range(0, len(windows), self.batch_size):
            batch = windows[start:start + self.batch_size]
            pred = predict(batch).astype(np.float64) * normalization
            target = np.concatenate([w.targets for w in batch]).astype(np.float64) * normalization
            if pred.shape != target.shape:
                raise DimensionError(f"{name}: prediction {pred.shape} does not match targets {target.shape}")
            for k in range(n_out):
                diff = pred[:, k] - target[:, k]
                sse[k] += float(np.sum(diff * diff))
                pixels[k] += diff.size
                counts[k] = counts[k] + binarize(pred[:, k], target[:, k], self.threshold)

        mses = sse / pixels
        records = [_record(name, minutes[k], float(mses[k]), counts[k], self.threshold) for k in range(n_out)]
        total = ConfusionCounts()
        for c in counts:
            total = total + c
        records.append(_record(name, None, float(np.mean(mses)), total, self.threshold))
        logger.info("%s: overall MSE %.6g over %d windows", name, records[-1].mse, len(windows))
        return records

    def evaluate(self, model: Optional[SSAUNet], windows: Sequence[SampleWindow],
                 normalization: float = 1.0, model_name: str = "ssa-unet",
                 include_persistence: bool = True) -> List[MetricsRecord]:
        """Rows per lead time plus an "all" row, for the model (if any) and then persistence."""
        if not windows:
            raise DataError("evaluation dataset is empty")
        records = []
        if model is not None:
            records += self._score(
                model_name, lambda batch: model(np.concatenate([w.inputs for w in batch]), Mode.EVAL),
                windows, normalization)
        if include_persistence:
            records += self._score(
                PERSISTENCE, lambda batch: np.concatenate([persistence_predict(w) for w in batch]),
                windows, normalization)
        return records


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def report_csv(records: Sequence[MetricsRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for record in records:
            row = record.to_dict()
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return path


def read_csv_records(path) -> List[MetricsRecord]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return [MetricsRecord.from_dict(row) for row in csv.DictReader(f)]
