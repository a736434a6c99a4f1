"""Segmentation metrics and the warmup-then-measure latency protocol."""
import logging
import time
from typing import Any, Callable, Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from core.exceptions import MappingError, ParameterError, ShapeError
from models.reports import BenchReport, ConfusionMatrix, SegmentationScores, StageTiming

logger = logging.getLogger(__name__)

MODULE = "metrics"
TOTAL_STAGE = "total"


class MetricsService:
    """Service for confusion matrices, IoU/accuracy tables and stage timings."""

    def confusion(self, pred: np.ndarray, gt: np.ndarray, num_classes: int,
                  ignore_id: Optional[int] = None) -> ConfusionMatrix:
        """Rows are ground truth, columns predictions; ground-truth ``ignore_id`` points are skipped."""
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise ShapeError(f"{len(pred)} predictions for {len(gt)} ground-truth labels",
                             module=MODULE)
        for name, labels in (("prediction", pred), ("ground truth", gt)):
            bad = (labels < 0) | (labels >= num_classes)
            if np.any(bad):
                raise MappingError(f"{name} label {int(labels[bad][0])} is not in 0..{num_classes - 1}",
                                   module=MODULE)

        if ignore_id is not None:
            keep = gt != ignore_id
            pred, gt = pred[keep], gt[keep]

        counts = np.bincount(num_classes * gt + pred, minlength=num_classes ** 2)
        return ConfusionMatrix(counts=counts.reshape(num_classes, num_classes), ignore_id=ignore_id)

    def scores(self, matrix: ConfusionMatrix) -> SegmentationScores:
        """Per-class IoU and accuracy; classes never seen in either axis leave the means."""
        counts = matrix.counts.astype(np.float64)
        tp = np.diag(counts)
        fp = counts.sum(axis=0) - tp
        fn = counts.sum(axis=1) - tp

        union = tp + fp + fn
        support = tp + fn
        with np.errstate(divide="ignore", invalid="ignore"):
            iou = np.where(union > 0, tp / union, np.nan)
            acc = np.where(support > 0, tp / support, np.nan)

        evaluated = [c for c in range(matrix.num_classes) if c != matrix.ignore_id and union[c] > 0]
        iou_values = iou[evaluated]
        acc_values = acc[evaluated]
        acc_values = acc_values[~np.isnan(acc_values)]

        total = counts.sum()
        return SegmentationScores(
            iou=iou.tolist(),
            acc=acc.tolist(),
            miou=float(iou_values.mean()) if len(iou_values) else float("nan"),
            macc=float(acc_values.mean()) if len(acc_values) else float("nan"),
            overall_accuracy=float(tp.sum() / total) if total else float("nan"),
            evaluated_classes=evaluated,
        )

    def scores_frame(self, scores: SegmentationScores, class_names: Sequence[str]) -> pd.DataFrame:
        """One row per evaluated class plus ``mean`` and ``overall`` summary rows."""
        rows = [
            {"class": class_names[c], "iou": scores.iou[c], "acc": scores.acc[c]}
            for c in scores.evaluated_classes
        ]
        rows.append({"class": "mean", "iou": scores.miou, "acc": scores.macc})
        rows.append({"class": "overall", "iou": float("nan"), "acc": scores.overall_accuracy})
        return pd.DataFrame(rows, columns=["class", "iou", "acc"])

    def format_table(self, scores: SegmentationScores, class_names: Sequence[str]) -> str:
        frame = self.scores_frame(scores, class_names)
        return frame.to_string(index=False, float_format=lambda v: f"{100.0 * v:6.2f}", na_rep="-")

    # ------------------------------------------------------------------
    # Latency
    # ------------------------------------------------------------------

    def bench(self, stages: Mapping[str, Callable[[], Any]], warmup: int = 100, iters: int = 100,
              config: Optional[Dict[str, Any]] = None) -> BenchReport:
        """Run the stages in order ``warmup`` times untimed, then ``iters`` times timed.

        Each iteration times every stage separately; the ``total`` row sums them.
        """
        if not stages:
            raise ParameterError("no stages to benchmark", module=MODULE)
        if iters < 1 or warmup < 0:
            raise ParameterError(f"need iters >= 1 and warmup >= 0, got {iters}, {warmup}",
                                 module=MODULE)

        names = list(stages)
        logger.info(f"Benchmarking {names}: {warmup} warmup + {iters} measured iterations")
        for _ in range(warmup):
            for name in names:
                stages[name]()

        samples = np.zeros((iters, len(names)), dtype=np.float64)
        for i in range(iters):
            for j, name in enumerate(names):
                start = time.perf_counter()
                stages[name]()
                samples[i, j] = (time.perf_counter() - start) * 1000.0

        timings = [self._timing(name, samples[:, j]) for j, name in enumerate(names)]
        if len(names) > 1:
            timings.append(self._timing(TOTAL_STAGE, samples.sum(axis=1)))
        return BenchReport(
            warmup_iters=warmup,
            measured_iters=iters,
            stages=timings,
            config=dict(config or {}),
        )

    def timings_frame(self, report: BenchReport) -> pd.DataFrame:
        frame = pd.DataFrame([timing.model_dump() for timing in report.stages])
        for key, value in report.config.items():
            frame[key] = value
        return frame

    def _timing(self, stage: str, values: np.ndarray) -> StageTiming:
        return StageTiming(
            stage=stage,
            mean_ms=float(values.mean()),
            min_ms=float(values.min()),
            max_ms=float(values.max()),
        )


# Global instance
metrics_service = MetricsService()
