"""Evaluation and benchmark report models."""
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class ConfusionMatrix(BaseModel):
    """C×C point counts; rows are ground truth, columns are predictions."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    counts: np.ndarray
    ignore_id: Optional[int] = None

    @model_validator(mode="after")
    def _check(self) -> "ConfusionMatrix":
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion counts must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")
        return self

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape or self.ignore_id != other.ignore_id:
            raise ValueError("cannot add confusion matrices of different layouts")
        return ConfusionMatrix(counts=self.counts + other.counts, ignore_id=self.ignore_id)


class SegmentationScores(BaseModel):
    """Per-class IoU/Acc (NaN where undefined) and their means."""

    iou: List[float]
    acc: List[float]
    miou: float
    macc: float
    overall_accuracy: float
    evaluated_classes: List[int]


class StageTiming(BaseModel):
    """Wall-clock statistics of one pipeline stage, in milliseconds."""

    stage: str
    mean_ms: float
    min_ms: float
    max_ms: float

    @model_validator(mode="after")
    def _ordered(self) -> "StageTiming":
        # Allow float rounding of the mean at the edges
        slack = 1e-9 * max(1.0, abs(self.max_ms))
        if not self.min_ms - slack <= self.mean_ms <= self.max_ms + slack:
            raise ValueError("mean must lie within [min, max]")
        return self


class BenchReport(BaseModel):
    """Timing report of the warmup-then-measure protocol."""

    warmup_iters: int = Field(default=100, ge=0)
    measured_iters: int = Field(default=100, ge=1)
    stages: List[StageTiming]
    config: Dict[str, Any] = {}

    def stage(self, name: str) -> StageTiming:
        for timing in self.stages:
            if timing.stage == name:
                return timing
        raise KeyError(name)
