"""Parameter and configuration models for sensors, class maps, augmentation and post-processing."""
import math
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from models.domain import PointCloud

Range = Tuple[float, float]


class SensorSpec(BaseModel):
    """Vertical field of view, beam count and range limits of a LiDAR."""

    model_config = ConfigDict(frozen=True)

    name: str = "sensor"
    theta_max: float  # radians, upper bound of the vertical FoV
    theta_min: float  # radians, lower bound of the vertical FoV
    beams: int = Field(ge=1)
    range_min: float
    range_max: float

    @model_validator(mode="after")
    def _check(self) -> "SensorSpec":
        if not self.theta_max > self.theta_min:
            raise ValueError("theta_max must exceed theta_min")
        if not self.range_max > self.range_min > 0:
            raise ValueError("range limits must satisfy range_max > range_min > 0")
        return self

    @property
    def fov(self) -> float:
        return self.theta_max - self.theta_min

    @classmethod
    def from_degrees(cls, name: str, theta_max_deg: float, theta_min_deg: float, beams: int,
                     range_min_m: float, range_max_m: float) -> "SensorSpec":
        return cls(
            name=name,
            theta_max=math.radians(theta_max_deg),
            theta_min=math.radians(theta_min_deg),
            beams=beams,
            range_min=range_min_m,
            range_max=range_max_m,
        )


class ClassMap(BaseModel):
    """Raw-id to train-id mapping, class names, ignore id and class frequencies."""

    model_config = ConfigDict(frozen=True)

    raw_to_train: Dict[int, int]
    class_names: List[str]
    ignore_id: int
    frequencies: List[float]
    # Per-class WPD+ weight overrides keyed by train id
    weight_overrides: Dict[int, float] = {}

    @model_validator(mode="after")
    def _check(self) -> "ClassMap":
        num_classes = len(self.class_names)
        if len(self.frequencies) != num_classes:
            raise ValueError("one frequency per class is required")
        if not 0 <= self.ignore_id < num_classes:
            raise ValueError(f"ignore_id {self.ignore_id} is not a train id")
        used = set(self.raw_to_train.values())
        if used != set(range(num_classes)):
            raise ValueError("train ids must be contiguous 0..C-1 and every class needs a raw id")
        if any(f < 0 for f in self.frequencies):
            raise ValueError("frequencies must be non-negative")
        total = sum(f for c, f in enumerate(self.frequencies) if c != self.ignore_id)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"frequencies of non-ignored classes sum to {total}, expected 1")
        for c, w in self.weight_overrides.items():
            if not 0 <= c < num_classes or not 0.0 <= w <= 1.0:
                raise ValueError(f"weight override {c}={w} out of range")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def inverse(self) -> Dict[int, int]:
        """Train id -> first raw id listed for it."""
        inverse: Dict[int, int] = {}
        for raw, train in self.raw_to_train.items():
            inverse.setdefault(train, raw)
        return inverse

    def train_id(self, name: str) -> int:
        return self.class_names.index(name)

    def class_weights(self) -> np.ndarray:
        """Normalized WPD+ weights: (1/f_c) / max_k(1/f_k), overrides applied, ignore class 0."""
        freqs = np.asarray(self.frequencies, dtype=np.float64)
        weights = np.ones(self.num_classes, dtype=np.float64)
        candidates = [c for c in range(self.num_classes) if c != self.ignore_id and freqs[c] > 0]
        if candidates:
            f_min = freqs[candidates].min()
            weights[candidates] = f_min / freqs[candidates]
        weights[self.ignore_id] = 0.0
        for c, w in self.weight_overrides.items():
            weights[c] = w
        return weights


class GdaParams(BaseModel):
    """Geometric data augmentation: flip, translation and rotation ranges."""

    model_config = ConfigDict(frozen=True)

    flip_x: bool = True
    translate_x: Range = (-5.0, 5.0)
    translate_y: Range = (-3.0, 3.0)
    translate_z: Range = (-1.0, 0.0)
    rotate_yaw: Range = (-5.0, 5.0)  # degrees
    rotate_pitch: Range = (-5.0, 5.0)
    rotate_roll: Range = (-5.0, 5.0)
    probability: float = Field(default=0.5, ge=0.0, le=1.0)

    @field_validator("translate_x", "translate_y", "translate_z",
                     "rotate_yaw", "rotate_pitch", "rotate_roll")
    @classmethod
    def _ordered(cls, value: Range) -> Range:
        if value[0] > value[1]:
            raise ValueError(f"range low {value[0]} exceeds high {value[1]}")
        return value


class WpdConfig(BaseModel):
    """Weighted Paste-Drop+ configuration."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: List[float]
    threshold: float = 0.1
    sample_frames: int = Field(default=6, ge=0)
    paste_pool: List[PointCloud] = []
    ignore_id: Optional[int] = None
    # Bernoulli per point instead of one draw per class and frame
    per_point: bool = False

    @field_validator("weights")
    @classmethod
    def _unit_interval(cls, value: List[float]) -> List[float]:
        if any(not 0.0 <= w <= 1.0 for w in value):
            raise ValueError("WPD+ weights must lie in [0, 1]")
        return value

    def _eligible(self) -> List[int]:
        return [c for c in range(len(self.weights)) if c != self.ignore_id]

    @property
    def paste_classes(self) -> List[int]:
        return [c for c in self._eligible() if self.weights[c] > self.threshold]

    @property
    def drop_classes(self) -> List[int]:
        return [c for c in self._eligible() if self.weights[c] <= self.threshold]


def _check_odd_kernel(value: int) -> int:
    if value % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {value}")
    return value


class NnriParams(BaseModel):
    """Nearest Neighbors Range Interpolation parameters."""

    model_config = ConfigDict(frozen=True)

    k: int = Field(default=3, ge=1)
    alpha: float = Field(default=1.0, gt=0.0)
    # "constant" uses alpha itself as every point's cut-off
    cutoff_mode: Literal["adaptive", "constant"] = "adaptive"
    # Range normalization; per-scan statistics when unset
    r_mean: Optional[float] = None
    r_std: Optional[float] = Field(default=None, gt=0.0)
    # Points gathered per vectorized batch
    chunk_size: int = Field(default=32768, ge=1)

    @field_validator("k")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        return _check_odd_kernel(value)

    @property
    def pad(self) -> int:
        return (self.k - 1) // 2


class KnnParams(BaseModel):
    """Window KNN voting parameters (search window, vote count, cut-off, Gaussian width)."""

    model_config = ConfigDict(frozen=True)

    k: int = Field(default=5, ge=1)
    votes: int = Field(default=5, ge=1)
    cutoff: float = Field(default=1.0, ge=0.0)
    sigma: Optional[float] = Field(default=None, gt=0.0)

    @field_validator("k")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        return _check_odd_kernel(value)

    @model_validator(mode="after")
    def _check(self) -> "KnnParams":
        if self.votes > self.k * self.k:
            raise ValueError(f"votes {self.votes} exceed the window size {self.k * self.k}")
        return self


class SceneSpec(BaseModel):
    """Procedural scene: primitives, class ids and the virtual sensor's ray grid."""

    model_config = ConfigDict(frozen=True)

    seed: int = 0
    sensor: SensorSpec
    azimuth_steps: int = Field(default=512, ge=1)
    beams: Optional[int] = Field(default=None, ge=1)  # defaults to sensor.beams
    sensor_height: float = Field(default=1.73, gt=0.0)
    # Half side of the square ground patch; None is an infinite plane
    ground_extent: Optional[float] = Field(default=None, gt=0.0)
    vehicles: int = Field(default=8, ge=0)
    poles: int = Field(default=6, ge=0)
    signs: int = Field(default=3, ge=0)
    pedestrians: int = Field(default=5, ge=0)
    min_distance: float = Field(default=5.0, gt=0.0)
    # Farthest object placement; defaults to 0.4 * sensor.range_max
    max_distance: Optional[float] = Field(default=None, gt=0.0)
    class_ids: Dict[str, int] = {
        "ground": 1, "vehicle": 2, "pole": 3, "sign": 4, "pedestrian": 5,
    }

    @model_validator(mode="after")
    def _check(self) -> "SceneSpec":
        if self.placement_max <= self.min_distance:
            raise ValueError("objects need max_distance > min_distance")
        if self.placement_max > self.sensor.range_max:
            raise ValueError("objects must lie within the sensor's range_max")
        missing = {"ground", "vehicle", "pole", "sign", "pedestrian"} - set(self.class_ids)
        if missing:
            raise ValueError(f"class_ids lacks {sorted(missing)}")
        return self

    @property
    def ray_rows(self) -> int:
        return self.beams or self.sensor.beams

    @property
    def placement_max(self) -> float:
        return self.max_distance or 0.4 * self.sensor.range_max


class MockPredictorConfig(BaseModel):
    """Noise model of the stand-in 2D predictor."""

    model_config = ConfigDict(frozen=True)

    noise_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    temperature: float = Field(default=0.1, gt=0.0)
    seed: int = 0
