"""Array-backed domain types: point clouds, range images, projection records, score volumes.

All arrays are copied on construction and marked read-only.
"""
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

# Channel order of the five-plane range image
CH_X, CH_Y, CH_Z, CH_INTENSITY, CH_RANGE = range(5)
NUM_CHANNELS = 5
CHANNEL_NAMES = ("x", "y", "z", "intensity", "range")

RANGE_SENTINEL = -1.0
EMPTY_LABEL = -1
EMPTY_INDEX = -1


def _frozen(value: Any, dtype) -> np.ndarray:
    array = np.array(value, dtype=dtype)
    array.flags.writeable = False
    return array


class ArrayModel(BaseModel):
    """Base for immutable models that hold numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class PointCloud(ArrayModel):
    """Columnar LiDAR sweep: coordinates, remission and optional train-id labels."""

    xs: np.ndarray
    ys: np.ndarray
    zs: np.ndarray
    intensities: np.ndarray
    labels: Optional[np.ndarray] = None
    # File position of every retained point and the number of records in the file
    source_index: np.ndarray
    raw_count: int

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: Dict[str, Any]) -> Dict[str, Any]:
        data = dict(data)
        xs = _frozen(data["xs"], np.float64)
        data["xs"] = xs
        data["ys"] = _frozen(data["ys"], np.float64)
        data["zs"] = _frozen(data["zs"], np.float64)
        data["intensities"] = _frozen(data["intensities"], np.float32)
        if data.get("labels") is not None:
            data["labels"] = _frozen(data["labels"], np.int32)
        if data.get("source_index") is None:
            data["source_index"] = np.arange(len(xs), dtype=np.int64)
        data["source_index"] = _frozen(data["source_index"], np.int64)
        if data.get("raw_count") is None:
            data["raw_count"] = len(xs)
        return data

    @model_validator(mode="after")
    def _check_lengths(self) -> "PointCloud":
        n = len(self.xs)
        columns = {"ys": self.ys, "zs": self.zs, "intensities": self.intensities,
                   "source_index": self.source_index}
        if self.labels is not None:
            columns["labels"] = self.labels
        for name, column in columns.items():
            if column.ndim != 1 or len(column) != n:
                raise ValueError(f"column '{name}' has length {len(column)}, expected {n}")
        if self.raw_count < n:
            raise ValueError(f"raw_count {self.raw_count} is smaller than point count {n}")
        return self

    @property
    def count(self) -> int:
        return len(self.xs)

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    @property
    def xyz(self) -> np.ndarray:
        """(n, 3) float64 coordinate matrix."""
        return np.stack([self.xs, self.ys, self.zs], axis=1)

    @property
    def ranges(self) -> np.ndarray:
        return np.sqrt(self.xs ** 2 + self.ys ** 2 + self.zs ** 2)

    def subset(self, indices: np.ndarray) -> "PointCloud":
        """Points at ``indices`` (boolean mask or positions), order preserved."""
        return PointCloud(
            xs=self.xs[indices],
            ys=self.ys[indices],
            zs=self.zs[indices],
            intensities=self.intensities[indices],
            labels=None if self.labels is None else self.labels[indices],
            source_index=self.source_index[indices],
            raw_count=self.raw_count,
        )

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        return PointCloud(
            xs=xyz[:, 0], ys=xyz[:, 1], zs=xyz[:, 2],
            intensities=self.intensities, labels=self.labels,
            source_index=self.source_index, raw_count=self.raw_count,
        )

    def with_labels(self, labels: Optional[np.ndarray]) -> "PointCloud":
        return PointCloud(
            xs=self.xs, ys=self.ys, zs=self.zs, intensities=self.intensities,
            labels=labels, source_index=self.source_index, raw_count=self.raw_count,
        )

    @classmethod
    def concatenate(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        """Join clouds end to end; the result is a fresh cloud with its own numbering."""
        if not clouds:
            return cls.empty()
        labeled = all(c.is_labeled for c in clouds)
        xs = np.concatenate([c.xs for c in clouds])
        return cls(
            xs=xs,
            ys=np.concatenate([c.ys for c in clouds]),
            zs=np.concatenate([c.zs for c in clouds]),
            intensities=np.concatenate([c.intensities for c in clouds]),
            labels=np.concatenate([c.labels for c in clouds]) if labeled else None,
            source_index=None,
            raw_count=None,
        )

    @classmethod
    def empty(cls, labeled: bool = False) -> "PointCloud":
        zeros = np.zeros(0)
        return cls(xs=zeros, ys=zeros, zs=zeros, intensities=zeros,
                   labels=np.zeros(0, dtype=np.int32) if labeled else None,
                   source_index=None, raw_count=None)


class RangeImage(ArrayModel):
    """H×W five-channel raster (x, y, z, intensity, range) with occupancy."""

    channels: np.ndarray  # (5, H, W) float32
    occupancy: np.ndarray  # (H, W) bool
    label_plane: Optional[np.ndarray] = None  # (H, W) int32, -1 where empty
    point_index: np.ndarray  # (H, W) int64, winner index within its sub-cloud, -1 where empty

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: Dict[str, Any]) -> Dict[str, Any]:
        data = dict(data)
        data["channels"] = _frozen(data["channels"], np.float32)
        data["occupancy"] = _frozen(data["occupancy"], bool)
        if data.get("label_plane") is not None:
            data["label_plane"] = _frozen(data["label_plane"], np.int32)
        if data.get("point_index") is None:
            data["point_index"] = np.full(data["occupancy"].shape, EMPTY_INDEX, dtype=np.int64)
        data["point_index"] = _frozen(data["point_index"], np.int64)
        return data

    @model_validator(mode="after")
    def _check_shapes(self) -> "RangeImage":
        if self.channels.ndim != 3 or self.channels.shape[0] != NUM_CHANNELS:
            raise ValueError(f"channels must be (5, H, W), got {self.channels.shape}")
        plane = self.channels.shape[1:]
        if self.occupancy.shape != plane or self.point_index.shape != plane:
            raise ValueError("occupancy and point_index must match the channel planes")
        if self.label_plane is not None and self.label_plane.shape != plane:
            raise ValueError("label_plane must match the channel planes")
        return self

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def ranges(self) -> np.ndarray:
        return self.channels[CH_RANGE]

    @property
    def occupied_count(self) -> int:
        return int(self.occupancy.sum())

    @property
    def occupancy_ratio(self) -> float:
        return self.occupied_count / float(self.height * self.width)

    @classmethod
    def blank(cls, height: int, width: int, labeled: bool = False) -> "RangeImage":
        channels = np.zeros((NUM_CHANNELS, height, width), dtype=np.float32)
        channels[CH_RANGE] = RANGE_SENTINEL
        return cls(
            channels=channels,
            occupancy=np.zeros((height, width), dtype=bool),
            label_plane=np.full((height, width), EMPTY_LABEL, dtype=np.int32) if labeled else None,
            point_index=None,
        )


class ProjectionIndex(ArrayModel):
    """Per-point record linking every 3D point to its pixel in its sub-cloud image."""

    us: np.ndarray  # column per point
    vs: np.ndarray  # row per point
    winner: np.ndarray  # True iff the point owns its pixel
    subcloud_id: np.ndarray
    ranges: np.ndarray  # float32, same rounding as the range channel
    n_subclouds: int
    height: int
    width: int

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: Dict[str, Any]) -> Dict[str, Any]:
        data = dict(data)
        data["us"] = _frozen(data["us"], np.int32)
        data["vs"] = _frozen(data["vs"], np.int32)
        data["winner"] = _frozen(data["winner"], bool)
        data["subcloud_id"] = _frozen(data["subcloud_id"], np.int32)
        data["ranges"] = _frozen(data["ranges"], np.float32)
        return data

    @model_validator(mode="after")
    def _check(self) -> "ProjectionIndex":
        n = len(self.us)
        for name in ("vs", "winner", "subcloud_id", "ranges"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"index column '{name}' length differs from us")
        if n:
            if self.us.min() < 0 or self.us.max() >= self.width:
                raise ValueError("column index out of bounds")
            if self.vs.min() < 0 or self.vs.max() >= self.height:
                raise ValueError("row index out of bounds")
            if self.subcloud_id.min() < 0 or self.subcloud_id.max() >= self.n_subclouds:
                raise ValueError("sub-cloud id out of bounds")
        return self

    @property
    def count(self) -> int:
        return len(self.us)


class ScoreVolume(ArrayModel):
    """N×C×H×W per-class scores of the 2D predictor for all sub-cloud images."""

    scores: np.ndarray  # (N, C, H, W) float32
    occupancy: np.ndarray  # (N, H, W) bool

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: Dict[str, Any]) -> Dict[str, Any]:
        data = dict(data)
        data["scores"] = _frozen(data["scores"], np.float32)
        data["occupancy"] = _frozen(data["occupancy"], bool)
        return data

    @model_validator(mode="after")
    def _check_shapes(self) -> "ScoreVolume":
        if self.scores.ndim != 4:
            raise ValueError(f"scores must be (N, C, H, W), got {self.scores.shape}")
        n, _, h, w = self.scores.shape
        if self.occupancy.shape != (n, h, w):
            raise ValueError(f"occupancy must be {(n, h, w)}, got {self.occupancy.shape}")
        return self

    @property
    def n_images(self) -> int:
        return self.scores.shape[0]

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    @property
    def height(self) -> int:
        return self.scores.shape[2]

    @property
    def width(self) -> int:
        return self.scores.shape[3]

    def is_normalized(self, tol: float = 1e-5) -> bool:
        """Scores sum to 1 at occupied pixels and are zero elsewhere."""
        totals = self.scores.sum(axis=1, dtype=np.float64)
        occupied_ok = np.all(np.abs(totals[self.occupancy] - 1.0) <= tol)
        empty_ok = not np.any(self.scores.transpose(0, 2, 3, 1)[~self.occupancy])
        return bool(occupied_ok and empty_ok)

    @classmethod
    def stack(cls, slices: List[np.ndarray], occupancies: List[np.ndarray]) -> "ScoreVolume":
        return cls(scores=np.stack(slices), occupancy=np.stack(occupancies))


class SubcloudValidity(BaseModel):
    """Validity counts of one sub-cloud."""

    total_points: int
    projected_points: int
    validity: float
    occupancy_2d: float


class ValidityReport(BaseModel):
    """3D validity (share of points that own a pixel) and 2D occupancy of a projection."""

    total_points: int
    projected_points: int
    validity: float
    occupancy_2d: float
    per_subcloud: List[SubcloudValidity]

    @property
    def mean_subcloud_occupancy(self) -> float:
        if not self.per_subcloud:
            return 0.0
        return float(np.mean([s.occupancy_2d for s in self.per_subcloud]))
