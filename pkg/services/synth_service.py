"""Procedural labeled scenes seen by a ray-cast virtual LiDAR, and a mock 2D predictor.

Scenes are built from primitives with closed-form ray intersections: a ground plane,
axis-aligned boxes (vehicles, pedestrians), vertical cylinders (poles) and thin
axis-aligned panels (signs). The sensor sits at the origin, the ground at
z = -sensor_height.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from core.exceptions import ParameterError, ShapeError
from core.workers import frame_generators
from models.domain import EMPTY_LABEL, PointCloud, ScoreVolume
from models.params import MockPredictorConfig, SceneSpec

logger = logging.getLogger(__name__)

MODULE = "synth"

VEHICLE_SIZE = (4.0, 1.8, 1.5)
PEDESTRIAN_SIZE = (0.6, 0.6, 1.7)
POLE_RADIUS = (0.15, 0.3)
POLE_HEIGHT = 4.0
SIGN_SIZE = (0.8, 0.05, 0.6)  # width, thickness, height
SIGN_ELEVATION = 1.6  # panel bottom above ground

INTENSITY = {"ground": 0.3, "vehicle": 0.6, "pole": 0.45, "sign": 0.9, "pedestrian": 0.5}
INTENSITY_NOISE = 0.02


@dataclass(frozen=True)
class Box:
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]
    kind: str


@dataclass(frozen=True)
class Cylinder:
    cx: float
    cy: float
    radius: float
    z0: float
    z1: float
    kind: str


def intersect_plane(directions: np.ndarray, height: float, extent: Optional[float]) -> np.ndarray:
    """Distance to the plane z = -height along each unit ray; inf on a miss."""
    dz = directions[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dz < 0, -height / dz, np.inf)
    if extent is not None:
        hit = np.isfinite(t)
        x = np.where(hit, t * directions[:, 0], 0.0)
        y = np.where(hit, t * directions[:, 1], 0.0)
        t = np.where(hit & (np.abs(x) <= extent) & (np.abs(y) <= extent), t, np.inf)
    return t


def intersect_box(directions: np.ndarray, lo, hi) -> np.ndarray:
    """Slab-method entry distance into an axis-aligned box from the origin; inf on a miss."""
    near = np.full(len(directions), -np.inf)
    far = np.full(len(directions), np.inf)
    for axis in range(3):
        d = directions[:, axis]
        parallel = d == 0
        inside = lo[axis] <= 0.0 <= hi[axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = lo[axis] / d
            t2 = hi[axis] / d
        near = np.maximum(near, np.where(parallel, -np.inf if inside else np.inf, np.minimum(t1, t2)))
        far = np.minimum(far, np.where(parallel, np.inf if inside else -np.inf, np.maximum(t1, t2)))
    hit = (far >= near) & (near > 0)
    return np.where(hit, near, np.inf)


def intersect_cylinder(directions: np.ndarray, cx: float, cy: float, radius: float,
                       z0: float, z1: float) -> np.ndarray:
    """Entry distance through the side of a vertical cylinder; inf on a miss."""
    dx, dy, dz = directions[:, 0], directions[:, 1], directions[:, 2]
    a = dx * dx + dy * dy
    b = -2.0 * (dx * cx + dy * cy)
    c = cx * cx + cy * cy - radius * radius
    disc = b * b - 4.0 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
    z = t * dz
    hit = (a > 0) & (disc >= 0) & (t > 0) & (z >= z0) & (z <= z1)
    return np.where(hit, t, np.inf)


class SynthService:
    """Service generating ground-truth scenes and stand-in network predictions."""

    def scene_ray_grid(self, spec: SceneSpec) -> np.ndarray:
        """(rows*steps, 3) unit ray directions, beam-major, one ray per pixel centre.

        Projecting a hit with H = rows and W = steps lands ray (b, a) in pixel (b, a).
        """
        rows, steps = spec.ray_rows, spec.azimuth_steps
        sensor = spec.sensor
        elevation = sensor.theta_max - (np.arange(rows) + 0.5) * (sensor.fov / rows)
        azimuth = np.pi - (np.arange(steps) + 0.5) * (2.0 * np.pi / steps)
        el, az = np.meshgrid(elevation, azimuth, indexing="ij")
        el, az = el.ravel(), az.ravel()
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)

    def scene_objects(self, spec: SceneSpec, rng: np.random.Generator) -> List:
        """Draw object placements for a scene; every object rests on the ground."""
        ground = -spec.sensor_height
        objects: List = []

        def place() -> Tuple[float, float]:
            distance = rng.uniform(spec.min_distance, spec.placement_max)
            azimuth = rng.uniform(-np.pi, np.pi)
            return distance * np.cos(azimuth), distance * np.sin(azimuth)

        for _ in range(spec.vehicles):
            cx, cy = place()
            length, width, height = VEHICLE_SIZE
            if rng.random() < 0.5:
                length, width = width, length
            objects.append(Box((cx - length / 2, cy - width / 2, ground),
                               (cx + length / 2, cy + width / 2, ground + height), "vehicle"))

        for _ in range(spec.poles):
            cx, cy = place()
            radius = rng.uniform(*POLE_RADIUS)
            objects.append(Cylinder(cx, cy, radius, ground, ground + POLE_HEIGHT, "pole"))

        for _ in range(spec.signs):
            cx, cy = place()
            width, thickness, height = SIGN_SIZE
            # Thin along the axis that points most directly at the sensor
            if abs(cx) >= abs(cy):
                half = (thickness / 2, width / 2)
            else:
                half = (width / 2, thickness / 2)
            bottom = ground + SIGN_ELEVATION
            objects.append(Box((cx - half[0], cy - half[1], bottom),
                               (cx + half[0], cy + half[1], bottom + height), "sign"))

        for _ in range(spec.pedestrians):
            cx, cy = place()
            length, width, height = PEDESTRIAN_SIZE
            objects.append(Box((cx - length / 2, cy - width / 2, ground),
                               (cx + length / 2, cy + width / 2, ground + height), "pedestrian"))
        return objects

    def generate_scene(self, spec: SceneSpec) -> PointCloud:
        """Cast the ray grid; each ray returns its nearest hit within the sensor's range limits."""
        rng = np.random.default_rng(spec.seed)
        directions = self.scene_ray_grid(spec)
        objects = self.scene_objects(spec, rng)

        kinds = ["ground"] + [obj.kind for obj in objects]
        distances = np.empty((len(kinds), len(directions)))
        distances[0] = intersect_plane(directions, spec.sensor_height, spec.ground_extent)
        for i, obj in enumerate(objects, start=1):
            if isinstance(obj, Box):
                distances[i] = intersect_box(directions, obj.lo, obj.hi)
            else:
                distances[i] = intersect_cylinder(directions, obj.cx, obj.cy, obj.radius,
                                                  obj.z0, obj.z1)

        nearest = np.argmin(distances, axis=0)
        t = distances[nearest, np.arange(len(directions))]
        hit = np.isfinite(t) & (t >= spec.sensor.range_min) & (t <= spec.sensor.range_max)

        t, nearest = t[hit], nearest[hit]
        xyz = directions[hit] * t[:, np.newaxis]
        kind_ids = np.array([spec.class_ids[kind] for kind in kinds], dtype=np.int32)
        base = np.array([INTENSITY[kind] for kind in kinds], dtype=np.float64)
        intensity = np.clip(base[nearest] + rng.normal(0.0, INTENSITY_NOISE, size=len(t)), 0.0, 1.0)

        cloud = PointCloud(
            xs=xyz[:, 0],
            ys=xyz[:, 1],
            zs=xyz[:, 2],
            intensities=intensity,
            labels=kind_ids[nearest],
            source_index=None,
            raw_count=None,
        )
        logger.info(f"Generated scene seed={spec.seed}: {cloud.count} points "
                    f"from {len(directions)} rays, {len(objects)} objects")
        return cloud

    # ------------------------------------------------------------------
    # Mock predictor
    # ------------------------------------------------------------------

    def mock_predict(self, label_plane: np.ndarray, occupancy: np.ndarray, num_classes: int,
                     cfg: MockPredictorConfig, rng: np.random.Generator) -> np.ndarray:
        """(C, H, W) scores peaked at each occupied pixel's label, corrupted at ``noise_rate``.

        A corrupted pixel moves to a uniformly drawn other class. The peak is the softmax
        of the one-hot vector divided by the temperature; empty pixels score zero.
        """
        label_plane = np.asarray(label_plane)
        occupancy = np.asarray(occupancy, dtype=bool)
        if label_plane.shape != occupancy.shape or label_plane.ndim != 2:
            raise ShapeError("label plane and occupancy must be matching H×W planes", module=MODULE)
        occupied_labels = label_plane[occupancy]
        if occupied_labels.size and (occupied_labels.min() < 0 or occupied_labels.max() >= num_classes):
            raise ParameterError(f"occupied labels must lie in 0..{num_classes - 1}", module=MODULE)

        labels = np.where(occupancy, label_plane, 0).astype(np.int64)
        corrupt = occupancy & (rng.random(label_plane.shape) < cfg.noise_rate)
        if num_classes > 1:
            shift = rng.integers(1, num_classes, size=label_plane.shape)
            labels = np.where(corrupt, (labels + shift) % num_classes, labels)

        off = np.exp(-1.0 / cfg.temperature)
        peak = 1.0 / (1.0 + (num_classes - 1) * off)
        scores = np.full((num_classes,) + label_plane.shape, off * peak, dtype=np.float64)
        np.put_along_axis(scores, labels[np.newaxis], peak, axis=0)
        scores[:, ~occupancy] = 0.0
        return scores.astype(np.float32)

    def mock_predict_volume(self, label_planes: np.ndarray, num_classes: int,
                            cfg: MockPredictorConfig) -> ScoreVolume:
        """Predict every sub-cloud image with its own generator spawned from ``cfg.seed``."""
        label_planes = np.asarray(label_planes)
        if label_planes.ndim != 3:
            raise ShapeError(f"label planes must be N×H×W, got {label_planes.shape}", module=MODULE)
        occupancy = label_planes != EMPTY_LABEL
        generators = frame_generators(cfg.seed, len(label_planes))
        slices = [
            self.mock_predict(plane, mask, num_classes, cfg, rng)
            for plane, mask, rng in zip(label_planes, occupancy, generators)
        ]
        logger.info(f"Mock predictor scored {len(slices)} images (noise {cfg.noise_rate})")
        return ScoreVolume.stack(slices, list(occupancy))


# Global instance
synth_service = SynthService()
