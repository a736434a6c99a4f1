"""Shared fixtures for the Rangewrench test suite."""
from pathlib import Path

import numpy as np
import pytest

from config.settings import CONFIG_DIR
from models.domain import PointCloud
from models.params import SceneSpec, SensorSpec
from services.pcio_service import pcio_service
from services.synth_service import synth_service

SYNTHETIC_CLASSES = CONFIG_DIR / "classes" / "synthetic.toml"
KITTI_CLASSES = CONFIG_DIR / "classes" / "semantickitti.toml"
KITTI_SENSOR = CONFIG_DIR / "sensors" / "semantickitti.toml"


@pytest.fixture(scope="session")
def kitti_sensor() -> SensorSpec:
    return SensorSpec.from_degrees("semantickitti", 3.0, -25.0, 64, 2.0, 50.0)


@pytest.fixture(scope="session")
def synthetic_classes():
    return pcio_service.load_class_map(SYNTHETIC_CLASSES)


@pytest.fixture(scope="session")
def small_scene(kitti_sensor) -> PointCloud:
    """64 beams × 512 azimuth steps, default object counts."""
    return synth_service.generate_scene(SceneSpec(seed=7, sensor=kitti_sensor, azimuth_steps=512))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_cloud(rng: np.random.Generator, count: int, sensor: SensorSpec,
                 num_classes: int = 6, labeled: bool = True) -> PointCloud:
    """Points scattered inside the sensor's field of view and range limits."""
    azimuth = rng.uniform(-np.pi, np.pi, count)
    elevation = rng.uniform(sensor.theta_min, sensor.theta_max, count)
    ranges = rng.uniform(sensor.range_min, sensor.range_max, count)
    return PointCloud(
        xs=ranges * np.cos(elevation) * np.cos(azimuth),
        ys=ranges * np.cos(elevation) * np.sin(azimuth),
        zs=ranges * np.sin(elevation),
        intensities=rng.random(count),
        labels=rng.integers(0, num_classes, count) if labeled else None,
        source_index=None,
        raw_count=None,
    )


def write_frame(directory: Path, stem: str, cloud: PointCloud, class_map) -> Path:
    path = directory / f"{stem}.bin"
    pcio_service.write_point_cloud(cloud, path)
    if cloud.is_labeled:
        pcio_service.write_labels(cloud.labels, class_map, directory / f"{stem}.label")
    return path
