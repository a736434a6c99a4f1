"""Spherical projection, modulo sub-cloud splitting and occupancy statistics."""
import logging
from typing import Iterable, List, Tuple

import numpy as np
import pandas as pd

from core.exceptions import NumericError, ParameterError, ShapeError
from models.domain import (
    CH_INTENSITY, CH_RANGE, CH_X, CH_Y, CH_Z, EMPTY_INDEX, EMPTY_LABEL, NUM_CHANNELS,
    RANGE_SENTINEL, PointCloud, ProjectionIndex, RangeImage, SubcloudValidity, ValidityReport,
)
from models.params import SensorSpec

logger = logging.getLogger(__name__)

MODULE = "rview"
ARCSIN_TOLERANCE = 1e-9


class ProjectionService:
    """Service mapping point clouds to range images and back."""

    def split_cloud(self, cloud: PointCloud, n: int) -> Tuple[List[PointCloud], np.ndarray]:
        """Partition by original index modulo ``n``; returns sub-clouds and the assignment.

        File order is assumed to be the sensor's firing order; no reordering is applied.
        """
        if n < 1:
            raise ParameterError(f"partition count must be >= 1, got {n}", module=MODULE)
        if n > 1 and n > cloud.count:
            raise ParameterError(
                f"cannot split {cloud.count} points into {n} non-empty sub-clouds", module=MODULE
            )

        assignment = np.arange(cloud.count) % n
        if n == 1:
            return [cloud], assignment
        subclouds = [cloud.subset(np.arange(i, cloud.count, n)) for i in range(n)]
        return subclouds, assignment

    def pixel_coordinates(self, cloud: PointCloud, spec: SensorSpec, height: int,
                          width: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Column, row and range of every point; indices floored then clamped to the image."""
        if height < 1 or width < 1:
            raise ParameterError(f"image size must be positive, got {height}x{width}", module=MODULE)

        ranges = cloud.ranges
        if np.any(ranges <= 0):
            raise NumericError("points with zero range cannot be projected", module=MODULE)

        azimuth = np.arctan2(cloud.ys, cloud.xs)
        u = np.floor(width / 2.0 - (width / (2.0 * np.pi)) * azimuth)

        ratio = cloud.zs / ranges
        if np.any(np.abs(ratio) > 1.0 + ARCSIN_TOLERANCE):
            raise NumericError("arcsin argument outside [-1, 1]", module=MODULE)
        elevation = np.arcsin(np.clip(ratio, -1.0, 1.0))
        v = np.floor((height / spec.fov) * (spec.theta_max - elevation))

        us = np.clip(u, 0, width - 1).astype(np.int32)
        vs = np.clip(v, 0, height - 1).astype(np.int32)
        return us, vs, ranges

    def project(self, cloud: PointCloud, spec: SensorSpec, height: int,
                width: int) -> Tuple[RangeImage, ProjectionIndex]:
        """Project a cloud; per pixel the closest point (then lowest index) wins."""
        us, vs, ranges = self.pixel_coordinates(cloud, spec, height, width)
        n = cloud.count

        pixel = vs.astype(np.int64) * width + us
        order = np.lexsort((np.arange(n), ranges, pixel))
        sorted_pixel = pixel[order]
        first = np.ones(n, dtype=bool)
        first[1:] = sorted_pixel[1:] != sorted_pixel[:-1]
        winners = order[first]

        winner = np.zeros(n, dtype=bool)
        winner[winners] = True

        channels = np.zeros((NUM_CHANNELS, height, width), dtype=np.float32)
        channels[CH_RANGE] = RANGE_SENTINEL
        wv, wu = vs[winners], us[winners]
        channels[CH_X, wv, wu] = cloud.xs[winners]
        channels[CH_Y, wv, wu] = cloud.ys[winners]
        channels[CH_Z, wv, wu] = cloud.zs[winners]
        channels[CH_INTENSITY, wv, wu] = cloud.intensities[winners]
        channels[CH_RANGE, wv, wu] = ranges[winners]

        occupancy = np.zeros((height, width), dtype=bool)
        occupancy[wv, wu] = True
        point_index = np.full((height, width), EMPTY_INDEX, dtype=np.int64)
        point_index[wv, wu] = winners

        label_plane = None
        if cloud.is_labeled:
            label_plane = np.full((height, width), EMPTY_LABEL, dtype=np.int32)
            label_plane[wv, wu] = cloud.labels[winners]

        image = RangeImage(
            channels=channels,
            occupancy=occupancy,
            label_plane=label_plane,
            point_index=point_index,
        )
        index = ProjectionIndex(
            us=us,
            vs=vs,
            winner=winner,
            subcloud_id=np.zeros(n, dtype=np.int32),
            ranges=ranges.astype(np.float32),
            n_subclouds=1,
            height=height,
            width=width,
        )
        logger.debug(f"Projected {n} points to {height}x{width}: {len(winners)} winners")
        return image, index

    def project_multi(self, cloud: PointCloud, spec: SensorSpec, height: int, width: int,
                      n: int) -> Tuple[List[RangeImage], ProjectionIndex]:
        """Split into ``n`` sub-clouds and project each; the index covers every input point."""
        subclouds, assignment = self.split_cloud(cloud, n)

        us = np.zeros(cloud.count, dtype=np.int32)
        vs = np.zeros(cloud.count, dtype=np.int32)
        winner = np.zeros(cloud.count, dtype=bool)
        ranges = np.zeros(cloud.count, dtype=np.float32)

        images = []
        for i, subcloud in enumerate(subclouds):
            image, sub_index = self.project(subcloud, spec, height, width)
            positions = np.flatnonzero(assignment == i)
            us[positions] = sub_index.us
            vs[positions] = sub_index.vs
            winner[positions] = sub_index.winner
            ranges[positions] = sub_index.ranges
            images.append(image)

        index = ProjectionIndex(
            us=us,
            vs=vs,
            winner=winner,
            subcloud_id=assignment,
            ranges=ranges,
            n_subclouds=n,
            height=height,
            width=width,
        )
        logger.info(
            f"Projected {cloud.count} points into {n} images of {height}x{width}, "
            f"{int(winner.sum())} winners"
        )
        return images, index

    def validity_stats(self, index: ProjectionIndex, images: List[RangeImage]) -> ValidityReport:
        """3D validity (winners / points) and 2D occupancy, overall and per sub-cloud."""
        if len(images) != index.n_subclouds:
            raise ShapeError(
                f"index has {index.n_subclouds} sub-clouds but {len(images)} images were given",
                module=MODULE,
            )

        per_subcloud = []
        for i, image in enumerate(images):
            members = index.subcloud_id == i
            total = int(members.sum())
            projected = int(index.winner[members].sum())
            per_subcloud.append(SubcloudValidity(
                total_points=total,
                projected_points=projected,
                validity=projected / total if total else 1.0,
                occupancy_2d=image.occupancy_ratio,
            ))

        total = index.count
        projected = int(index.winner.sum())
        occupied = sum(image.occupied_count for image in images)
        return ValidityReport(
            total_points=total,
            projected_points=projected,
            validity=projected / total if total else 1.0,
            occupancy_2d=occupied / float(index.n_subclouds * index.height * index.width),
            per_subcloud=per_subcloud,
        )

    def unproject_coords(self, index: ProjectionIndex) -> pd.DataFrame:
        """One row per original point: sub-cloud, pixel, range and winner flag."""
        frame = pd.DataFrame({
            "subcloud": index.subcloud_id,
            "u": index.us,
            "v": index.vs,
            "range": index.ranges,
            "winner": index.winner,
        })
        frame.index.name = "point"
        return frame

    def validity_grid(self, cloud: PointCloud, spec: SensorSpec, heights: Iterable[int],
                      widths: Iterable[int], subclouds: Iterable[int] = (1,)) -> pd.DataFrame:
        """Validity and occupancy for every (N, H, W) combination."""
        rows = []
        for n in subclouds:
            for height in heights:
                for width in widths:
                    images, index = self.project_multi(cloud, spec, height, width, n)
                    report = self.validity_stats(index, images)
                    rows.append({
                        "subclouds": n,
                        "height": height,
                        "width": width,
                        "total_points": report.total_points,
                        "projected_points": report.projected_points,
                        "validity": report.validity,
                        "occupancy_2d": report.occupancy_2d,
                        "mean_subcloud_occupancy": report.mean_subcloud_occupancy,
                    })
        return pd.DataFrame(rows)

    def resolution_gain_ratio(self, grid: pd.DataFrame, base_height: int = 32,
                              base_width: int = 1024, subclouds: int = 1) -> float:
        """ΔV from doubling H over ΔV from doubling W, both from (base_height, base_width)."""
        rows = grid[grid["subclouds"] == subclouds].set_index(["height", "width"])["validity"]
        try:
            base = rows.loc[(base_height, base_width)]
            taller = rows.loc[(2 * base_height, base_width)]
            wider = rows.loc[(base_height, 2 * base_width)]
        except KeyError as e:
            raise ParameterError(f"validity grid lacks resolution {e}", module=MODULE) from e
        gain_w = wider - base
        if gain_w <= 0:
            raise NumericError("doubling the width did not increase validity", module=MODULE)
        return float((taller - base) / gain_w)


# Global instance
projection_service = ProjectionService()
