"""Training-time augmentation: geometric transforms, Weighted Paste-Drop+, cleanup and Multi-Cloud Fusion."""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

from core.exceptions import ConfigurationError, ParameterError, ShapeError
from models.domain import CH_RANGE, EMPTY_INDEX, EMPTY_LABEL, RANGE_SENTINEL, PointCloud, RangeImage
from models.params import ClassMap, GdaParams, SensorSpec, WpdConfig
from services.pcio_service import pcio_service
from services.projection_service import projection_service

logger = logging.getLogger(__name__)

MODULE = "augment"


class AugmentService:
    """Service for seeded, pure augmentations of labeled frames and their range images."""

    # ------------------------------------------------------------------
    # Geometric data augmentation
    # ------------------------------------------------------------------

    def flip_x(self, cloud: PointCloud) -> PointCloud:
        xyz = cloud.xyz
        xyz[:, 0] = -xyz[:, 0]
        return cloud.with_xyz(xyz)

    def geometric_augment(self, cloud: PointCloud, params: GdaParams,
                          rng: np.random.Generator) -> PointCloud:
        """Flip, translate and rotate, each applied with ``params.probability``.

        Draws are consumed in a fixed order (flip, translate, rotate) whether or not a
        transform fires, so the stream stays aligned across parameter changes.
        """
        xyz = cloud.xyz
        p = params.probability

        flip = rng.random() < p
        if params.flip_x and flip:
            xyz[:, 0] = -xyz[:, 0]

        if rng.random() < p:
            offset = np.array([
                rng.uniform(*params.translate_x),
                rng.uniform(*params.translate_y),
                rng.uniform(*params.translate_z),
            ])
            xyz = xyz + offset

        if rng.random() < p:
            angles = [
                rng.uniform(*params.rotate_yaw),
                rng.uniform(*params.rotate_pitch),
                rng.uniform(*params.rotate_roll),
            ]
            xyz = Rotation.from_euler("ZYX", angles, degrees=True).apply(xyz)

        return cloud.with_xyz(xyz)

    # ------------------------------------------------------------------
    # Weighted Paste-Drop+
    # ------------------------------------------------------------------

    def build_wpd_config(self, class_map: ClassMap, paste_pool: Sequence[PointCloud] = (),
                         threshold: float = 0.1, sample_frames: int = 6,
                         per_point: bool = False) -> WpdConfig:
        return WpdConfig(
            weights=class_map.class_weights().tolist(),
            threshold=threshold,
            sample_frames=sample_frames,
            paste_pool=list(paste_pool),
            ignore_id=class_map.ignore_id,
            per_point=per_point,
        )

    def build_paste_pool(self, directory: Union[str, Path], class_map: ClassMap) -> List[PointCloud]:
        pool = pcio_service.read_labeled_directory(directory, class_map)
        if not pool:
            logger.warning(f"Paste pool {directory} holds no labeled frames")
        return pool

    def wpd_plus(self, cloud: PointCloud, cfg: WpdConfig, rng: np.random.Generator) -> PointCloud:
        """Drop abundant classes and paste rare classes from pooled frames, in 3D.

        Survivors keep their order and come first; pasted points follow in draw order.
        """
        if not cloud.is_labeled:
            raise ParameterError("Weighted Paste-Drop+ needs a labeled cloud", module=MODULE)
        if cloud.count and cloud.labels.max() >= len(cfg.weights):
            raise ParameterError(
                f"label {int(cloud.labels.max())} has no weight ({len(cfg.weights)} given)",
                module=MODULE,
            )

        paste_classes = cfg.paste_classes
        if paste_classes and not cfg.paste_pool:
            raise ConfigurationError(
                f"classes {paste_classes} exceed threshold {cfg.threshold} but the paste pool is empty",
                module=MODULE,
            )

        keep = np.ones(cloud.count, dtype=bool)
        for c in cfg.drop_classes:
            members = cloud.labels == c
            weight = cfg.weights[c]
            if cfg.per_point:
                positions = np.flatnonzero(members)
                keep[positions[rng.random(len(positions)) < weight]] = False
            elif rng.random() < weight:
                keep[members] = False

        parts = [cloud.subset(keep)]
        if paste_classes and cfg.sample_frames > 0:
            pool = cfg.paste_pool
            picks = rng.choice(len(pool), size=cfg.sample_frames,
                               replace=len(pool) < cfg.sample_frames)
            for f in picks:
                frame = pool[int(f)]
                if not frame.is_labeled:
                    raise ConfigurationError(f"paste pool frame {int(f)} is unlabeled", module=MODULE)
                for c in paste_classes:
                    members = np.flatnonzero(frame.labels == c)
                    weight = cfg.weights[c]
                    if cfg.per_point:
                        members = members[rng.random(len(members)) < weight]
                    elif not rng.random() < weight:
                        continue
                    if len(members):
                        parts.append(frame.subset(members))

        result = PointCloud.concatenate(parts)
        dropped = cloud.count - int(keep.sum())
        pasted = result.count - int(keep.sum())
        logger.info(f"WPD+: dropped {dropped} points, pasted {pasted} points")
        return result

    # ------------------------------------------------------------------
    # Range-image operations
    # ------------------------------------------------------------------

    def clean_unlabeled(self, image: RangeImage, ignore_id: int) -> RangeImage:
        """Unset pixels whose label is ``ignore_id``."""
        if image.label_plane is None:
            raise ParameterError("cleanup needs a range image with a label plane", module=MODULE)

        drop = image.occupancy & (image.label_plane == ignore_id)
        if not drop.any():
            return image

        channels = image.channels.copy()
        channels[:, drop] = 0.0
        channels[CH_RANGE][drop] = RANGE_SENTINEL
        label_plane = image.label_plane.copy()
        label_plane[drop] = EMPTY_LABEL
        point_index = image.point_index.copy()
        point_index[drop] = EMPTY_INDEX

        logger.debug(f"Cleanup removed {int(drop.sum())} ignore-labeled pixels")
        return RangeImage(
            channels=channels,
            occupancy=image.occupancy & ~drop,
            label_plane=label_plane,
            point_index=point_index,
        )

    def mcf(self, images: Sequence[RangeImage], i: int) -> RangeImage:
        """Fill image ``i``'s empty pixels from its siblings; the nearest donor wins.

        The donor's channel vector and label are copied whole. Ties in range go to the
        lower image index.
        """
        self._check_stack(images)
        if not 0 <= i < len(images):
            raise ParameterError(f"target index {i} outside 0..{len(images) - 1}", module=MODULE)

        target = images[i]
        others = [j for j in range(len(images)) if j != i]
        if not others:
            return target

        occupied = np.stack([images[j].occupancy for j in others])
        masked = np.where(occupied, np.stack([images[j].ranges for j in others]), np.inf)
        donor = np.argmin(masked, axis=0)
        fill = ~target.occupancy & occupied.any(axis=0)
        if not fill.any():
            return target

        rows, cols = np.nonzero(fill)
        donors = donor[rows, cols]

        donor_channels = np.stack([images[j].channels for j in others])
        channels = target.channels.copy()
        channels[:, rows, cols] = donor_channels[donors, :, rows, cols].T

        label_plane = None
        if target.label_plane is not None:
            donor_labels = np.stack([images[j].label_plane for j in others])
            label_plane = target.label_plane.copy()
            label_plane[rows, cols] = donor_labels[donors, rows, cols]

        logger.debug(f"MCF filled {len(rows)} pixels of image {i}")
        return RangeImage(
            channels=channels,
            occupancy=target.occupancy | fill,
            label_plane=label_plane,
            point_index=target.point_index,
        )

    def mcf_all(self, images: Sequence[RangeImage]) -> List[RangeImage]:
        """Fuse every image against the original (unfused) siblings."""
        return [self.mcf(images, i) for i in range(len(images))]

    def _check_stack(self, images: Sequence[RangeImage]) -> None:
        if not images:
            raise ParameterError("at least one range image is required", module=MODULE)
        shape = images[0].shape
        if any(image.shape != shape for image in images):
            raise ShapeError("range images differ in size", module=MODULE)
        labeled = [image.label_plane is not None for image in images]
        if any(labeled) and not all(labeled):
            raise ShapeError("either all or none of the range images must carry labels", module=MODULE)

    # ------------------------------------------------------------------
    # Training pipeline
    # ------------------------------------------------------------------

    def augment_frame(self, cloud: PointCloud, spec: SensorSpec, height: int, width: int,
                      n: int, rng: np.random.Generator, ignore_id: int,
                      gda: Optional[GdaParams] = None, wpd: Optional[WpdConfig] = None,
                      select_one: bool = False) -> List[RangeImage]:
        """Fixed order: WPD+, geometric transforms, split, project, cleanup, MCF.

        With ``select_one`` a single randomly chosen fused sub-cloud image is returned.
        """
        if wpd is not None:
            cloud = self.wpd_plus(cloud, wpd, rng)
        if gda is not None:
            cloud = self.geometric_augment(cloud, gda, rng)

        images, _ = projection_service.project_multi(cloud, spec, height, width, n)
        if cloud.is_labeled:
            images = [self.clean_unlabeled(image, ignore_id) for image in images]
        fused = self.mcf_all(images)

        if select_one:
            return [fused[int(rng.integers(len(fused)))]]
        return fused


# Global instance
augment_service = AugmentService()
