"""Point cloud, label, class map, sensor and raster file I/O.

Point files follow the KITTI convention: little-endian float32 quadruples (x, y, z, intensity).
Label files are little-endian uint32 per point with the semantic id in the low 16 bits and
the instance id in the high 16 bits.
"""
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from core.exceptions import ConfigurationError, ConsistencyError, FormatError, MappingError
from models.domain import (
    CH_RANGE, EMPTY_LABEL, NUM_CHANNELS, RANGE_SENTINEL, PointCloud, RangeImage, ScoreVolume,
)
from models.params import ClassMap, SensorSpec

logger = logging.getLogger(__name__)

MODULE = "pcio"
PathLike = Union[str, Path]

POINT_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
HEADER_DTYPE = np.dtype("<u4")
POINT_RECORD_BYTES = 4 * POINT_DTYPE.itemsize
SEMANTIC_MASK = 0xFFFF

RANGE_IMAGE_MAGIC = b"RVIM"
SCORE_VOLUME_MAGIC = b"SVOL"


class PointCloudIO:
    """Service for bit-exact reading and writing of LiDAR artifacts."""

    # ------------------------------------------------------------------
    # Point clouds
    # ------------------------------------------------------------------

    def read_point_cloud(self, path: PathLike) -> PointCloud:
        """Decode a float32 quadruple file; points at the origin are dropped."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"point file not found: {path}")

        size = path.stat().st_size
        remainder = size % POINT_RECORD_BYTES
        if remainder:
            offset = size - remainder
            raise FormatError(
                f"{path}: length {size} is not a multiple of {POINT_RECORD_BYTES} bytes; "
                f"trailing partial record starts at byte offset {offset}",
                module=MODULE,
            )

        records = np.fromfile(path, dtype=POINT_DTYPE).reshape(-1, 4)
        raw_count = records.shape[0]
        keep = ~np.all(records[:, :3] == 0.0, axis=1)
        dropped = int(raw_count - keep.sum())
        if dropped:
            logger.info(f"Dropped {dropped} zero-norm points from {path.name}")

        kept = records[keep]
        cloud = PointCloud(
            xs=kept[:, 0],
            ys=kept[:, 1],
            zs=kept[:, 2],
            intensities=kept[:, 3],
            labels=None,
            source_index=np.flatnonzero(keep),
            raw_count=raw_count,
        )
        logger.debug(f"Read {cloud.count} points from {path}")
        return cloud

    def write_point_cloud(self, cloud: PointCloud, path: PathLike) -> None:
        """Emit a cloud as float32 quadruples (retained points only)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        records = np.empty((cloud.count, 4), dtype=POINT_DTYPE)
        records[:, 0] = cloud.xs
        records[:, 1] = cloud.ys
        records[:, 2] = cloud.zs
        records[:, 3] = cloud.intensities
        records.tofile(path)
        logger.debug(f"Wrote {cloud.count} points to {path}")

    # ------------------------------------------------------------------
    # Labels
    # ------------------------------------------------------------------

    def decode_labels(self, raw: np.ndarray, class_map: ClassMap) -> Tuple[np.ndarray, int]:
        """Map raw uint32 labels to train ids; returns (train ids, unknown id count)."""
        semantic = (np.asarray(raw, dtype=np.uint32) & SEMANTIC_MASK).astype(np.int64)
        lookup = np.full(SEMANTIC_MASK + 1, -1, dtype=np.int32)
        for raw_id, train_id in class_map.raw_to_train.items():
            lookup[raw_id & SEMANTIC_MASK] = train_id

        train = lookup[semantic]
        unknown = train < 0
        unknown_count = int(unknown.sum())
        if unknown_count:
            unknown_ids = np.unique(semantic[unknown]).tolist()
            logger.warning(
                f"{unknown_count} labels with unknown raw ids {unknown_ids[:10]} mapped to ignore id"
            )
            train[unknown] = class_map.ignore_id
        return train.astype(np.int32), unknown_count

    def read_labels(self, path: PathLike, class_map: ClassMap,
                    cloud: Optional[PointCloud] = None) -> np.ndarray:
        """Read a label file as train ids, aligned to ``cloud`` when given."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"label file not found: {path}")

        size = path.stat().st_size
        if size % LABEL_DTYPE.itemsize:
            raise FormatError(
                f"{path}: length {size} is not a multiple of 4 bytes; "
                f"trailing partial record starts at byte offset {size - size % 4}",
                module=MODULE,
            )

        raw = np.fromfile(path, dtype=LABEL_DTYPE)
        train, _ = self.decode_labels(raw, class_map)

        if cloud is not None:
            if len(train) != cloud.raw_count:
                raise ConsistencyError(
                    f"{path} holds {len(train)} labels but the companion cloud has "
                    f"{cloud.raw_count} points",
                    module=MODULE,
                )
            train = train[cloud.source_index]
        return train

    def encode_labels(self, labels: np.ndarray, class_map: ClassMap) -> np.ndarray:
        """Map train ids back to raw uint32 ids."""
        labels = np.asarray(labels, dtype=np.int64)
        inverse = class_map.inverse
        lookup = np.array([inverse[c] for c in range(class_map.num_classes)], dtype=np.uint32)
        bad = (labels < 0) | (labels >= class_map.num_classes)
        if np.any(bad):
            bad_id = int(labels[bad][0])
            raise MappingError(f"train id {bad_id} has no raw id in the class map", module=MODULE)
        return lookup[labels] if len(labels) else np.zeros(0, dtype=np.uint32)

    def write_labels(self, labels: np.ndarray, class_map: ClassMap, path: PathLike) -> None:
        """Write train ids as raw uint32 label records."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.encode_labels(labels, class_map).astype(LABEL_DTYPE).tofile(path)
        logger.debug(f"Wrote {len(labels)} labels to {path}")

    def scatter_to_source(self, labels: np.ndarray, cloud: PointCloud, fill: int) -> np.ndarray:
        """Expand per-retained-point labels to file length; dropped points receive ``fill``."""
        full = np.full(cloud.raw_count, fill, dtype=np.int32)
        full[cloud.source_index] = labels
        return full

    def read_labeled_cloud(self, cloud_path: PathLike, label_path: Optional[PathLike],
                           class_map: ClassMap) -> PointCloud:
        cloud = self.read_point_cloud(cloud_path)
        if label_path is None:
            return cloud
        return cloud.with_labels(self.read_labels(label_path, class_map, cloud))

    def read_labeled_directory(self, directory: PathLike, class_map: ClassMap) -> List[PointCloud]:
        """Every ``*.bin`` with a sibling ``*.label`` in a directory, sorted by name."""
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"directory not found: {directory}")

        clouds = []
        for cloud_path in sorted(directory.glob("*.bin")):
            label_path = cloud_path.with_suffix(".label")
            if not label_path.exists():
                logger.warning(f"Skipping {cloud_path.name}: no label file")
                continue
            clouds.append(self.read_labeled_cloud(cloud_path, label_path, class_map))
        logger.info(f"Loaded {len(clouds)} labeled frames from {directory}")
        return clouds

    # ------------------------------------------------------------------
    # Configuration files
    # ------------------------------------------------------------------

    def _read_toml(self, path: PathLike) -> dict:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"configuration file not found: {path}")
        try:
            with open(path, "rb") as handle:
                return tomllib.load(handle)
        except tomllib.TOMLDecodeError as e:
            raise FormatError(f"{path}: {e}", module=MODULE) from e

    def load_sensor_spec(self, path: PathLike) -> SensorSpec:
        """Read ``theta_max_deg``, ``theta_min_deg``, ``beams``, ``range_min_m``, ``range_max_m``."""
        data = self._read_toml(path)
        try:
            return SensorSpec.from_degrees(
                name=data.get("name", Path(path).stem),
                theta_max_deg=data["theta_max_deg"],
                theta_min_deg=data["theta_min_deg"],
                beams=data["beams"],
                range_min_m=data["range_min_m"],
                range_max_m=data["range_max_m"],
            )
        except KeyError as e:
            raise ConfigurationError(f"{path}: missing key {e}", module=MODULE) from e
        except ValidationError as e:
            raise ConfigurationError(f"{path}: {e}", module=MODULE) from e

    def load_class_map(self, path: PathLike) -> ClassMap:
        """Read ``[[classes]]`` tables (``name``, ``raw_ids``, ``frequency``, optional ``weight``).

        Train ids follow table order. Frequencies are normalized over non-ignored classes.
        """
        data = self._read_toml(path)
        classes = data.get("classes")
        if not classes:
            raise ConfigurationError(f"{path}: no [[classes]] tables", module=MODULE)

        names = [entry["name"] for entry in classes]
        ignore = data.get("ignore", names[0])
        if ignore not in names:
            raise ConfigurationError(f"{path}: ignore class '{ignore}' is not defined", module=MODULE)
        ignore_id = names.index(ignore)

        raw_to_train = {}
        for train_id, entry in enumerate(classes):
            for raw_id in entry.get("raw_ids", []):
                if raw_id in raw_to_train:
                    raise ConfigurationError(f"{path}: raw id {raw_id} listed twice", module=MODULE)
                raw_to_train[int(raw_id)] = train_id

        frequencies = [float(entry.get("frequency", 0.0)) for entry in classes]
        total = sum(f for c, f in enumerate(frequencies) if c != ignore_id)
        if total <= 0:
            raise ConfigurationError(f"{path}: class frequencies sum to zero", module=MODULE)
        frequencies = [0.0 if c == ignore_id else f / total for c, f in enumerate(frequencies)]

        overrides = {c: float(entry["weight"]) for c, entry in enumerate(classes) if "weight" in entry}
        try:
            return ClassMap(
                raw_to_train=raw_to_train,
                class_names=names,
                ignore_id=ignore_id,
                frequencies=frequencies,
                weight_overrides=overrides,
            )
        except ValidationError as e:
            raise ConfigurationError(f"{path}: {e}", module=MODULE) from e

    # ------------------------------------------------------------------
    # Raster codecs
    # ------------------------------------------------------------------

    def write_range_image(self, image: RangeImage, path: PathLike) -> None:
        """Header (magic, H, W, channels) + float32 planes + uint8 occupancy.

        A sixth plane carries the label plane (as float32, -1 where empty) when present.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        planes = [image.channels.astype(POINT_DTYPE)]
        if image.label_plane is not None:
            planes.append(image.label_plane.astype(POINT_DTYPE)[np.newaxis])
        stacked = np.concatenate(planes, axis=0)
        header = np.array([image.height, image.width, stacked.shape[0]], dtype=HEADER_DTYPE)
        with open(path, "wb") as handle:
            handle.write(RANGE_IMAGE_MAGIC)
            handle.write(header.tobytes())
            handle.write(stacked.tobytes())
            handle.write(image.occupancy.astype(np.uint8).tobytes())

    def read_range_image(self, path: PathLike) -> RangeImage:
        path = Path(path)
        blob = self._read_blob(path, RANGE_IMAGE_MAGIC, header_bytes=16)
        height, width, channels = np.frombuffer(blob, dtype=HEADER_DTYPE, count=3, offset=4)
        height, width, channels = int(height), int(width), int(channels)
        if channels not in (NUM_CHANNELS, NUM_CHANNELS + 1):
            raise FormatError(f"{path}: unsupported channel count {channels}", module=MODULE)

        plane_bytes = channels * height * width * POINT_DTYPE.itemsize
        expected = 16 + plane_bytes + height * width
        if len(blob) != expected:
            raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}", module=MODULE)

        planes = np.frombuffer(blob, dtype=POINT_DTYPE, count=channels * height * width, offset=16)
        planes = planes.reshape(channels, height, width)
        occupancy = np.frombuffer(blob, dtype=np.uint8, offset=16 + plane_bytes).reshape(height, width)
        label_plane = None
        if channels == NUM_CHANNELS + 1:
            label_plane = planes[NUM_CHANNELS].astype(np.int32)
            label_plane[occupancy == 0] = EMPTY_LABEL
        channel_planes = planes[:NUM_CHANNELS].copy()
        channel_planes[CH_RANGE][occupancy == 0] = RANGE_SENTINEL
        return RangeImage(
            channels=channel_planes,
            occupancy=occupancy.astype(bool),
            label_plane=label_plane,
            point_index=None,
        )

    def write_score_volume(self, volume: ScoreVolume, path: PathLike) -> None:
        """Header (magic, N, C, H, W) + float32 scores + uint8 occupancy masks."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = np.array(volume.scores.shape, dtype=HEADER_DTYPE)
        with open(path, "wb") as handle:
            handle.write(SCORE_VOLUME_MAGIC)
            handle.write(header.tobytes())
            handle.write(volume.scores.astype(POINT_DTYPE).tobytes())
            handle.write(volume.occupancy.astype(np.uint8).tobytes())

    def read_score_volume(self, path: PathLike) -> ScoreVolume:
        path = Path(path)
        blob = self._read_blob(path, SCORE_VOLUME_MAGIC, header_bytes=20)
        n, c, h, w = (int(v) for v in np.frombuffer(blob, dtype=HEADER_DTYPE, count=4, offset=4))
        score_count = n * c * h * w
        expected = 20 + score_count * POINT_DTYPE.itemsize + n * h * w
        if len(blob) != expected:
            raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}", module=MODULE)

        scores = np.frombuffer(blob, dtype=POINT_DTYPE, count=score_count, offset=20)
        occupancy = np.frombuffer(blob, dtype=np.uint8, offset=20 + score_count * POINT_DTYPE.itemsize)
        return ScoreVolume(
            scores=scores.reshape(n, c, h, w),
            occupancy=occupancy.reshape(n, h, w).astype(bool),
        )

    def _read_blob(self, path: Path, magic: bytes, header_bytes: int) -> bytes:
        if not path.exists():
            raise FileNotFoundError(f"file not found: {path}")
        blob = path.read_bytes()
        if blob[:4] != magic:
            raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}", module=MODULE)
        if len(blob) < header_bytes:
            raise FormatError(f"{path}: truncated header ({len(blob)} bytes)", module=MODULE)
        return blob


# Global instance
pcio_service = PointCloudIO()
