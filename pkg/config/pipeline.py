"""Experiment configuration: TOML sections mirroring the toolkit modules."""
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config.settings import settings
from core.exceptions import ConfigurationError, FormatError
from models.params import GdaParams, KnnParams, MockPredictorConfig, NnriParams

logger = logging.getLogger(__name__)

MODULE = "cli"
PostProcessor = Literal["nnri", "knn", "knn-multi", "nla"]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PipelineSection(Section):
    sensor: str = settings.default_sensor
    class_map: str = settings.default_class_map
    post: PostProcessor = "nnri"
    seed: int = 0


class RviewSection(Section):
    height: int = Field(default=64, ge=1)
    width: int = Field(default=512, ge=1)
    subclouds: int = Field(default=3, ge=1)


class WpdSection(Section):
    enabled: bool = True
    threshold: float = 0.1
    sample_frames: int = Field(default=6, ge=0)
    pool_dir: Optional[str] = None
    per_point: bool = False


class AugmentSection(Section):
    # Keep one random fused sub-cloud image per frame instead of all N
    select_one: bool = False
    gda: GdaParams = GdaParams()
    wpd: WpdSection = WpdSection()


class PostprocSection(Section):
    nnri: NnriParams = NnriParams()
    knn: KnnParams = KnnParams()


class SynthSection(Section):
    scenes: int = Field(default=1, ge=1)
    azimuth_steps: int = Field(default=512, ge=1)
    beams: Optional[int] = Field(default=None, ge=1)
    sensor_height: float = Field(default=1.73, gt=0.0)
    ground_extent: Optional[float] = Field(default=None, gt=0.0)
    vehicles: int = Field(default=8, ge=0)
    poles: int = Field(default=6, ge=0)
    signs: int = Field(default=3, ge=0)
    pedestrians: int = Field(default=5, ge=0)
    min_distance: float = Field(default=5.0, gt=0.0)
    max_distance: Optional[float] = Field(default=None, gt=0.0)


class PipelineConfig(Section):
    """Full pipeline configuration; flags override file values through ``with_overrides``."""

    pipeline: PipelineSection = PipelineSection()
    rview: RviewSection = RviewSection()
    augment: AugmentSection = AugmentSection()
    postproc: PostprocSection = PostprocSection()
    synth: SynthSection = SynthSection()
    mock: MockPredictorConfig = MockPredictorConfig()

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "PipelineConfig":
        """Read a TOML config; ``None`` falls back to FLARES_CONFIG, then to built-in defaults.

        Relative sensor, class map and pool paths resolve against the config file's directory.
        """
        path = path or settings.config
        if path is None:
            return cls()

        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"configuration file not found: {path}", module=MODULE)
        try:
            with open(path, "rb") as handle:
                data = tomllib.load(handle)
        except tomllib.TOMLDecodeError as e:
            raise FormatError(f"{path}: {e}", module=MODULE) from e

        base = path.resolve().parent
        pipeline = data.get("pipeline", {})
        for key in ("sensor", "class_map"):
            if key in pipeline:
                pipeline[key] = str(_resolve(pipeline[key], base))
        wpd = data.get("augment", {}).get("wpd", {})
        if wpd.get("pool_dir"):
            wpd["pool_dir"] = str(_resolve(wpd["pool_dir"], base))

        try:
            config = cls.model_validate(data)
        except ValidationError as e:
            raise ConfigurationError(f"{path}: {e}", module=MODULE) from e
        logger.info(f"Loaded pipeline configuration from {path}")
        return config

    def with_overrides(self, **overrides: Any) -> "PipelineConfig":
        """Apply flag values (``None`` means not given) and re-validate.

        ``kernel`` sets the window of the selected post-processor: NNRI's for "nnri",
        the KNN window shared by "knn", "knn-multi" and "nla" otherwise.
        """
        data = self.model_dump()
        targets: Dict[str, tuple] = {
            "height": ("rview", "height"),
            "width": ("rview", "width"),
            "subclouds": ("rview", "subclouds"),
            "post": ("pipeline", "post"),
            "seed": ("pipeline", "seed"),
            "sensor": ("pipeline", "sensor"),
            "class_map": ("pipeline", "class_map"),
            "alpha": ("postproc", "nnri", "alpha"),
            "cutoff_mode": ("postproc", "nnri", "cutoff_mode"),
            "noise_rate": ("mock", "noise_rate"),
        }
        # The window size belongs to whichever post-processor runs
        post = overrides.get("post") or data["pipeline"]["post"]
        targets["kernel"] = ("postproc", "nnri" if post == "nnri" else "knn", "k")
        for name, value in overrides.items():
            if value is None:
                continue
            if name not in targets:
                raise ConfigurationError(f"unknown override '{name}'", module=MODULE)
            section = data
            *parents, leaf = targets[name]
            for key in parents:
                section = section[key]
            section[leaf] = value
        try:
            return PipelineConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigurationError(str(e), module=MODULE) from e

    def check_files(self) -> None:
        """All referenced files must exist."""
        for label, value in (("sensor spec", self.pipeline.sensor),
                             ("class map", self.pipeline.class_map)):
            if not Path(value).is_file():
                raise ConfigurationError(f"{label} not found: {value}", module=MODULE)
        pool = self.augment.wpd.pool_dir
        if pool and not Path(pool).is_dir():
            raise ConfigurationError(f"paste pool directory not found: {pool}", module=MODULE)


def _resolve(value: str, base: Path) -> Path:
    candidate = Path(value)
    if candidate.is_absolute():
        return candidate
    return base / candidate
