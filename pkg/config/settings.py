"""Application settings and configuration."""
import os
from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict

CONFIG_DIR = Path(__file__).resolve().parent


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables (prefix ``FLARES_``)."""

    model_config = SettingsConfigDict(
        env_prefix="FLARES_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Pipeline configuration file; FLARES_CONFIG is the fallback for --config
    config: Optional[str] = None

    # Defaults used when a pipeline config does not name them
    default_sensor: str = str(CONFIG_DIR / "sensors" / "semantickitti.toml")
    default_class_map: str = str(CONFIG_DIR / "classes" / "synthetic.toml")

    # Worker pool size for frame-level parallelism
    jobs: int = os.cpu_count() or 1

    debug: bool = False

    # Logging
    log_level: str = "INFO"
    log_file: str = "logs/rangewrench.log"


settings = Settings()
