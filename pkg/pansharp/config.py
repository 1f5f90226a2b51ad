from __future__ import annotations

import logging

from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

ALLOWED_DIRECTIONS = (1, 2, 4, 8, 16)
DEFAULT_DIRECTIONS = (8, 8)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    # Logging
    LOG_LEVEL: str = "INFO"

    # Geometry
    DEFAULT_RATIO: int = 4
    EXPAND_KERNEL: str = "bilinear"  # bilinear|bicubic

    # Fusion
    GRID_STEP: float = 0.02
    DENOMINATOR_EPSILON: float = 1e-9

    # NSCT
    NSCT_LEVELS: int = 2
    NSCT_DIRECTIONS: str = "8,8"
    NSCT_BOUNDARY: str = "symmetric"  # symmetric|periodic|zero

    # Quality metrics
    QNR_ALPHA: float = 1.0
    QNR_BETA: float = 1.0
    QNR_P: float = 1.0
    QNR_Q: float = 1.0
    QNR_WINDOW: int = 32
    Q4_BLOCK: int = 32
    UIQI_WINDOW: int = 8
    HISTOGRAM_BINS: int = 256

    # Execution
    MAX_WORKERS: int = 4
    OUTPUT_DIR: str = "./runs"
    METRICS_TEXTFILE: str | None = None

    # Numerical tolerances (64-bit arithmetic)
    RECONSTRUCTION_TOLERANCE: float = 1e-6
    LINEARITY_TOLERANCE: float = 1e-10
    KKT_TOLERANCE: float = 1e-8
    RMSE_IDENTITY_TOLERANCE: float = 1e-10


def parse_directions(value: str, levels: int) -> list[int]:
    """Validate a comma-separated direction list, falling back to the default."""
    try:
        directions = [int(d.strip()) for d in value.split(",") if d.strip()]
    except ValueError:
        logger.error(f"Cannot parse NSCT_DIRECTIONS: {value}, using default")
        directions = []
    valid = [d for d in directions if d in ALLOWED_DIRECTIONS]
    if len(valid) != len(directions):
        logger.warning(f"Invalid entries in NSCT_DIRECTIONS: {value}, using valid subset")
    if len(valid) != levels:
        fallback = [DEFAULT_DIRECTIONS[0]] * levels
        if valid:
            logger.warning(f"NSCT_DIRECTIONS has {len(valid)} entries for {levels} levels, using {fallback}")
        return fallback
    return valid


settings = Settings()
