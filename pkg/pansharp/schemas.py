from __future__ import annotations

from enum import Enum
from typing import Any, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import ALLOWED_DIRECTIONS, parse_directions, settings


class Method(str, Enum):
    brovey = "brovey"
    adaptive_brovey = "adaptive-brovey"
    improved_adaptive_brovey = "improved-adaptive-brovey"
    ihs = "ihs"
    pca = "pca"
    oracle = "oracle"


BROVEY_FAMILY = (Method.adaptive_brovey, Method.improved_adaptive_brovey)
TABLE_METHODS = [
    Method.brovey,
    Method.adaptive_brovey,
    Method.improved_adaptive_brovey,
    Method.ihs,
    Method.pca,
]


class BoundaryMode(str, Enum):
    symmetric = "symmetric"
    periodic = "periodic"
    zero = "zero"


class ExpandKernel(str, Enum):
    bilinear = "bilinear"
    bicubic = "bicubic"


class ManifestBand(BaseModel):
    name: str
    path: str


class ManifestPan(BaseModel):
    path: str


class Manifest(BaseModel):
    """On-disk description of a band set: PGM files relative to the manifest."""

    ratio: int = Field(default_factory=lambda: settings.DEFAULT_RATIO, ge=1)
    bands: List[ManifestBand] = Field(min_length=1)
    pan: Optional[ManifestPan] = None
    width: Optional[int] = Field(default=None, ge=1)
    height: Optional[int] = Field(default=None, ge=1)


def _default_directions() -> list[int]:
    return parse_directions(settings.NSCT_DIRECTIONS, settings.NSCT_LEVELS)


class NsctConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    levels: int = Field(default_factory=lambda: settings.NSCT_LEVELS, ge=1)
    directions_per_level: List[int]
    boundary: BoundaryMode = Field(default_factory=lambda: BoundaryMode(settings.NSCT_BOUNDARY))

    @model_validator(mode="before")
    @classmethod
    def _fill_directions(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("directions_per_level") is None:
            levels = int(data.get("levels") or settings.NSCT_LEVELS)
            directions = _default_directions()
            if len(directions) != levels:
                directions = [directions[0]] * levels
            data = {**data, "directions_per_level": directions}
        return data

    @field_validator("directions_per_level")
    @classmethod
    def _check_directions(cls, value: list[int]) -> list[int]:
        bad = [d for d in value if d not in ALLOWED_DIRECTIONS]
        if bad:
            raise ValueError(f"directions must be in {ALLOWED_DIRECTIONS}, got {bad}")
        return value

    @model_validator(mode="after")
    def _check_levels(self) -> NsctConfig:
        if len(self.directions_per_level) != self.levels:
            raise ValueError(
                f"directions_per_level has {len(self.directions_per_level)} entries for {self.levels} levels"
            )
        return self


class FusionConfig(BaseModel):
    """Parameters of one fusion run. ``a=None`` asks for the QNR grid search,
    ``weights=None`` asks for the non-negative least-squares fit."""

    a: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    weights: Optional[List[float]] = None
    a_grid_step: float = Field(default_factory=lambda: settings.GRID_STEP, gt=0.0, le=1.0)
    epsilon: float = Field(default_factory=lambda: settings.DENOMINATOR_EPSILON, gt=0.0)
    nsct: NsctConfig = Field(default_factory=NsctConfig)

    @field_validator("weights")
    @classmethod
    def _check_weights(cls, value: list[float] | None) -> list[float] | None:
        if value is None:
            return value
        if not value:
            raise ValueError("weights must not be empty")
        if any(b < 0 for b in value):
            raise ValueError("weights must be non-negative")
        if sum(value) <= 0:
            raise ValueError("weights must have a positive sum")
        return value


class QnrConfig(BaseModel):
    alpha: float = Field(default_factory=lambda: settings.QNR_ALPHA, gt=0.0)
    beta: float = Field(default_factory=lambda: settings.QNR_BETA, gt=0.0)
    p: float = Field(default_factory=lambda: settings.QNR_P, gt=0.0)
    q: float = Field(default_factory=lambda: settings.QNR_Q, gt=0.0)
    window: int = Field(default_factory=lambda: settings.QNR_WINDOW, ge=2)
    ratio: int = Field(default_factory=lambda: settings.DEFAULT_RATIO, ge=1)


class SceneConfig(BaseModel):
    """Frozen parameters of the synthetic scene generator."""

    model_config = ConfigDict(frozen=True)

    version: int = 1
    seed: int = 0
    size: int = Field(default=256, ge=2)
    bands: int = Field(default=4, ge=1)
    ratio: int = Field(default_factory=lambda: settings.DEFAULT_RATIO, ge=1)
    smooth_sigma_fraction: float = 1.0 / 16.0
    rectangles: int = 6
    blobs: int = 8
    radiance_scale: float = 200.0
    offset_range: tuple[float, float] = (100.0, 300.0)
    gain_range: tuple[float, float] = (0.6, 1.4)
    band_texture: float = 0.15
    pan_residual: float = 3.0

    @model_validator(mode="after")
    def _check_geometry(self) -> SceneConfig:
        if self.size % self.ratio:
            raise ValueError(f"size {self.size} is not divisible by ratio {self.ratio}")
        return self


class ExperimentSpec(BaseModel):
    manifest: Optional[str] = None
    scene: Optional[SceneConfig] = None
    ratio: int = Field(default_factory=lambda: settings.DEFAULT_RATIO, ge=1)
    methods: List[Method] = Field(default_factory=lambda: list(TABLE_METHODS))
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    qnr: Optional[QnrConfig] = None
    expand_kernel: ExpandKernel = Field(default_factory=lambda: ExpandKernel(settings.EXPAND_KERNEL))
    q4_block: int = Field(default_factory=lambda: settings.Q4_BLOCK, ge=2)
    histogram_bins: int = Field(default_factory=lambda: settings.HISTOGRAM_BINS, ge=1)
    histogram_band: Optional[int] = None
    output_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR)
    depth: int = 16

    @field_validator("methods")
    @classmethod
    def _check_methods(cls, value: list[Method]) -> list[Method]:
        if not value:
            raise ValueError("methods must not be empty")
        return value

    @field_validator("depth")
    @classmethod
    def _check_depth(cls, value: int) -> int:
        if value not in (8, 16):
            raise ValueError("depth must be 8 or 16")
        return value

    @model_validator(mode="after")
    def _check_input(self) -> ExperimentSpec:
        if (self.manifest is None) == (self.scene is None):
            raise ValueError("exactly one of manifest or scene must be given")
        if self.scene is not None and self.scene.ratio != self.ratio:
            if self.scene.size % self.ratio:
                raise ValueError(f"scene size {self.scene.size} is not divisible by ratio {self.ratio}")
            self.scene = self.scene.model_copy(update={"ratio": self.ratio})
        if self.ratio < 2:
            raise ValueError("protocol runs need ratio >= 2")
        if self.qnr is None:
            self.qnr = QnrConfig(ratio=self.ratio)
        elif self.qnr.ratio != self.ratio:
            self.qnr = self.qnr.model_copy(update={"ratio": self.ratio})
        return self


REPORT_COLUMNS = ("method", "CC", "ERGAS", "UIQI", "Q4", "QNR", "D_lambda", "D_s", "selected_a")
Q4_NOT_APPLICABLE = "not applicable"


class MetricReport(BaseModel):
    method: str
    cc: Optional[float] = None
    cc_per_band: Optional[List[float]] = None
    ergas: Optional[float] = None
    uiqi: Optional[float] = None
    uiqi_per_band: Optional[List[float]] = None
    uiqi_windowed: Optional[float] = None
    q4: Optional[float] = None
    q4_note: Optional[str] = None
    qnr: float
    d_lambda: float
    d_s: float
    selected_a: Optional[float] = None
    weights: Optional[List[float]] = None
    histogram_l1: Optional[float] = None
    notes: List[str] = Field(default_factory=list)

    def csv_row(self) -> list[str]:
        values = [self.cc, self.ergas, self.uiqi, self.q4, self.qnr, self.d_lambda, self.d_s, self.selected_a]
        row = [self.method]
        for v in values:
            row.append("" if v is None else f"{v:.6f}")
        if self.q4 is None and self.q4_note:
            row[4] = self.q4_note
        return row


class ProtocolReport(BaseModel):
    run_id: str
    mode: str
    ratio: int
    config: dict
    reports: List[MetricReport]
    errors: List[str] = Field(default_factory=list)
