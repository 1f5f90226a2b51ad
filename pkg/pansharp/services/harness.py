from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from ..logging import bind_correlation_id, configure_logging
from ..schemas import (
    BROVEY_FAMILY,
    REPORT_COLUMNS,
    ExperimentSpec,
    Method,
    MetricReport,
    ProtocolReport,
    SceneConfig,
)
from ..utils.json import canonical_json, write_json
from ..utils.parallel import ordered_map
from .fusion import FusionError, FusionResult, run_method, select_a
from .metrics import MetricError, full_report
from .nsct import NsctError
from .raster import (
    BandImage,
    MultiBandImage,
    RasterError,
    degrade,
    degrade_multiband,
    expand_multiband,
    histogram,
    load_inputs,
    save_multiband,
)

logger = configure_logging()

RECOVERABLE_ERRORS = (FusionError, MetricError, NsctError, RasterError, ArithmeticError)


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticScene:
    pan: BandImage
    ms: MultiBandImage
    reference: MultiBandImage
    config: SceneConfig

    @property
    def ratio(self) -> int:
        return self.config.ratio


@dataclass(frozen=True)
class ProtocolInputs:
    """Images the fusion methods see, plus the reference they are scored against."""

    mode: str
    ratio: int
    pan: BandImage
    ms_original: MultiBandImage
    ms_expanded: MultiBandImage
    reference: MultiBandImage


@dataclass(frozen=True)
class HistogramPair:
    band_index: int
    bin_edges: np.ndarray
    fused_counts: np.ndarray
    reference_counts: np.ndarray
    l1_distance: float


@dataclass(frozen=True)
class QnrCurve:
    method: Method
    points: list[tuple[float, float]]
    selected_a: float


@dataclass(frozen=True)
class MethodOutcome:
    report: Optional[MetricReport]
    result: Optional[FusionResult]
    histogram: Optional[HistogramPair]
    error: Optional[str]


def _unit_range(field: np.ndarray) -> np.ndarray:
    lo, hi = float(field.min()), float(field.max())
    if hi == lo:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def _structure_field(rng: np.random.Generator, config: SceneConfig) -> np.ndarray:
    """Smooth random relief with hard-edged rectangles and soft blobs on top."""
    size = config.size
    field = _unit_range(ndimage.gaussian_filter(rng.standard_normal((size, size)), config.size * config.smooth_sigma_fraction))
    for _ in range(config.rectangles):
        top, left = rng.integers(0, size, 2)
        height, width = rng.integers(size // 16 + 1, size // 4 + 2, 2)
        field[top:top + height, left:left + width] += rng.uniform(-0.5, 0.5)
    rows, cols = np.mgrid[0:size, 0:size]
    for _ in range(config.blobs):
        cy, cx = rng.uniform(0, size, 2)
        radius = rng.uniform(size / 32, size / 8)
        field += rng.uniform(-0.4, 0.4) * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * radius**2))
    return _unit_range(field)


def make_scene(
    seed: int = 0,
    size: Optional[int] = None,
    bands: Optional[int] = None,
    ratio: Optional[int] = None,
    config: Optional[SceneConfig] = None,
) -> SyntheticScene:
    """Seeded synthetic scene: reference MS at full resolution, PAN, and degraded MS.

    Every band is an affine image of one shared structure field plus a
    band-specific smooth texture, so bands correlate with each other and
    with PAN, which is a positive band mix plus a small high-frequency term.
    """
    base = config or SceneConfig()
    overrides = {"seed": seed}
    if size is not None:
        overrides["size"] = size
    if bands is not None:
        overrides["bands"] = bands
    if ratio is not None:
        overrides["ratio"] = ratio
    try:
        config = SceneConfig(**{**base.model_dump(), **overrides})
    except ValueError as exc:
        raise ProtocolError(f"invalid scene geometry: {exc}") from exc

    rng = np.random.default_rng(config.seed)
    structure = _structure_field(rng, config)
    planes = []
    for _ in range(config.bands):
        gain = rng.uniform(*config.gain_range)
        offset = rng.uniform(*config.offset_range)
        texture = _unit_range(ndimage.gaussian_filter(rng.standard_normal(structure.shape), 2.0)) - 0.5
        planes.append(offset + config.radiance_scale * (gain * structure + config.band_texture * texture))
    reference_stack = np.maximum(np.stack(planes), 0.0)

    mix = rng.dirichlet(np.ones(config.bands))
    noise = rng.standard_normal(structure.shape)
    residual = noise - ndimage.gaussian_filter(noise, 1.0)
    pan = np.maximum(np.tensordot(mix, reference_stack, axes=1) + config.pan_residual * residual, 0.0)

    reference = MultiBandImage.from_array(reference_stack)
    scene = SyntheticScene(
        pan=BandImage(pan),
        ms=degrade_multiband(reference, config.ratio),
        reference=reference,
        config=config,
    )
    logger.info_structured("scene_generated", seed=config.seed, size=config.size, bands=config.bands, ratio=config.ratio)
    return scene


def run_id(spec: ExperimentSpec) -> str:
    digest = hashlib.sha256(canonical_json(spec.model_dump(mode="json")).encode("utf-8"))
    return digest.hexdigest()[:12]


def prepare_inputs(spec: ExperimentSpec) -> ProtocolInputs:
    """Synthetic mode fuses the generated pair; real-data mode degrades PAN and MS first."""
    ratio = spec.ratio
    if spec.scene is not None:
        scene = make_scene(spec.scene.seed, config=spec.scene)
        pan, ms_original, reference, mode = scene.pan, scene.ms, scene.reference, "synthetic"
    else:
        inputs = load_inputs(spec.manifest)
        if inputs.pan is None:
            raise ProtocolError(f"manifest {spec.manifest} has no PAN band")
        if inputs.ratio != ratio:
            raise ProtocolError(f"manifest ratio {inputs.ratio} differs from protocol ratio {ratio}")
        if inputs.ms.height % ratio or inputs.ms.width % ratio:
            raise ProtocolError(f"MS size {inputs.ms.width}x{inputs.ms.height} is not divisible by ratio {ratio}")
        pan = degrade(inputs.pan, ratio)
        ms_original = degrade_multiband(inputs.ms, ratio)
        reference, mode = inputs.ms, "reduced-resolution"
    ms_expanded = expand_multiband(ms_original, ratio, spec.expand_kernel)
    return ProtocolInputs(mode, ratio, pan, ms_original, ms_expanded, reference)


def histogram_report(fused: MultiBandImage, reference: MultiBandImage, band_index: int, bins: int) -> HistogramPair:
    """Histograms of one band over the shared [min, max] of both images, with their L1 distance."""
    if not (0 <= band_index < fused.count and band_index < reference.count):
        raise ProtocolError(f"band index {band_index} is out of range")
    a, b = fused.bands[band_index], reference.bands[band_index]
    shared = (
        min(float(a.samples.min()), float(b.samples.min())),
        max(float(a.samples.max()), float(b.samples.max())),
    )
    fused_hist = histogram(a, bins, shared)
    reference_hist = histogram(b, bins, shared)
    l1 = float(
        np.abs(fused_hist.counts / a.samples.size - reference_hist.counts / b.samples.size).sum()
    )
    return HistogramPair(band_index, fused_hist.bin_edges, fused_hist.counts, reference_hist.counts, l1)


def _default_band(spec: ExperimentSpec, count: int) -> int:
    if spec.histogram_band is not None:
        return spec.histogram_band
    # the green band of a blue-green-red-NIR set
    return min(1, count - 1)


def _run_one(spec: ExperimentSpec, inputs: ProtocolInputs, method: Method, max_workers: Optional[int]) -> MethodOutcome:
    try:
        result = run_method(
            method,
            inputs.pan,
            inputs.ms_original,
            inputs.ms_expanded,
            spec.fusion,
            spec.qnr,
            reference=inputs.reference,
            max_workers=max_workers,
        )
        report = full_report(
            result.fused, inputs.reference, inputs.ms_original, inputs.pan, spec.qnr, method.value, spec.q4_block
        )
        pair = histogram_report(result.fused, inputs.reference, _default_band(spec, result.fused.count), spec.histogram_bins)
    except RECOVERABLE_ERRORS as exc:
        logger.error_structured("method_failed", method=method.value, error=type(exc).__name__, detail=str(exc))
        return MethodOutcome(None, None, None, f"{method.value}: {type(exc).__name__}: {exc}")

    report.selected_a = result.selected_a
    report.weights = list(result.config_used.weights) if result.config_used.weights else None
    report.histogram_l1 = pair.l1_distance
    report.notes = list(result.notes)
    return MethodOutcome(report, result, pair, None)


def write_report_csv(path: Path, reports: list[MetricReport]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for report in reports:
            writer.writerow(report.csv_row())


def write_curve_csv(path: Path, curves: list[tuple[str, list[tuple[float, float]]]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("method", "a", "qnr"))
        for method, points in curves:
            for a, value in points:
                writer.writerow((method, f"{a:.12g}", f"{value:.12f}"))


def write_histogram_csv(path: Path, pair: HistogramPair) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("bin_low", "bin_high", "fused", "reference"))
        edges = pair.bin_edges
        for k in range(len(pair.fused_counts)):
            writer.writerow((f"{edges[k]:.12g}", f"{edges[k + 1]:.12g}", int(pair.fused_counts[k]), int(pair.reference_counts[k])))


def run_protocol(spec: ExperimentSpec, max_workers: Optional[int] = None) -> tuple[ProtocolReport, Path]:
    """Fuse with every requested method, score each one and write the run directory."""
    identity = run_id(spec)
    with bind_correlation_id(identity):
        return _protocol(spec, identity, max_workers)


def _protocol(spec: ExperimentSpec, identity: str, max_workers: Optional[int]) -> tuple[ProtocolReport, Path]:
    inputs = prepare_inputs(spec)
    logger.info_structured(
        "protocol_started",
        run_id=identity,
        mode=inputs.mode,
        ratio=inputs.ratio,
        methods=[m.value for m in spec.methods],
    )

    outcomes = ordered_map(lambda m: _run_one(spec, inputs, m, max_workers), spec.methods, max_workers)

    run_dir = Path(spec.output_dir) / identity
    reports, errors, curves = [], [], []
    for method, outcome in zip(spec.methods, outcomes):
        if outcome.error is not None:
            errors.append(outcome.error)
            continue
        reports.append(outcome.report)
        save_multiband(outcome.result.fused, run_dir / "fused" / method.value, spec.depth)
        write_histogram_csv(run_dir / "histograms" / f"{method.value}_band_{outcome.histogram.band_index}.csv", outcome.histogram)
        if outcome.result.qnr_curve:
            curves.append((method.value, list(outcome.result.qnr_curve)))

    protocol = ProtocolReport(
        run_id=identity,
        mode=inputs.mode,
        ratio=inputs.ratio,
        config=spec.model_dump(mode="json"),
        reports=reports,
        errors=errors,
    )
    write_report_csv(run_dir / "report.csv", reports)
    write_curve_csv(run_dir / "qnr_curve.csv", curves)
    write_json(run_dir / "report.json", protocol.model_dump(mode="json"))
    logger.info_structured("protocol_completed", run_id=identity, methods=len(reports), errors=len(errors))
    if not reports:
        raise ProtocolError(f"every method failed: {'; '.join(errors)}")
    return protocol, run_dir


def qnr_curve(spec: ExperimentSpec, max_workers: Optional[int] = None) -> tuple[QnrCurve, Path]:
    """Sweep the injection exponent of one Brovey-family method and write the curve."""
    family = [m for m in spec.methods if m in BROVEY_FAMILY]
    if len(family) != 1:
        raise ProtocolError("qnr-curve needs exactly one of adaptive-brovey or improved-adaptive-brovey")
    identity = run_id(spec)
    with bind_correlation_id(identity):
        return _curve(spec, family[0], identity, max_workers)


def _curve(spec: ExperimentSpec, method: Method, identity: str, max_workers: Optional[int]) -> tuple[QnrCurve, Path]:
    inputs = prepare_inputs(spec)
    best, points = select_a(
        inputs.pan,
        inputs.ms_expanded,
        inputs.ms_original,
        spec.fusion.a_grid_step,
        method,
        spec.fusion,
        spec.qnr,
        max_workers,
    )
    run_dir = Path(spec.output_dir) / identity
    write_curve_csv(run_dir / "qnr_curve.csv", [(method.value, points)])
    write_json(
        run_dir / "qnr_curve.json",
        {"method": method.value, "selected_a": best, "points": points, "config": spec.model_dump(mode="json")},
    )
    logger.info_structured("qnr_curve_written", run_id=identity, method=method.value, points=len(points), selected_a=best)
    return QnrCurve(method, points, best), run_dir
