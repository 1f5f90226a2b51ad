from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from ..config import settings
from ..logging import configure_logging
from ..schemas import BROVEY_FAMILY, FusionConfig, Method, QnrConfig
from ..telemetry import FUSION_DURATION, FUSIONS_TOTAL, GRID_EVALUATIONS
from ..utils.parallel import ordered_map
from .metrics import qnr
from .nsct import NsctDecomposition, nsct_decompose, nsct_reconstruct, replace_details
from .raster import BandImage, MultiBandImage, require_same_shape

logger = configure_logging()


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class WeightFit:
    """Non-negative least-squares fit of PAN from the expanded MS bands."""

    weights: tuple[float, ...]
    residual: float
    kkt_residual: float
    uniform_residual: float


@dataclass(frozen=True)
class FusionResult:
    fused: MultiBandImage
    method: Method
    config_used: FusionConfig
    selected_a: Optional[float] = None
    qnr_curve: tuple[tuple[float, float], ...] = ()
    weight_fit: Optional[WeightFit] = None
    decompositions: tuple[NsctDecomposition, ...] = ()
    notes: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if any(float(b.samples.min()) < 0 for b in self.fused.bands):
            raise FusionError(f"{self.method.value} produced negative samples")


def _check_inputs(pan: BandImage, ms_expanded: MultiBandImage) -> None:
    require_same_shape(pan.shape, ms_expanded.shape, what="PAN and expanded MS")


def _check_non_negative(pan: BandImage, ms_expanded: MultiBandImage) -> None:
    if float(pan.samples.min()) < 0:
        raise FusionError("PAN contains negative samples")
    if any(float(b.samples.min()) < 0 for b in ms_expanded.bands):
        raise FusionError("MS bands contain negative samples")


def _clipped(stack: np.ndarray, names: Optional[Sequence[str]]) -> MultiBandImage:
    return MultiBandImage.from_array(np.maximum(stack, 0.0), names)


def ratio_modulate(
    pan: BandImage,
    pan_low: np.ndarray,
    ms_expanded: MultiBandImage,
    epsilon: float,
    exponent: float = 1.0,
) -> np.ndarray:
    """Scale every MS band by ``(pan / pan_low) ** exponent``.

    Pixels where ``pan_low <= epsilon`` keep unit gain, so an all-zero MS
    pixel stays zero.
    """
    guarded = pan_low <= epsilon
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(guarded, 1.0, np.power(pan.samples / np.where(guarded, 1.0, pan_low), exponent))
    if guarded.any():
        logger.debug_structured("denominator_guarded", pixels=int(guarded.sum()), epsilon=epsilon)
    return ms_expanded.stack() * gain


def brovey(pan: BandImage, ms_expanded: MultiBandImage, epsilon: Optional[float] = None) -> FusionResult:
    _check_inputs(pan, ms_expanded)
    _check_non_negative(pan, ms_expanded)
    eps = settings.DENOMINATOR_EPSILON if epsilon is None else epsilon
    stack = ratio_modulate(pan, ms_expanded.stack().mean(axis=0), ms_expanded, eps)
    return FusionResult(
        fused=_clipped(stack, ms_expanded.band_names),
        method=Method.brovey,
        config_used=FusionConfig(epsilon=eps),
    )


def fit_weights(pan: BandImage, ms_expanded: MultiBandImage) -> WeightFit:
    """Fit ``pan ~ sum_i b_i * ms_i`` with ``b >= 0`` (Lawson-Hanson active set)."""
    _check_inputs(pan, ms_expanded)
    design = ms_expanded.stack().reshape(ms_expanded.count, -1).T
    target = pan.samples.ravel()
    if not np.any(design):
        raise FusionError("cannot fit weights: every MS band is zero")

    weights, residual = nnls(design, target)
    gradient = design.T @ (design @ weights - target)
    # active weights need zero gradient, clamped ones a non-negative one
    violation = np.where(weights > 0, np.abs(gradient), np.maximum(-gradient, 0.0))
    scale = max(float(np.linalg.norm(design) * np.linalg.norm(target)), np.finfo(float).tiny)
    kkt = float(violation.max() / scale)
    uniform = np.full(ms_expanded.count, 1.0 / ms_expanded.count)
    uniform_residual = float(np.linalg.norm(design @ uniform - target))

    if kkt > settings.KKT_TOLERANCE:
        logger.warning_structured("weight_fit_kkt_violation", kkt_residual=kkt, tolerance=settings.KKT_TOLERANCE)
    logger.info_structured(
        "weights_fitted",
        weights=[float(w) for w in weights],
        residual=float(residual),
        uniform_residual=uniform_residual,
    )
    return WeightFit(
        weights=tuple(float(w) for w in weights),
        residual=float(residual),
        kkt_residual=kkt,
        uniform_residual=uniform_residual,
    )


def _resolve_weights(pan: BandImage, ms_expanded: MultiBandImage, config: FusionConfig) -> tuple[np.ndarray, Optional[WeightFit]]:
    if config.weights is None:
        fit = fit_weights(pan, ms_expanded)
        weights = np.asarray(fit.weights)
        if not weights.sum() > 0:
            raise FusionError("fitted weights are all zero; PAN is not explained by the MS bands")
        return weights, fit
    if len(config.weights) != ms_expanded.count:
        raise FusionError(f"{len(config.weights)} weights given for {ms_expanded.count} bands")
    return np.asarray(config.weights, dtype=np.float64), None


def _require_a(config: FusionConfig) -> float:
    if config.a is None:
        raise FusionError("exponent a is not set; run select_a first or pin it in the config")
    return config.a


def _adaptive_stack(pan: BandImage, ms_expanded: MultiBandImage, weights: np.ndarray, a: float, epsilon: float) -> np.ndarray:
    pan_low = np.tensordot(weights, ms_expanded.stack(), axes=1)
    return ratio_modulate(pan, pan_low, ms_expanded, epsilon, exponent=a)


def adaptive_brovey(pan: BandImage, ms_expanded: MultiBandImage, config: FusionConfig) -> FusionResult:
    _check_inputs(pan, ms_expanded)
    _check_non_negative(pan, ms_expanded)
    a = _require_a(config)
    weights, fit = _resolve_weights(pan, ms_expanded, config)
    stack = _adaptive_stack(pan, ms_expanded, weights, a, config.epsilon)
    return FusionResult(
        fused=_clipped(stack, ms_expanded.band_names),
        method=Method.adaptive_brovey,
        config_used=config.model_copy(update={"weights": weights.tolist()}),
        weight_fit=fit,
    )


def decompose_bands(
    image: MultiBandImage, config: FusionConfig, max_workers: Optional[int] = None
) -> tuple[NsctDecomposition, ...]:
    return tuple(ordered_map(lambda band: nsct_decompose(band, config.nsct), image.bands, max_workers))


def _inject_details(
    adaptive: np.ndarray,
    ms_decompositions: Sequence[NsctDecomposition],
    config: FusionConfig,
    max_workers: Optional[int],
) -> tuple[np.ndarray, tuple[NsctDecomposition, ...]]:
    def one_band(index: int) -> tuple[np.ndarray, NsctDecomposition]:
        d_ab = nsct_decompose(BandImage(adaptive[index]), config.nsct)
        swapped = replace_details(target=ms_decompositions[index], source=d_ab)
        return nsct_reconstruct(swapped).samples, swapped

    outputs = ordered_map(one_band, range(len(ms_decompositions)), max_workers)
    stack = np.stack([samples for samples, _ in outputs])
    return stack, tuple(decomp for _, decomp in outputs)


def improved_adaptive_brovey(
    pan: BandImage,
    ms_expanded: MultiBandImage,
    config: FusionConfig,
    ms_decompositions: Optional[Sequence[NsctDecomposition]] = None,
    max_workers: Optional[int] = None,
) -> FusionResult:
    """Adaptive Brovey details on top of the expanded MS lowpass, band by band.

    ``ms_decompositions`` may carry precomputed NSCT decompositions of the
    expanded MS bands; they must use ``config.nsct``.
    """
    _check_inputs(pan, ms_expanded)
    _check_non_negative(pan, ms_expanded)
    a = _require_a(config)
    weights, fit = _resolve_weights(pan, ms_expanded, config)
    if ms_decompositions is None:
        ms_decompositions = decompose_bands(ms_expanded, config, max_workers)
    adaptive = _adaptive_stack(pan, ms_expanded, weights, a, config.epsilon)
    stack, swapped = _inject_details(adaptive, ms_decompositions, config, max_workers)
    return FusionResult(
        fused=_clipped(stack, ms_expanded.band_names),
        method=Method.improved_adaptive_brovey,
        config_used=config.model_copy(update={"weights": weights.tolist()}),
        weight_fit=fit,
        decompositions=swapped,
    )


def a_grid(step: float) -> list[float]:
    if not 0 < step <= 1:
        raise FusionError(f"grid step must lie in (0, 1], got {step}")
    return [round(k * step, 12) for k in range(int(math.floor(1.0 / step + 1e-9)) + 1)]


def select_a(
    pan: BandImage,
    ms_expanded: MultiBandImage,
    ms_original: MultiBandImage,
    step: float,
    method: Method,
    config: Optional[FusionConfig] = None,
    qnr_config: Optional[QnrConfig] = None,
    max_workers: Optional[int] = None,
) -> tuple[float, list[tuple[float, float]]]:
    """Grid-search the injection exponent that maximizes QNR; ties go to the smaller a."""
    method = Method(method)
    if method not in BROVEY_FAMILY:
        raise FusionError(f"select_a does not apply to {method.value}")
    _check_inputs(pan, ms_expanded)
    _check_non_negative(pan, ms_expanded)
    config = config or FusionConfig()
    qnr_config = qnr_config or QnrConfig()
    grid = a_grid(step)

    weights, _ = _resolve_weights(pan, ms_expanded, config)
    pinned = config.model_copy(update={"weights": weights.tolist()})
    decomps = None
    if method is Method.improved_adaptive_brovey:
        # MS decompositions do not depend on a
        decomps = decompose_bands(ms_expanded, pinned, max_workers)

    def fuse(a: float) -> FusionResult:
        candidate = pinned.model_copy(update={"a": a})
        if decomps is None:
            return adaptive_brovey(pan, ms_expanded, candidate)
        return improved_adaptive_brovey(pan, ms_expanded, candidate, decomps, max_workers=1)

    def evaluate(a: float) -> float:
        value, d_lambda, d_s = qnr(fuse(a).fused, ms_original, pan, qnr_config)
        GRID_EVALUATIONS.labels(method=method.value).inc()
        logger.debug_structured("grid_point_evaluated", method=method.value, a=a, qnr=value, d_lambda=d_lambda, d_s=d_s)
        return value

    scores = ordered_map(evaluate, grid, max_workers)
    curve = list(zip(grid, scores))
    best_a, best_q = curve[0]
    for a, value in curve[1:]:
        if value > best_q:
            best_a, best_q = a, value
    logger.info_structured("exponent_selected", method=method.value, a=best_a, qnr=best_q, points=len(curve))
    return best_a, curve


def _match_moments(source: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Affine map of ``source`` onto the mean and standard deviation of ``like``."""
    spread = float(source.std())
    if spread == 0.0:
        return np.full_like(source, float(like.mean()))
    return (source - source.mean()) * (float(like.std()) / spread) + float(like.mean())


def ihs_fuse(pan: BandImage, ms_expanded: MultiBandImage) -> FusionResult:
    _check_inputs(pan, ms_expanded)
    if ms_expanded.count < 3:
        raise FusionError(f"IHS needs at least 3 bands, got {ms_expanded.count}")
    stack = ms_expanded.stack()
    intensity = stack[:3].mean(axis=0)
    detail = _match_moments(pan.samples, intensity) - intensity
    notes = ()
    if ms_expanded.count > 3:
        notes = (f"intensity taken from bands 0-2 of {ms_expanded.count}; detail added to every band",)
    return FusionResult(
        fused=_clipped(stack + detail, ms_expanded.band_names),
        method=Method.ihs,
        config_used=FusionConfig(),
        notes=notes,
    )


@dataclass(frozen=True)
class PrincipalComponents:
    components: np.ndarray
    loadings: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def back_project(self, components: Optional[np.ndarray] = None) -> np.ndarray:
        comps = self.components if components is None else components
        n, height, width = comps.shape
        flat = self.loadings @ comps.reshape(n, -1) + self.means[:, None]
        return flat.reshape(n, height, width)


def principal_components(ms: MultiBandImage) -> PrincipalComponents:
    """Eigen-decomposition of the band covariance, largest component first.

    The first loading vector is signed so that its entries sum to a
    non-negative value.
    """
    if ms.count < 2:
        raise FusionError(f"PCA needs at least 2 bands, got {ms.count}")
    flat = ms.stack().reshape(ms.count, -1)
    if np.any(flat.max(axis=1) == flat.min(axis=1)):
        raise FusionError("PCA is undefined for a zero-variance band")
    means = flat.mean(axis=1)
    centred = flat - means[:, None]
    covariance = centred @ centred.T / centred.shape[1]
    variances, vectors = np.linalg.eigh(covariance)
    order = np.argsort(variances)[::-1]
    variances, vectors = variances[order], vectors[:, order]
    if vectors[:, 0].sum() < 0:
        vectors[:, 0] = -vectors[:, 0]
    components = (vectors.T @ centred).reshape(ms.count, ms.height, ms.width)
    return PrincipalComponents(components=components, loadings=vectors, means=means, variances=variances)


def pca_fuse(pan: BandImage, ms_expanded: MultiBandImage) -> FusionResult:
    _check_inputs(pan, ms_expanded)
    pcs = principal_components(ms_expanded)
    substituted = pcs.components.copy()
    substituted[0] = _match_moments(pan.samples, pcs.components[0])
    return FusionResult(
        fused=_clipped(pcs.back_project(substituted), ms_expanded.band_names),
        method=Method.pca,
        config_used=FusionConfig(),
    )


def run_method(
    method: Method,
    pan: BandImage,
    ms_original: MultiBandImage,
    ms_expanded: MultiBandImage,
    fusion_config: Optional[FusionConfig] = None,
    qnr_config: Optional[QnrConfig] = None,
    reference: Optional[MultiBandImage] = None,
    max_workers: Optional[int] = None,
) -> FusionResult:
    """Resolve weights and exponent where needed, then fuse with ``method``."""
    method = Method(method)
    config = fusion_config or FusionConfig()
    started = time.perf_counter()
    with FUSION_DURATION.labels(method=method.value).time():
        if method is Method.oracle:
            if reference is None:
                raise FusionError("the oracle method needs a reference image")
            result = FusionResult(fused=reference, method=method, config_used=config)
        elif method is Method.brovey:
            result = brovey(pan, ms_expanded, config.epsilon)
        elif method is Method.ihs:
            result = ihs_fuse(pan, ms_expanded)
        elif method is Method.pca:
            result = pca_fuse(pan, ms_expanded)
        else:
            weights, fit = _resolve_weights(pan, ms_expanded, config)
            pinned = config.model_copy(update={"weights": weights.tolist()})
            curve: list[tuple[float, float]] = []
            if pinned.a is None:
                a, curve = select_a(
                    pan, ms_expanded, ms_original, pinned.a_grid_step, method, pinned, qnr_config, max_workers
                )
                pinned = pinned.model_copy(update={"a": a})
            if method is Method.adaptive_brovey:
                result = adaptive_brovey(pan, ms_expanded, pinned)
            else:
                result = improved_adaptive_brovey(pan, ms_expanded, pinned, max_workers=max_workers)
            result = FusionResult(
                fused=result.fused,
                method=method,
                config_used=pinned,
                selected_a=pinned.a if curve else None,
                qnr_curve=tuple(curve),
                weight_fit=fit,
                decompositions=result.decompositions,
                notes=result.notes,
            )
    FUSIONS_TOTAL.labels(method=method.value).inc()
    logger.info_structured(
        "fusion_completed",
        method=method.value,
        bands=result.fused.count,
        selected_a=result.selected_a,
        duration_ms=round((time.perf_counter() - started) * 1000, 2),
    )
    return result
