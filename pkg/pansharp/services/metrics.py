from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..config import settings
from ..logging import configure_logging
from ..schemas import Q4_NOT_APPLICABLE, MetricReport, QnrConfig
from .raster import BandImage, MultiBandImage, degrade, require_same_shape

logger = configure_logging()


class MetricError(ValueError):
    pass


class UndefinedMetricError(MetricError):
    pass


class MetricConsistencyError(ArithmeticError):
    pass


@dataclass(frozen=True)
class MomentSummary:
    mean_a: float
    mean_b: float
    std_a: float
    std_b: float
    covariance: float
    pixel_count: int


def moments(a: BandImage, b: BandImage) -> MomentSummary:
    require_same_shape(a.shape, b.shape, what="metric operands")
    x, y = a.samples, b.samples
    ma, mb = float(x.mean()), float(y.mean())
    da, db = x - ma, y - mb
    return MomentSummary(
        mean_a=ma,
        mean_b=mb,
        std_a=float(np.sqrt(np.mean(da * da))),
        std_b=float(np.sqrt(np.mean(db * db))),
        covariance=float(np.mean(da * db)),
        pixel_count=x.size,
    )


def _is_constant(samples: np.ndarray) -> bool:
    return bool(samples.max() == samples.min())


def correlation(a: BandImage, b: BandImage) -> float:
    require_same_shape(a.shape, b.shape, what="correlation operands")
    if _is_constant(a.samples) or _is_constant(b.samples):
        raise UndefinedMetricError("correlation is undefined for a constant band")
    da = a.samples - a.samples.mean()
    db = b.samples - b.samples.mean()
    value = np.sum(da * db) / np.sqrt(np.sum(da * da) * np.sum(db * db))
    return float(np.clip(value, -1.0, 1.0))


def ergas(fused: MultiBandImage, reference: MultiBandImage, h: float, l: float) -> float:
    """Relative dimensionless global error; ``h/l`` is the PAN-to-MS pixel size ratio."""
    if fused.count != reference.count:
        raise MetricError(f"band count mismatch: {fused.count} fused vs {reference.count} reference")
    require_same_shape(fused.shape, reference.shape, what="ERGAS operands")
    if h <= 0 or l <= 0:
        raise MetricError("pixel sizes must be positive")
    tolerance = settings.RMSE_IDENTITY_TOLERANCE
    total = 0.0
    for i, (f, r) in enumerate(zip(fused.bands, reference.bands)):
        mean_ref = float(r.samples.mean())
        if mean_ref == 0.0:
            raise UndefinedMetricError(f"reference band {i} has zero mean")
        diff = r.samples - f.samples
        rmse_sq = float(np.mean(diff * diff))
        bias = float(diff.mean())
        sd_sq = float(np.mean((diff - bias) ** 2))
        if abs(rmse_sq - (bias * bias + sd_sq)) > tolerance * max(rmse_sq, np.finfo(float).tiny):
            raise MetricConsistencyError(
                f"band {i}: RMSE^2={rmse_sq!r} disagrees with bias^2 + SD^2={bias * bias + sd_sq!r}"
            )
        total += rmse_sq / (mean_ref * mean_ref)
    return float(100.0 * (h / l) * np.sqrt(total / fused.count))


def _blocks(samples: np.ndarray, shape: tuple[int, int], stride: int) -> np.ndarray:
    return sliding_window_view(samples, shape, axis=(-2, -1))[..., ::stride, ::stride, :, :]


def _combine(structure_num, var_sum, mean_prod, mean_sq) -> np.ndarray:
    """Assemble the index from block moments; constant blocks follow the limit conventions."""
    with np.errstate(divide="ignore", invalid="ignore"):
        structure = np.where(var_sum == 0, 1.0, 2.0 * structure_num / var_sum)
        luminance = np.where(mean_sq == 0, 1.0, 2.0 * mean_prod / mean_sq)
    return structure * luminance


def _quality_map(a: np.ndarray, b: np.ndarray, shape: tuple[int, int], stride: int) -> np.ndarray:
    ba, bb = _blocks(a, shape, stride), _blocks(b, shape, stride)
    axes = (-2, -1)
    ma, mb = ba.mean(axis=axes), bb.mean(axis=axes)
    da, db = ba - ma[..., None, None], bb - mb[..., None, None]
    va = np.where(np.ptp(ba, axis=axes) == 0, 0.0, np.mean(da * da, axis=axes))
    vb = np.where(np.ptp(bb, axis=axes) == 0, 0.0, np.mean(db * db, axis=axes))
    cov = np.mean(da * db, axis=axes)
    return _combine(cov, va + vb, ma * mb, ma * ma + mb * mb)


def uiqi(a: BandImage, b: BandImage, window: Optional[int] = None, stride: int = 1) -> float:
    """Universal image quality index.

    ``window=None`` evaluates the index once over the whole image; otherwise
    it is averaged over fully contained ``window`` x ``window`` blocks taken
    every ``stride`` pixels.
    """
    require_same_shape(a.shape, b.shape, what="UIQI operands")
    if stride < 1:
        raise MetricError(f"stride must be >= 1, got {stride}")
    if window is None:
        shape = a.shape
    elif 1 <= window <= min(a.shape):
        shape = (window, window)
    else:
        raise MetricError(f"window {window} does not fit a {a.width}x{a.height} image")
    values = _quality_map(a.samples, b.samples, shape, stride)
    return float(np.clip(values.mean(), -1.0, 1.0))


def _hamilton(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p0, p1, p2, p3 = p
    q0, q1, q2, q3 = q
    return np.stack(
        [
            p0 * q0 - p1 * q1 - p2 * q2 - p3 * q3,
            p0 * q1 + p1 * q0 + p2 * q3 - p3 * q2,
            p0 * q2 - p1 * q3 + p2 * q0 + p3 * q1,
            p0 * q3 + p1 * q2 - p2 * q1 + p3 * q0,
        ]
    )


def _conjugate(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0]).reshape((4,) + (1,) * (q.ndim - 1))


def q4(fused: MultiBandImage, reference: MultiBandImage, block: int = 32) -> float:
    """Quaternion quality index over non-overlapping blocks; partial edge blocks are dropped."""
    if fused.count != 4 or reference.count != 4:
        raise MetricError(f"Q4 needs exactly 4 bands, got {fused.count} and {reference.count}")
    require_same_shape(fused.shape, reference.shape, what="Q4 operands")
    if block < 1 or block > min(fused.shape):
        raise MetricError(f"block {block} does not fit a {fused.width}x{fused.height} image")

    rows, cols = fused.height // block, fused.width // block

    def tiles(stack: np.ndarray) -> np.ndarray:
        trimmed = stack[:, : rows * block, : cols * block]
        return trimmed.reshape(4, rows, block, cols, block).transpose(0, 1, 3, 2, 4)

    z, r = tiles(fused.stack()), tiles(reference.stack())
    axes = (-2, -1)
    mz, mr = z.mean(axis=axes), r.mean(axis=axes)
    dz, dr = z - mz[..., None, None], r - mr[..., None, None]
    vz = np.where(np.ptp(z, axis=axes).max(axis=0) == 0, 0.0, np.sum(np.mean(dz * dz, axis=axes), axis=0))
    vr = np.where(np.ptp(r, axis=axes).max(axis=0) == 0, 0.0, np.sum(np.mean(dr * dr, axis=axes), axis=0))
    cross = _hamilton(dz, _conjugate(dr)).mean(axis=axes)
    cross_mod = np.sqrt(np.sum(cross * cross, axis=0))
    mz_mod = np.sqrt(np.sum(mz * mz, axis=0))
    mr_mod = np.sqrt(np.sum(mr * mr, axis=0))
    values = _combine(cross_mod, vz + vr, mz_mod * mr_mod, mz_mod**2 + mr_mod**2)
    return float(np.clip(values.mean(), 0.0, 1.0))


def _pair_quality(a: BandImage, b: BandImage, window: int) -> float:
    size = min(window, *a.shape)
    return uiqi(a, b, window=size, stride=size)


def qnr(
    fused: MultiBandImage, ms_original: MultiBandImage, pan: BandImage, config: QnrConfig
) -> tuple[float, float, float]:
    """Returns ``(QNR, D_lambda, D_s)``."""
    if fused.count != ms_original.count:
        raise MetricError(f"band count mismatch: {fused.count} fused vs {ms_original.count} MS")
    require_same_shape(fused.shape, pan.shape, what="fused bands and PAN")
    expected = (ms_original.height * config.ratio, ms_original.width * config.ratio)
    require_same_shape(pan.shape, expected, what=f"PAN and MS x ratio {config.ratio}")

    n = fused.count
    spectral = [
        abs(
            _pair_quality(ms_original.bands[i], ms_original.bands[j], config.window)
            - _pair_quality(fused.bands[i], fused.bands[j], config.window)
        )
        ** config.p
        for i in range(n)
        for j in range(i + 1, n)
    ]
    d_lambda = float(np.mean(spectral) ** (1.0 / config.p)) if spectral else 0.0

    pan_low = degrade(pan, config.ratio)
    spatial = [
        abs(_pair_quality(f, pan, config.window) - _pair_quality(m, pan_low, config.window)) ** config.q
        for f, m in zip(fused.bands, ms_original.bands)
    ]
    d_s = float(np.mean(spatial) ** (1.0 / config.q))

    d_lambda = float(np.clip(d_lambda, 0.0, 1.0))
    d_s = float(np.clip(d_s, 0.0, 1.0))
    value = (1.0 - d_lambda) ** config.alpha * (1.0 - d_s) ** config.beta
    return float(value), d_lambda, d_s


@dataclass(frozen=True)
class ReferenceScores:
    cc: float
    cc_per_band: list[float]
    ergas: float
    uiqi: float
    uiqi_per_band: list[float]
    uiqi_windowed: float
    q4: Optional[float]

    @property
    def q4_note(self) -> Optional[str]:
        return Q4_NOT_APPLICABLE if self.q4 is None else None


def reference_scores(
    fused: MultiBandImage, reference: MultiBandImage, ratio: int, q4_block: Optional[int] = None
) -> ReferenceScores:
    """Scores that need the true high-resolution MS; Q4 only for 4-band sets."""
    if fused.count != reference.count:
        raise MetricError(f"band count mismatch: {fused.count} fused vs {reference.count} reference")
    require_same_shape(fused.shape, reference.shape, what="fused and reference images")
    cc_bands = [correlation(f, r) for f, r in zip(fused.bands, reference.bands)]
    uiqi_bands = [uiqi(f, r) for f, r in zip(fused.bands, reference.bands)]
    window = min(settings.UIQI_WINDOW, *fused.shape)
    windowed = [uiqi(f, r, window=window) for f, r in zip(fused.bands, reference.bands)]
    q4_value = None
    if fused.count == 4:
        q4_value = q4(fused, reference, min(q4_block or settings.Q4_BLOCK, *fused.shape))
    return ReferenceScores(
        cc=float(np.mean(cc_bands)),
        cc_per_band=cc_bands,
        ergas=ergas(fused, reference, 1.0, float(ratio)),
        uiqi=float(np.mean(uiqi_bands)),
        uiqi_per_band=uiqi_bands,
        uiqi_windowed=float(np.mean(windowed)),
        q4=q4_value,
    )


def full_report(
    fused: MultiBandImage,
    reference: Optional[MultiBandImage],
    ms_original: MultiBandImage,
    pan: BandImage,
    config: QnrConfig,
    method: str = "",
    q4_block: Optional[int] = None,
) -> MetricReport:
    value, d_lambda, d_s = qnr(fused, ms_original, pan, config)
    report = MetricReport(method=method, qnr=value, d_lambda=d_lambda, d_s=d_s)
    if reference is None:
        return report

    scores = reference_scores(fused, reference, config.ratio, q4_block)
    report.cc = scores.cc
    report.cc_per_band = scores.cc_per_band
    report.ergas = scores.ergas
    report.uiqi = scores.uiqi
    report.uiqi_per_band = scores.uiqi_per_band
    report.uiqi_windowed = scores.uiqi_windowed
    report.q4 = scores.q4
    report.q4_note = scores.q4_note
    logger.debug_structured(
        "metrics_computed",
        method=method,
        cc=report.cc,
        ergas=report.ergas,
        uiqi=report.uiqi,
        q4=report.q4,
        qnr=value,
    )
    return report
