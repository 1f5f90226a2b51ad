"""Nonsubsampled contourlet transform.

A nonsubsampled pyramid (additive à trous) splits a band into one lowpass and
``levels`` bandpass images; each bandpass image is then split into directional
subbands by a tree of two-channel fan filter banks. Nothing is decimated, so
every coefficient band has the size of the source and reconstruction is a sum.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy import ndimage, signal

from ..config import settings
from ..logging import configure_logging
from ..schemas import BoundaryMode, NsctConfig
from ..telemetry import NSCT_TRANSFORMS
from .raster import BandImage

logger = configure_logging()

_B3_SPLINE = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0

# diamond kernel whose response is (cos w_v - cos w_h) / 2
_FAN_BASE = np.array(
    [
        [0.0, 0.25, 0.0],
        [-0.25, 0.0, -0.25],
        [0.0, 0.25, 0.0],
    ]
)

# maximally flat odd polynomial, g(1) = 1 and g'(1) = 0
_FAN_POLY = {1: 15.0 / 8.0, 3: -10.0 / 8.0, 5: 3.0 / 8.0}

_NDIMAGE_MODES = {
    BoundaryMode.symmetric: "reflect",
    BoundaryMode.periodic: "wrap",
    BoundaryMode.zero: "constant",
}


class NsctError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FilterKernel2D:
    """Tap grid plus the origin tap and an upsampling of tap positions.

    ``dilation`` spreads taps on a rectangular lattice; ``factor`` (a 2x2
    integer matrix) spreads them on a general lattice and takes precedence.
    """

    taps: np.ndarray
    anchor: tuple[int, int]
    dilation: int = 1
    factor: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        taps = np.array(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.size == 0:
            raise NsctError("filter taps must be a non-empty 2-D grid")
        if not np.isfinite(taps).all():
            raise NsctError("filter taps must be finite")
        if self.dilation < 1:
            raise NsctError(f"dilation must be >= 1, got {self.dilation}")
        row, col = self.anchor
        if not (0 <= row < taps.shape[0] and 0 <= col < taps.shape[1]):
            raise NsctError(f"anchor {self.anchor} lies outside taps of shape {taps.shape}")
        taps.flags.writeable = False
        object.__setattr__(self, "taps", taps)
        if self.factor is not None:
            factor = np.array(self.factor, dtype=np.int64)
            if factor.shape != (2, 2) or round(abs(np.linalg.det(factor))) == 0:
                raise NsctError("factor must be a non-singular 2x2 integer matrix")
            object.__setattr__(self, "factor", factor)

    @property
    def support(self) -> tuple[int, int]:
        rows, cols = self.dense()[0].shape
        return rows, cols

    def dense(self) -> tuple[np.ndarray, tuple[int, int]]:
        """Materialize the upsampled kernel and the position of its origin."""
        if self.factor is None and self.dilation == 1:
            return self.taps, self.anchor
        idx = np.argwhere(np.ones_like(self.taps, dtype=bool))
        offsets = idx - np.asarray(self.anchor)
        if self.factor is not None:
            moved = offsets @ self.factor.T
        else:
            moved = offsets * self.dilation
        low = moved.min(axis=0)
        shape = tuple(moved.max(axis=0) - low + 1)
        grid = np.zeros(shape, dtype=np.float64)
        grid[moved[:, 0] - low[0], moved[:, 1] - low[1]] = self.taps[idx[:, 0], idx[:, 1]]
        return grid, (int(-low[0]), int(-low[1]))


@dataclass(frozen=True, eq=False)
class NsctDecomposition:
    lowpass: BandImage
    details: tuple[tuple[BandImage, ...], ...]
    config: NsctConfig
    source_dims: tuple[int, int]

    def __post_init__(self) -> None:
        details = tuple(tuple(level) for level in self.details)
        object.__setattr__(self, "details", details)
        width, height = self.source_dims
        if len(details) != self.config.levels:
            raise NsctError(f"expected {self.config.levels} detail levels, got {len(details)}")
        for k, (level, count) in enumerate(zip(details, self.config.directions_per_level)):
            if len(level) != count:
                raise NsctError(f"level {k} holds {len(level)} subbands, expected {count}")
        for band in (self.lowpass, *(b for level in details for b in level)):
            if band.shape != (height, width):
                raise NsctError(f"coefficient band {band.width}x{band.height} differs from source {width}x{height}")

    @property
    def band_count(self) -> int:
        return 1 + sum(len(level) for level in self.details)


def _mode(boundary: BoundaryMode) -> str:
    return _NDIMAGE_MODES[BoundaryMode(boundary)]


def pyramid_filters(level: int) -> tuple[FilterKernel2D, FilterKernel2D]:
    """Lowpass and complementary highpass of pyramid stage ``level``."""
    if level < 0:
        raise NsctError(f"pyramid level must be >= 0, got {level}")
    low = np.outer(_B3_SPLINE, _B3_SPLINE)
    high = -low
    high[2, 2] += 1.0
    dilation = 2**level
    return (
        FilterKernel2D(low, (2, 2), dilation),
        FilterKernel2D(high, (2, 2), dilation),
    )


def apply_kernel(samples: np.ndarray, kernel: FilterKernel2D, boundary: BoundaryMode) -> np.ndarray:
    weights, anchor = kernel.dense()
    origin = (anchor[0] - weights.shape[0] // 2, anchor[1] - weights.shape[1] // 2)
    return ndimage.correlate(samples, weights, mode=_mode(boundary), cval=0.0, origin=origin)


def smooth(samples: np.ndarray, level: int, boundary: BoundaryMode = BoundaryMode.symmetric) -> np.ndarray:
    """One separable à-trous lowpass pass with taps spaced ``2**level`` apart."""
    if level < 0:
        raise NsctError(f"pyramid level must be >= 0, got {level}")
    step = 2**level
    taps = np.zeros((len(_B3_SPLINE) - 1) * step + 1)
    taps[::step] = _B3_SPLINE
    mode = _mode(boundary)
    rows = ndimage.correlate1d(np.asarray(samples, dtype=np.float64), taps, axis=0, mode=mode, cval=0.0)
    return ndimage.correlate1d(rows, taps, axis=1, mode=mode, cval=0.0)


def smooth_stages(samples: np.ndarray, stages: int, boundary: BoundaryMode = BoundaryMode.symmetric) -> np.ndarray:
    out = np.asarray(samples, dtype=np.float64)
    for level in range(stages):
        out = smooth(out, level, boundary)
    return out


def nsp_decompose(
    band: BandImage, levels: int, boundary: BoundaryMode = BoundaryMode.symmetric
) -> tuple[BandImage, list[BandImage]]:
    """Additive pyramid; ``bandpass[0]`` is the finest stage."""
    if levels < 1:
        raise NsctError(f"levels must be >= 1, got {levels}")
    current = band.samples
    bandpass = []
    for level in range(levels):
        low = smooth(current, level, boundary)
        bandpass.append(BandImage(current - low))
        current = low
    return BandImage(current), bandpass


def _fan_taps() -> np.ndarray:
    size = 2 * max(_FAN_POLY) + 1
    centre = size // 2
    acc = np.zeros((size, size))
    power = np.array([[1.0]])
    for degree in range(1, max(_FAN_POLY) + 1):
        power = signal.convolve2d(power, _FAN_BASE)
        coeff = _FAN_POLY.get(degree)
        if coeff is None:
            continue
        half = power.shape[0] // 2
        acc[centre - half:centre + half + 1, centre - half:centre + half + 1] += coeff * power
    taps = 0.5 * acc
    taps[centre, centre] += 0.5
    return taps


def fan_filter(resampling: Optional[np.ndarray] = None) -> FilterKernel2D:
    """Maximally flat fan filter; unresampled it passes |w_v| < |w_h|.

    With a resampling matrix M the response becomes ``F(M^T w)``.
    """
    taps = _fan_taps()
    centre = taps.shape[0] // 2
    return FilterKernel2D(taps, (centre, centre), 1, resampling)


@dataclass(frozen=True)
class Wedge:
    """Frequency support of one directional channel past the first split.

    Slopes are ``w_v / w_h`` inside the horizontal fan and ``w_h / w_v``
    inside the vertical one; the wedge spans slopes ``low`` to ``high``.
    """

    vertical: bool
    low: Fraction
    high: Fraction

    @property
    def middle(self) -> Fraction:
        return (self.low + self.high) / 2

    def halves(self) -> tuple[Wedge, Wedge]:
        """Halves split at the middle slope, larger slopes first."""
        return Wedge(self.vertical, self.middle, self.high), Wedge(self.vertical, self.low, self.middle)


def wedge_filter(wedge: Wedge) -> FilterKernel2D:
    """Fan filter resampled to pass the larger-slope half of ``wedge``.

    The response is ``sin(alpha . w) * sin(beta . w)`` fed through the fan
    polynomial; alpha vanishes on the middle slope and beta keeps its sign
    over the wedge, so both arguments stay within (-pi, pi] there.
    """
    a, b = wedge.middle.numerator, wedge.middle.denominator
    if wedge.vertical:
        alpha, beta = np.array([-a, b]), np.array([1, 0])
    else:
        alpha, beta = np.array([b, -a]), np.array([0, 1])
    return fan_filter(np.column_stack((alpha - beta, alpha + beta)))


def nsdfb_decompose(
    band: BandImage, directions: int, boundary: BoundaryMode = BoundaryMode.symmetric
) -> list[BandImage]:
    """Split ``band`` into ``directions`` wedge subbands that sum back to it.

    The first stage separates the horizontal and vertical fans; every later
    stage halves each channel's wedge with a filter resampled for that wedge.
    """
    if directions < 1 or directions & (directions - 1):
        raise NsctError(f"directions must be a power of two, got {directions}")
    depth = directions.bit_length() - 1
    if depth == 0:
        return [BandImage(band.samples)]
    passed = apply_kernel(band.samples, fan_filter(), boundary)
    full = (Fraction(-1), Fraction(1))
    channels = [
        (passed, Wedge(False, *full)),
        (band.samples - passed, Wedge(True, *full)),
    ]
    for _ in range(1, depth):
        split = []
        for samples, wedge in channels:
            upper, lower = wedge.halves()
            passed = apply_kernel(samples, wedge_filter(wedge), boundary)
            split.extend(((passed, upper), (samples - passed, lower)))
        channels = split
    return [BandImage(samples) for samples, _ in channels]


def nsct_decompose(band: BandImage, config: NsctConfig) -> NsctDecomposition:
    lowpass, bandpass = nsp_decompose(band, config.levels, config.boundary)
    details = []
    for level, count in zip(bandpass, config.directions_per_level):
        details.append(tuple(nsdfb_decompose(level, count, config.boundary)))
    NSCT_TRANSFORMS.labels(direction="decompose").inc()
    return NsctDecomposition(lowpass, tuple(details), config, (band.width, band.height))


def nsct_reconstruct(decomp: NsctDecomposition) -> BandImage:
    width, height = decomp.source_dims
    out = np.array(decomp.lowpass.samples)
    for level in decomp.details:
        for sub in level:
            if sub.shape != (height, width):
                raise NsctError("decomposition holds bands of inconsistent size")
            out += sub.samples
    NSCT_TRANSFORMS.labels(direction="reconstruct").inc()
    return BandImage(out)


def replace_details(target: NsctDecomposition, source: NsctDecomposition) -> NsctDecomposition:
    """Keep the lowpass of ``target``, take every detail band of ``source``."""
    if target.config != source.config:
        raise NsctError("cannot swap details between decompositions with different configs")
    if target.source_dims != source.source_dims:
        raise NsctError(f"source dims differ: {target.source_dims} vs {source.source_dims}")
    return NsctDecomposition(target.lowpass, source.details, target.config, target.source_dims)


def selftest(config: NsctConfig, size: int = 64, seed: int = 0) -> float:
    """Round-trip a seeded random image and return the max-abs error."""
    rng = np.random.default_rng(seed)
    band = BandImage(rng.uniform(0.0, 255.0, size=(size, size)))
    rebuilt = nsct_reconstruct(nsct_decompose(band, config))
    error = float(np.max(np.abs(rebuilt.samples - band.samples)))
    passed = error <= settings.RECONSTRUCTION_TOLERANCE
    fields = dict(
        size=size,
        seed=seed,
        levels=config.levels,
        directions=list(config.directions_per_level),
        boundary=config.boundary.value,
        max_abs_error=error,
    )
    if passed:
        logger.info_structured("nsct_selftest_passed", **fields)
    else:
        logger.error_structured("nsct_selftest_failed", **fields)
    return error
