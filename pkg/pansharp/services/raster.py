from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import ValidationError
from scipy import ndimage

from ..logging import configure_logging
from ..schemas import BoundaryMode, ExpandKernel, Manifest, ManifestBand, ManifestPan
from ..utils.json import load_json_file, write_json

SUPPORTED_DEPTHS = (8, 16)
MANIFEST_NAME = "manifest.json"


class RasterError(ValueError):
    pass


class DimensionMismatchError(RasterError):
    pass


class UnsupportedDepthError(RasterError):
    pass


@dataclass(frozen=True, eq=False)
class BandImage:
    """One spectral band at one resolution, stored row-major as (height, width)."""

    samples: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.samples, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise RasterError(f"band must be a non-empty 2-D grid, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise RasterError("band contains NaN or Inf samples")
        data.flags.writeable = False
        object.__setattr__(self, "samples", data)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BandImage):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.samples, other.samples))


@dataclass(frozen=True, eq=False)
class MultiBandImage:
    bands: tuple[BandImage, ...]
    band_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        bands = tuple(self.bands)
        if not bands:
            raise RasterError("a multiband image needs at least one band")
        shapes = {b.shape for b in bands}
        if len(shapes) != 1:
            raise DimensionMismatchError(f"bands differ in dimensions: {sorted(shapes)}")
        if self.band_names is not None and len(self.band_names) != len(bands):
            raise RasterError("band_names must match the band count")
        object.__setattr__(self, "bands", bands)
        if self.band_names is not None:
            object.__setattr__(self, "band_names", tuple(self.band_names))

    @classmethod
    def from_array(cls, stack: np.ndarray, band_names: Sequence[str] | None = None) -> MultiBandImage:
        array = np.asarray(stack, dtype=np.float64)
        if array.ndim != 3:
            raise RasterError(f"expected a (bands, height, width) stack, got shape {array.shape}")
        return cls(tuple(BandImage(plane) for plane in array), tuple(band_names) if band_names else None)

    @property
    def count(self) -> int:
        return len(self.bands)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bands[0].shape

    @property
    def height(self) -> int:
        return self.shape[0]

    @property
    def width(self) -> int:
        return self.shape[1]

    def stack(self) -> np.ndarray:
        return np.stack([b.samples for b in self.bands])

    def names(self) -> list[str]:
        if self.band_names is not None:
            return list(self.band_names)
        return [f"band_{i}" for i in range(self.count)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MultiBandImage):
            return NotImplemented
        return self.count == other.count and all(a == b for a, b in zip(self.bands, other.bands))


@dataclass(frozen=True)
class Histogram:
    bin_count: int
    bin_edges: np.ndarray
    counts: np.ndarray


@dataclass(frozen=True)
class SceneInputs:
    ms: MultiBandImage
    pan: BandImage | None
    ratio: int


def require_same_shape(*shapes: tuple[int, int], what: str = "inputs") -> None:
    if len(set(shapes)) > 1:
        raise DimensionMismatchError(f"{what} have mismatched dimensions: {list(shapes)}")


# PGM (P5) codec


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    length = len(data)
    while pos < length:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < length and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < length and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise RasterError("truncated PGM header")
    return data[start:pos], pos


def read_pgm(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise RasterError(f"band file not found: {path}") from exc
    magic, pos = _read_token(data, 0)
    if magic != b"P5":
        raise UnsupportedDepthError(f"{path}: only binary PGM (P5) is supported, got {magic!r}")
    fields = []
    for _ in range(3):
        token, pos = _read_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError as exc:
            raise RasterError(f"{path}: malformed PGM header field {token!r}") from exc
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise RasterError(f"{path}: invalid dimensions {width}x{height}")
    if not 0 < maxval <= 65535:
        raise UnsupportedDepthError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    expected = width * height * dtype.itemsize
    payload = data[pos:pos + expected]
    if len(payload) != expected:
        raise RasterError(f"{path}: expected {expected} bytes of samples, found {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(height, width)


def write_pgm(path: str | Path, samples: np.ndarray, maxval: int) -> None:
    height, width = samples.shape
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(header + samples.astype(dtype).tobytes())
    except OSError as exc:
        raise RasterError(f"cannot write {target}: {exc.strerror or exc}") from exc


def clip_round(samples: np.ndarray, depth: int) -> np.ndarray:
    """Round half-up then clip into [0, 2**depth - 1]."""
    if depth not in SUPPORTED_DEPTHS:
        raise UnsupportedDepthError(f"depth must be one of {SUPPORTED_DEPTHS}, got {depth}")
    return np.clip(np.floor(np.asarray(samples, dtype=np.float64) + 0.5), 0, 2**depth - 1)


def load_band(path: str | Path) -> BandImage:
    return BandImage(read_pgm(path).astype(np.float64))


def save_band(band: BandImage, path: str | Path, depth: int = 16) -> None:
    write_pgm(path, clip_round(band.samples, depth), 2**depth - 1)


# Manifests


def _parse_manifest(manifest_path: Path) -> Manifest:
    if not manifest_path.exists():
        raise RasterError(f"manifest not found: {manifest_path}")
    try:
        return Manifest.model_validate(load_json_file(manifest_path))
    except (ValueError, ValidationError) as exc:
        raise RasterError(f"invalid manifest {manifest_path}: {exc}") from exc


def resolve_manifest(path: str | Path) -> Path:
    """Accept either a manifest file or a directory holding ``manifest.json``."""
    candidate = Path(path)
    if candidate.is_dir():
        candidate = candidate / MANIFEST_NAME
    return candidate


def load_multiband(manifest_path: str | Path) -> MultiBandImage:
    path = resolve_manifest(manifest_path)
    manifest = _parse_manifest(path)
    bands = [load_band(path.parent / entry.path) for entry in manifest.bands]
    shapes = [b.shape for b in bands]
    require_same_shape(*shapes, what=f"bands of {path}")
    if manifest.width is not None and manifest.height is not None:
        require_same_shape(shapes[0], (manifest.height, manifest.width), what=f"bands and declared size of {path}")
    return MultiBandImage(tuple(bands), tuple(entry.name for entry in manifest.bands))


def load_inputs(manifest_path: str | Path) -> SceneInputs:
    """Load MS bands plus the optional PAN band and check the PAN/MS geometry."""
    path = resolve_manifest(manifest_path)
    manifest = _parse_manifest(path)
    ms = load_multiband(path)
    pan = None
    if manifest.pan is not None:
        pan = load_band(path.parent / manifest.pan.path)
        expected = (ms.height * manifest.ratio, ms.width * manifest.ratio)
        require_same_shape(pan.shape, expected, what=f"PAN and MS x ratio {manifest.ratio} in {path}")
    _log_inputs(ms, pan, manifest.ratio)
    return SceneInputs(ms=ms, pan=pan, ratio=manifest.ratio)


def save_multiband(
    image: MultiBandImage,
    directory: str | Path,
    depth: int = 16,
    ratio: int = 1,
    pan: BandImage | None = None,
) -> Path:
    """Write each band as ``band_<i>.pgm`` plus a manifest; returns the manifest path."""
    target = Path(directory)
    entries = []
    for i, (name, band) in enumerate(zip(image.names(), image.bands)):
        filename = f"band_{i}.pgm"
        save_band(band, target / filename, depth)
        entries.append(ManifestBand(name=name, path=filename))
    pan_entry = None
    if pan is not None:
        save_band(pan, target / "pan.pgm", depth)
        pan_entry = ManifestPan(path="pan.pgm")
    manifest = Manifest(ratio=ratio, bands=entries, pan=pan_entry, width=image.width, height=image.height)
    return write_json(target / MANIFEST_NAME, manifest.model_dump(exclude_none=True))


# Resampling


def expand(band: BandImage, ratio: int, kernel: ExpandKernel = ExpandKernel.bilinear) -> BandImage:
    """Interpolate onto a grid ``ratio`` times finer.

    Output sample j sits at input coordinate j / ratio, so input samples land
    on output multiples of ``ratio``; positions past the last input sample
    clamp to the edge.
    """
    if ratio < 1:
        raise RasterError(f"ratio must be >= 1, got {ratio}")
    if ratio == 1:
        return BandImage(band.samples)
    rows = np.arange(band.height * ratio, dtype=np.float64) / ratio
    cols = np.arange(band.width * ratio, dtype=np.float64) / ratio
    grid = np.meshgrid(rows, cols, indexing="ij")
    order = 1 if ExpandKernel(kernel) is ExpandKernel.bilinear else 3
    out = ndimage.map_coordinates(band.samples, grid, order=order, mode="nearest")
    return BandImage(out)


def degrade(band: BandImage, ratio: int, boundary: BoundaryMode = BoundaryMode.symmetric) -> BandImage:
    """Lowpass with the à-trous pyramid kernel, then keep every ``ratio``-th sample."""
    from .nsct import smooth_stages

    if ratio < 1:
        raise RasterError(f"ratio must be >= 1, got {ratio}")
    if band.height % ratio or band.width % ratio:
        raise RasterError(f"dimensions {band.width}x{band.height} are not divisible by ratio {ratio}")
    if ratio == 1:
        return BandImage(band.samples)
    stages = int(np.ceil(np.log2(ratio)))
    smoothed = smooth_stages(band.samples, stages, boundary)
    return BandImage(smoothed[::ratio, ::ratio])


def expand_multiband(image: MultiBandImage, ratio: int, kernel: ExpandKernel = ExpandKernel.bilinear) -> MultiBandImage:
    return MultiBandImage(tuple(expand(b, ratio, kernel) for b in image.bands), image.band_names)


def degrade_multiband(image: MultiBandImage, ratio: int) -> MultiBandImage:
    return MultiBandImage(tuple(degrade(b, ratio) for b in image.bands), image.band_names)


def histogram(band: BandImage, bins: int, value_range: tuple[float, float] | None = None) -> Histogram:
    """Left-closed bins over [min, max]; the last bin is closed on the right."""
    if bins < 1:
        raise RasterError(f"bins must be >= 1, got {bins}")
    lo, hi = value_range if value_range is not None else (float(band.samples.min()), float(band.samples.max()))
    if hi < lo:
        raise RasterError(f"invalid histogram range [{lo}, {hi}]")
    if hi == lo:
        edges = np.array([lo - 0.5, lo + 0.5])
        inside = int(np.count_nonzero(band.samples == lo))
        return Histogram(bin_count=1, bin_edges=edges, counts=np.array([inside], dtype=np.int64))
    counts, edges = np.histogram(band.samples, bins=bins, range=(lo, hi))
    return Histogram(bin_count=bins, bin_edges=edges, counts=counts.astype(np.int64))


def _log_inputs(ms: MultiBandImage, pan: BandImage | None, ratio: int) -> None:
    logger = configure_logging()
    logger.debug_structured(
        "inputs_loaded",
        bands=ms.count,
        ms_width=ms.width,
        ms_height=ms.height,
        pan_width=pan.width if pan is not None else None,
        pan_height=pan.height if pan is not None else None,
        ratio=ratio,
    )
