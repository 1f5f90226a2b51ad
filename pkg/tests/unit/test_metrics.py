"""
Tests for the quality metrics.

Small integer images are scored against straightforward loop implementations
of each index.
"""

import math

import numpy as np
import pytest

from pansharp.config import settings
from pansharp.schemas import Q4_NOT_APPLICABLE, QnrConfig
from pansharp.services.metrics import (
    MetricConsistencyError,
    MetricError,
    UndefinedMetricError,
    correlation,
    ergas,
    full_report,
    moments,
    q4,
    qnr,
    uiqi,
)
from pansharp.services.raster import BandImage, DimensionMismatchError, MultiBandImage


pytestmark = pytest.mark.unit


def _digits(rng, shape=(4, 4)):
    return rng.integers(1, 10, shape).astype(float)


def _mean(values):
    return sum(values) / len(values)


def _oracle_corr(a, b):
    x, y = a.ravel().tolist(), b.ravel().tolist()
    mx, my = _mean(x), _mean(y)
    num = sum((p - mx) * (q - my) for p, q in zip(x, y))
    den = math.sqrt(sum((p - mx) ** 2 for p in x) * sum((q - my) ** 2 for q in y))
    return num / den


def _oracle_quality(x, y):
    mx, my = _mean(x), _mean(y)
    vx = 0.0 if max(x) == min(x) else _mean([(p - mx) ** 2 for p in x])
    vy = 0.0 if max(y) == min(y) else _mean([(q - my) ** 2 for q in y])
    cov = _mean([(p - mx) * (q - my) for p, q in zip(x, y)])
    if vx + vy > 0 and mx * mx + my * my > 0:
        return 4 * cov * mx * my / ((vx + vy) * (mx * mx + my * my))
    structure = 1.0 if vx + vy == 0 else 2 * cov / (vx + vy)
    luminance = 1.0 if mx * mx + my * my == 0 else 2 * mx * my / (mx * mx + my * my)
    return structure * luminance


def _oracle_uiqi(a, b, window):
    rows, cols = a.shape
    values = []
    for r in range(rows - window + 1):
        for c in range(cols - window + 1):
            x = a[r:r + window, c:c + window].ravel().tolist()
            y = b[r:r + window, c:c + window].ravel().tolist()
            values.append(_oracle_quality(x, y))
    return _mean(values)


def _qmul(p, q):
    a1, b1, c1, d1 = p
    a2, b2, c2, d2 = q
    return (
        a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
        a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
        a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
        a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
    )


def _oracle_q4(z, r):
    """Whole-image quaternion index, z and r of shape (4, H, W)."""
    zs = [tuple(z[:, i, j]) for i in range(z.shape[1]) for j in range(z.shape[2])]
    rs = [tuple(r[:, i, j]) for i in range(r.shape[1]) for j in range(r.shape[2])]
    n = len(zs)
    mz = tuple(sum(q[k] for q in zs) / n for k in range(4))
    mr = tuple(sum(q[k] for q in rs) / n for k in range(4))
    dz = [tuple(q[k] - mz[k] for k in range(4)) for q in zs]
    dr = [tuple(q[k] - mr[k] for k in range(4)) for q in rs]
    vz = sum(sum(c * c for c in q) for q in dz) / n
    vr = sum(sum(c * c for c in q) for q in dr) / n
    cross = [0.0, 0.0, 0.0, 0.0]
    for p, q in zip(dz, dr):
        prod = _qmul(p, (q[0], -q[1], -q[2], -q[3]))
        cross = [cross[k] + prod[k] / n for k in range(4)]
    mod = lambda q: math.sqrt(sum(c * c for c in q))  # noqa: E731
    return 4 * mod(cross) * mod(mz) * mod(mr) / ((vz + vr) * (mod(mz) ** 2 + mod(mr) ** 2))


def _stack(arrays):
    return MultiBandImage.from_array(np.stack(arrays))


class TestCorrelation:
    """Tests for the correlation coefficient."""

    def test_identical(self, rng):
        """A band correlates perfectly with itself."""
        a = BandImage(_digits(rng))
        assert correlation(a, a) == pytest.approx(1.0, abs=1e-15)

    def test_anticorrelated(self, rng):
        """b = -a + 100 gives -1."""
        x = _digits(rng)
        assert correlation(BandImage(x), BandImage(-x + 100)) == pytest.approx(-1.0, abs=1e-15)

    def test_worked_example(self):
        """[1,2,3,4] against [1,2,3,5] gives 0.9827."""
        a = BandImage(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = BandImage(np.array([[1.0, 2.0], [3.0, 5.0]]))
        assert correlation(a, b) == pytest.approx(0.9827, abs=5e-5)

    def test_symmetric_and_affine(self, rng):
        """corr(a, b) == corr(b, a) and corr(a, -3a + 2) == -1."""
        x, y = _digits(rng), _digits(rng)
        a, b = BandImage(x), BandImage(y)
        assert correlation(a, b) == pytest.approx(correlation(b, a), abs=1e-15)
        assert correlation(a, BandImage(-3 * x + 2)) == pytest.approx(-1.0, abs=1e-15)

    def test_matches_oracle(self, rng):
        """Vectorized and loop results agree."""
        x, y = _digits(rng), _digits(rng)
        assert correlation(BandImage(x), BandImage(y)) == pytest.approx(_oracle_corr(x, y), abs=1e-12)

    def test_constant_band(self):
        """A constant band has no correlation."""
        with pytest.raises(UndefinedMetricError):
            correlation(BandImage(np.ones((3, 3))), BandImage(np.arange(9.0).reshape(3, 3)))

    def test_moments_cauchy_schwarz(self, rng):
        """|covariance| never exceeds the product of deviations."""
        m = moments(BandImage(_digits(rng)), BandImage(_digits(rng)))
        assert abs(m.covariance) <= m.std_a * m.std_b + 1e-12
        assert m.pixel_count == 16


class TestErgas:
    """Tests for ERGAS."""

    def test_identical(self, rng):
        """Identical images score zero."""
        ref = _stack([_digits(rng), _digits(rng)])
        assert ergas(ref, ref, 1, 4) == 0.0

    def test_pure_bias(self):
        """A constant offset of 5 on a mean of 100 at ratio 1/4 gives 1.25."""
        ref = _stack([np.full((4, 4), 100.0)])
        fused = _stack([np.full((4, 4), 105.0)])
        assert ergas(fused, ref, 1, 4) == pytest.approx(1.25, abs=1e-12)

    def test_linear_in_resolution_ratio(self, rng):
        """Doubling h/l doubles ERGAS."""
        ref, fused = _stack([_digits(rng)]), _stack([_digits(rng)])
        assert ergas(fused, ref, 2, 4) == pytest.approx(2 * ergas(fused, ref, 1, 4), rel=1e-14)

    def test_matches_oracle(self, rng):
        """Vectorized and loop results agree."""
        refs = [_digits(rng) for _ in range(4)]
        fused = [_digits(rng) for _ in range(4)]
        total = 0.0
        for f, r in zip(fused, refs):
            diffs = [(p - q) ** 2 for p, q in zip(r.ravel().tolist(), f.ravel().tolist())]
            total += _mean(diffs) / _mean(r.ravel().tolist()) ** 2
        expected = 100 * 0.25 * math.sqrt(total / 4)
        assert ergas(_stack(fused), _stack(refs), 1, 4) == pytest.approx(expected, abs=1e-12)

    def test_zero_mean_reference(self):
        """A zero-mean reference band is undefined."""
        ref = _stack([np.array([[1.0, -1.0], [1.0, -1.0]])])
        with pytest.raises(UndefinedMetricError):
            ergas(ref, ref, 1, 4)

    def test_identity_check_enforced(self, rng, mocker):
        """A failing bias/deviation cross-check raises."""
        mocker.patch.object(settings, "RMSE_IDENTITY_TOLERANCE", -1.0)
        ref, fused = _stack([_digits(rng)]), _stack([_digits(rng)])
        with pytest.raises(MetricConsistencyError):
            ergas(fused, ref, 1, 4)


class TestUiqi:
    """Tests for the universal image quality index."""

    def test_identical(self, rng):
        """Identical non-constant images score one in both modes."""
        a = BandImage(_digits(rng, (8, 8)) + np.eye(8))
        assert uiqi(a, a) == pytest.approx(1.0, abs=1e-14)
        assert uiqi(a, a, window=8) == pytest.approx(1.0, abs=1e-14)

    def test_doubled(self, rng):
        """b = 2a gives 0.8 * 0.8."""
        x = _digits(rng)
        assert uiqi(BandImage(x), BandImage(2 * x)) == pytest.approx(0.64, abs=1e-12)

    def test_offset(self, rng):
        """b = a + c only loses luminance."""
        x = _digits(rng)
        m, c = x.mean(), 3.0
        expected = 2 * m * (m + c) / (m * m + (m + c) ** 2)
        assert uiqi(BandImage(x), BandImage(x + c)) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("window", [None, 2, 3])
    def test_matches_oracle(self, rng, window):
        """Whole-image and sliding modes agree with the loop version."""
        x, y = _digits(rng), _digits(rng)
        expected = _oracle_uiqi(x, y, window or 4)
        assert uiqi(BandImage(x), BandImage(y), window=window) == pytest.approx(expected, abs=1e-12)

    def test_transposition(self, rng):
        """Transposing both images keeps the score."""
        x, y = _digits(rng, (6, 6)), _digits(rng, (6, 6))
        a = uiqi(BandImage(x), BandImage(y), window=3)
        b = uiqi(BandImage(x.T), BandImage(y.T), window=3)
        assert a == pytest.approx(b, abs=1e-14)

    def test_both_constant_equal(self):
        """Equal flat blocks count as a perfect match."""
        a = BandImage(np.full((4, 4), 5.0))
        assert uiqi(a, a) == 1.0

    def test_one_constant(self, rng):
        """A flat block against a textured one scores zero."""
        assert uiqi(BandImage(np.full((4, 4), 5.0)), BandImage(_digits(rng) + np.eye(4))) == 0.0

    def test_both_constant_unequal(self):
        """Different flat blocks keep only the luminance factor."""
        score = uiqi(BandImage(np.full((4, 4), 3.0)), BandImage(np.full((4, 4), 5.0)))
        assert score == pytest.approx(30.0 / 34.0, abs=1e-15)

    def test_window_too_large(self, rng):
        """The window must fit the image."""
        with pytest.raises(MetricError):
            uiqi(BandImage(_digits(rng)), BandImage(_digits(rng)), window=5)

    def test_upper_bound(self, rng):
        """The index never exceeds one."""
        for _ in range(20):
            assert uiqi(BandImage(_digits(rng)), BandImage(_digits(rng)), window=2) <= 1.0


class TestQ4:
    """Tests for the quaternion index."""

    def test_identical(self, rng):
        """Identical 4-band images score one."""
        ref = _stack([_digits(rng, (8, 8)) for _ in range(4)])
        assert q4(ref, ref, block=4) == pytest.approx(1.0, abs=1e-14)

    def test_doubled(self, rng):
        """Doubling every band gives 0.64."""
        ref = _stack([_digits(rng, (8, 8)) for _ in range(4)])
        fused = MultiBandImage.from_array(2 * ref.stack())
        assert q4(fused, ref, block=4) == pytest.approx(0.64, abs=1e-12)

    def test_matches_oracle(self, rng):
        """Single-block result agrees with the loop quaternion version."""
        z = np.stack([_digits(rng) for _ in range(4)])
        r = np.stack([_digits(rng) for _ in range(4)])
        expected = max(0.0, _oracle_q4(z, r))
        assert q4(MultiBandImage.from_array(z), MultiBandImage.from_array(r), block=4) == pytest.approx(expected, abs=1e-12)

    def test_real_data_reduces_to_uiqi(self, rng):
        """Data confined to the first band gives the windowed UIQI of that band."""
        ref0 = _digits(rng, (8, 8))
        fused0 = ref0 + 0.1 * rng.standard_normal((8, 8))
        zeros = np.zeros((8, 8))
        ref = _stack([ref0, zeros, zeros, zeros])
        fused = _stack([fused0, zeros, zeros, zeros])
        expected = uiqi(BandImage(fused0), BandImage(ref0), window=4, stride=4)
        assert q4(fused, ref, block=4) == pytest.approx(expected, abs=1e-10)

    def test_partial_blocks_dropped(self, rng):
        """A 6x6 image with block 4 scores only its top-left block."""
        ref = np.stack([_digits(rng, (6, 6)) for _ in range(4)])
        fused = np.stack([_digits(rng, (6, 6)) for _ in range(4)])
        whole = q4(MultiBandImage.from_array(fused), MultiBandImage.from_array(ref), block=4)
        corner = q4(MultiBandImage.from_array(fused[:, :4, :4]), MultiBandImage.from_array(ref[:, :4, :4]), block=4)
        assert whole == pytest.approx(corner, abs=1e-15)

    def test_needs_four_bands(self, rng):
        """Three bands are rejected."""
        ref = _stack([_digits(rng) for _ in range(3)])
        with pytest.raises(MetricError):
            q4(ref, ref, block=4)


class TestQnr:
    """Tests for the no-reference index."""

    def test_identity_at_unit_ratio(self, rng):
        """Fused equal to MS at ratio 1 has no distortion."""
        ms = _stack([_digits(rng) for _ in range(3)])
        value, d_lambda, d_s = qnr(ms, ms, BandImage(_digits(rng)), QnrConfig(ratio=1))
        assert (value, d_lambda, d_s) == (1.0, 0.0, 0.0)

    def test_single_band(self, rng):
        """With one band the spectral distortion is zero."""
        ms = _stack([_digits(rng)])
        fused = _stack([_digits(rng)])
        value, d_lambda, d_s = qnr(fused, ms, BandImage(_digits(rng)), QnrConfig(ratio=1))
        assert d_lambda == 0.0
        assert value == pytest.approx(1.0 - d_s, abs=1e-15)

    def test_matches_oracle(self, rng):
        """Distortions agree with loop UIQI differences."""
        ms = [_digits(rng) for _ in range(3)]
        fused = [_digits(rng) for _ in range(3)]
        pan = _digits(rng)
        q = lambda a, b: _oracle_uiqi(a, b, 4)  # noqa: E731
        pairs = [(i, j) for i in range(3) for j in range(i + 1, 3)]
        d_lambda = _mean([abs(q(ms[i], ms[j]) - q(fused[i], fused[j])) for i, j in pairs])
        d_s = _mean([abs(q(f, pan) - q(m, pan)) for f, m in zip(fused, ms)])
        value, got_lambda, got_s = qnr(_stack(fused), _stack(ms), BandImage(pan), QnrConfig(ratio=1))
        assert got_lambda == pytest.approx(d_lambda, abs=1e-12)
        assert got_s == pytest.approx(d_s, abs=1e-12)
        assert value == pytest.approx((1 - d_lambda) * (1 - d_s), abs=1e-12)

    def test_range(self, rng):
        """QNR stays in [0, 1] on arbitrary inputs."""
        for _ in range(10):
            ms = _stack([_digits(rng, (4, 4)) for _ in range(3)])
            fused = _stack([_digits(rng, (8, 8)) for _ in range(3)])
            value, d_lambda, d_s = qnr(fused, ms, BandImage(_digits(rng, (8, 8))), QnrConfig(ratio=2))
            assert 0.0 <= value <= 1.0
            assert 0.0 <= d_lambda <= 1.0 and 0.0 <= d_s <= 1.0

    def test_geometry_checked(self, rng):
        """PAN must be ratio times the MS size."""
        ms = _stack([_digits(rng) for _ in range(2)])
        with pytest.raises(DimensionMismatchError):
            qnr(ms, ms, BandImage(_digits(rng)), QnrConfig(ratio=2))


class TestFullReport:
    """Tests for the combined report."""

    def test_identity_four_bands(self, rng):
        """A perfect fusion scores CC 1, ERGAS 0, UIQI 1, Q4 1."""
        ref = _stack([_digits(rng, (8, 8)) for _ in range(4)])
        report = full_report(ref, ref, ref, BandImage(_digits(rng, (8, 8))), QnrConfig(ratio=1), "oracle")
        assert report.cc == pytest.approx(1.0, abs=1e-14)
        assert report.ergas == 0.0
        assert report.uiqi == pytest.approx(1.0, abs=1e-14)
        assert report.q4 == pytest.approx(1.0, abs=1e-14)
        assert report.qnr == 1.0
        assert len(report.cc_per_band) == 4

    def test_three_bands_mark_q4(self, rng):
        """Q4 is marked not applicable for three bands."""
        ref = _stack([_digits(rng, (8, 8)) for _ in range(3)])
        report = full_report(ref, ref, ref, BandImage(_digits(rng, (8, 8))), QnrConfig(ratio=1), "x")
        assert report.q4 is None
        assert report.q4_note == Q4_NOT_APPLICABLE
        assert report.csv_row()[4] == Q4_NOT_APPLICABLE

    def test_without_reference(self, rng):
        """Only the no-reference triple is filled without a reference."""
        ms = _stack([_digits(rng) for _ in range(2)])
        report = full_report(ms, None, ms, BandImage(_digits(rng)), QnrConfig(ratio=1), "x")
        assert report.cc is None and report.ergas is None
        assert report.qnr == 1.0
