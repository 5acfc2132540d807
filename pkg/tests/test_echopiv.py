import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from savfi.echopiv import (
    PivConfig,
    correlate_windows,
    fit_rotation,
    normalized_median_test,
    piv_pyramid,
    subpixel_peak,
)


def speckle(rng, shape=(128, 128), sigma=1.5):
    """Band-limited complex speckle."""
    re = gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    im = gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return re + 1j * im


def fourier_shift(img, dz, dx):
    kz = np.fft.fftfreq(img.shape[0])[:, None]
    kx = np.fft.fftfreq(img.shape[1])[None, :]
    return np.fft.ifft2(np.fft.fft2(img) * np.exp(-2j * np.pi * (kz * dz + kx * dx)))


def test_autocorrelation_peak_one(rng):
    a = rng.normal(size=(16, 16))
    surf, ok = correlate_windows(a, a)
    assert ok
    assert surf[8, 8] == pytest.approx(1.0)
    assert np.unravel_index(surf.argmax(), surf.shape) == (8, 8)


def test_circular_integer_shift(rng):
    a = rng.normal(size=(32, 32))
    b = np.roll(a, (3, -2), axis=(0, 1))
    surf, _ = correlate_windows(a, b)
    i, j = np.unravel_index(surf.argmax(), surf.shape)
    assert (i - 16, j - 16) == (3, -2)


def test_constant_window_invalid():
    surf, ok = correlate_windows(np.ones((8, 8)), np.ones((8, 8)))
    assert not ok
    assert not surf.any()


def test_odd_window_rejected():
    with pytest.raises(ValueError):
        correlate_windows(np.ones((7, 8)), np.ones((7, 8)))


def test_subpixel_symmetric_and_gaussian():
    s = np.zeros((5, 5))
    s[1:4, 2] = [0.5, 1.0, 0.5]
    s[2, 1:4] = [0.5, 1.0, 0.5]
    dz, dx, border = subpixel_peak(s)
    assert (dz, dx, border) == (0.0, 0.0, False)
    x = np.array([-1.0, 0.0, 1.0])
    s[1:4, 2] = np.exp(-(x**2) / 2)
    s[2, 1:4] = np.exp(-((x - 0.3) ** 2) / 2)
    dz, dx, _ = subpixel_peak(s)
    assert dx == pytest.approx(0.3, abs=1e-12)


def test_subpixel_border_flag():
    s = np.zeros((6, 6))
    s[0, 3] = 1.0
    dz, dx, border = subpixel_peak(s)
    assert border
    assert (dz, dx) == (-3.0, 0.0)


def test_identical_frames_zero_field(rng):
    f = speckle(rng, (64, 64))
    est = piv_pyramid(f, f)
    np.testing.assert_allclose(est.displacement, 0.0, atol=1e-9)
    assert est.valid.all()


def test_integer_axial_shift(rng):
    f = speckle(rng)
    est = piv_pyramid(f, np.roll(f, 4, axis=0))
    med = np.median(est.displacement.reshape(2, -1), axis=1)
    assert abs(med[0] - 4) < 0.1
    assert abs(med[1]) < 0.1


def test_fourier_lateral_shift(rng):
    f = speckle(rng)
    est = piv_pyramid(f, fourier_shift(f, 0.0, 2.5))
    med = np.median(est.displacement.reshape(2, -1), axis=1)
    assert abs(med[1] - 2.5) < 0.25
    assert abs(med[0]) < 0.25


def test_half_pixel_shift_not_peak_locked(rng):
    f = speckle(rng)
    est = piv_pyramid(f, fourier_shift(f, 0.5, -0.5))
    med = np.median(est.displacement.reshape(2, -1), axis=1)
    np.testing.assert_allclose(med, [0.5, -0.5], atol=0.05)


def test_velocity_scaling(rng):
    f = speckle(rng, (64, 64))
    est = piv_pyramid(f, np.roll(f, 2, axis=1), pitch=1e-4, frame_dt=2e-3)
    np.testing.assert_allclose(est.v, est.displacement * 1e-4 / 2e-3)
    assert est.source == "piv"


def test_rounded_offset_mode_runs(rng):
    f = speckle(rng)
    est = piv_pyramid(f, np.roll(f, 4, axis=0), PivConfig(deform=False))
    assert abs(np.median(est.displacement[0]) - 4) < 0.1


def test_bmode_input(rng):
    f = speckle(rng)
    est = piv_pyramid(f, np.roll(f, 3, axis=1), PivConfig(on_bmode=True))
    assert abs(np.median(est.displacement[1]) - 3) < 0.2


def test_config_validation():
    with pytest.raises(ValueError):
        PivConfig(iterations=0)
    with pytest.raises(ValueError):
        PivConfig(window=32, iterations=5)  # final window would be 2 px
    assert PivConfig().window_sizes == [32, 16, 8]


def test_frame_shape_mismatch(rng):
    with pytest.raises(ValueError):
        piv_pyramid(np.ones((64, 64)), np.ones((64, 32)))


def test_median_test_flags_single_outlier():
    field = np.ones((2, 5, 5))
    field[:, 2, 2] = 10.0
    out, med = normalized_median_test(field)
    assert out[2, 2]
    assert out.sum() == 1
    np.testing.assert_allclose(med[:, 2, 2], 1.0)


@settings(max_examples=20, deadline=None)
@given(omega=st.floats(-50, 50).filter(lambda w: abs(w) > 1e-3))
def test_fit_rotation_exact(omega):
    h = 21
    pitch = 1e-4
    zz, xx = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    dz, dx = (zz - 10) * pitch, (xx - 10) * pitch
    v = np.stack([omega * dx, -omega * dz])
    assert fit_rotation(v, pitch, (10, 10)) == pytest.approx(omega, rel=1e-12)
