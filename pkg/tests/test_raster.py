import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from restoreplan.raster import (
    PSNR_CAP, Kernel, RasterError, as_raster, convolve2d, hsv_to_rgb, psnr, read_png, rgb_to_hsv, ssim, write_png,
)
from conftest import constant

unit = st.floats(0.0, 1.0, allow_nan=False)
images = arrays(np.float64, st.tuples(st.integers(8, 16), st.integers(8, 16), st.just(3)), elements=unit)


def test_as_raster_rejects_bad_shape():
    with pytest.raises(RasterError):
        as_raster(np.zeros((4, 4)))
    with pytest.raises(RasterError):
        as_raster(np.full((4, 4, 3), np.nan))


@pytest.mark.parametrize("rgb,hsv", [
    ((1.0, 0.0, 0.0), (0.0, 1.0, 1.0)),
    ((0.5, 0.5, 0.5), (0.0, 0.0, 0.5)),
    ((0.2, 0.4, 0.6), ((4 + (0.2 - 0.4) / 0.4) / 6, 0.4 / 0.6, 0.6)),
])
def test_rgb_to_hsv_reference_pixels(rgb, hsv):
    out = rgb_to_hsv(np.array(rgb).reshape(1, 1, 3))[0, 0]
    np.testing.assert_allclose(out, hsv, atol=1e-12)


def test_hsv_to_rgb_reference_pixels():
    np.testing.assert_allclose(hsv_to_rgb(np.array([0.0, 1.0, 1.0]).reshape(1, 1, 3))[0, 0], (1, 0, 0))
    for h in (0.0, 0.3, 0.99):
        np.testing.assert_allclose(hsv_to_rgb(np.array([h, 0.0, 0.37]).reshape(1, 1, 3))[0, 0], (0.37,) * 3)


def test_hsv_round_trip_random_pixels(rng):
    px = rng.random((10, 10, 3))
    assert np.max(np.abs(hsv_to_rgb(rgb_to_hsv(px)) - px)) < 1e-6


@given(images)
@settings(max_examples=40, deadline=None)
def test_hsv_round_trip_property(img):
    assert np.max(np.abs(hsv_to_rgb(rgb_to_hsv(img)) - img)) < 1e-6


def test_kernel_validation_and_sums():
    with pytest.raises(RasterError):
        Kernel(np.ones((2, 2)))
    with pytest.raises(RasterError):
        Kernel(np.ones((3, 5)))
    for k in (Kernel.box(3), Kernel.disk(2.5), Kernel.line(9, 0.7)):
        assert abs(k.weights.sum() - 1.0) < 1e-9
        assert k.size % 2 == 1


def test_identity_and_box_convolution(photo):
    np.testing.assert_array_equal(convolve2d(photo, Kernel.identity()), photo)
    c = constant(0.3, 9, 9)
    np.testing.assert_allclose(convolve2d(c, Kernel.box(3)), c, atol=1e-12)


def test_box_on_single_spike():
    img = np.zeros((7, 7, 3))
    img[3, 3] = 0.9
    out = convolve2d(img, Kernel.box(3))
    np.testing.assert_allclose(out[2:5, 2:5, 0], np.full((3, 3), 0.1), atol=1e-12)
    assert out[..., 0].sum() == pytest.approx(0.9)
    assert np.count_nonzero(out[..., 0] > 1e-15) == 9


def test_convolution_uses_replicate_border():
    img = np.zeros((5, 5, 3))
    img[:, 0] = 1.0
    out = convolve2d(img, Kernel.box(3))
    # left column sees itself twice through the replicated border
    np.testing.assert_allclose(out[2, 0, 0], 2.0 / 3.0)


@given(images)
@settings(max_examples=25, deadline=None)
def test_convolution_identity_and_range(img):
    np.testing.assert_array_equal(convolve2d(img, Kernel.identity()), img)
    out = convolve2d(img, Kernel.line(5, 1.1))
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert out.shape == img.shape


def test_psnr_closed_forms(rng):
    assert psnr(constant(0.5), constant(0.6)) == pytest.approx(20.0, abs=1e-9)
    a = rng.random((16, 16, 3))
    assert psnr(a, a) == PSNR_CAP
    b = rng.random((16, 16, 3))
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), abs=1e-9)
    assert psnr(a, b) == psnr(b, a)


def test_metric_dimension_errors():
    with pytest.raises(RasterError):
        psnr(constant(0.1, 8, 8), constant(0.1, 8, 9))
    with pytest.raises(RasterError):
        ssim(constant(0.1, 8, 8), constant(0.1, 9, 8))
    with pytest.raises(RasterError):
        ssim(constant(0.1, 7, 7), constant(0.1, 7, 7))


def test_ssim_closed_forms(photo, rng):
    assert ssim(photo, photo) == pytest.approx(1.0, abs=1e-9)
    expected = (2 * 0.5 * 0.25 + 1e-4) / (0.5 ** 2 + 0.25 ** 2 + 1e-4)
    assert ssim(constant(0.5, 16, 16), constant(0.25, 16, 16)) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.8001, abs=1e-4)
    noisy = lambda s: np.clip(photo + rng.normal(0, s, photo.shape), 0, 1)
    assert ssim(photo, noisy(0.1)) < ssim(photo, noisy(0.05))


@given(images, images)
@settings(max_examples=25, deadline=None)
def test_ssim_symmetry(a, b):
    if a.shape != b.shape:
        return
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_png_round_trip(tmp_path, rng):
    img = np.round(rng.random((12, 10, 3)) * 255) / 255
    path = tmp_path / "x.png"
    write_png(path, img)
    np.testing.assert_array_equal(read_png(path), img)
    with pytest.raises(RasterError, match="missing.png"):
        read_png(tmp_path / "missing.png")
