import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restoreplan import degrade as D
from restoreplan import tools as T
from restoreplan.raster import psnr, rgb_to_hsv
from conftest import constant

REG = T.default_registry()
BY_NAME = {t.name: t for t in REG}


def v_pixel(v):
    return D.hsv_to_rgb(np.array([0.1, 0.4, v]).reshape(1, 1, 3))


def test_registry_shape():
    assert len(REG) == 11
    assert [t.index for t in REG] == list(range(11))
    assert REG[-1].is_stop and T.stop_index(REG) == 10
    assert not any(t.is_stop for t in REG[:-1])


def test_every_degradation_has_a_tool():
    targets = {t.target for t in REG}
    for kind in D.DegradationKind:
        assert kind.value in targets


def test_registry_round_trip_is_byte_identical():
    text = T.serialize_registry(REG)
    again = T.serialize_registry(T.deserialize_registry(text))
    assert text == again
    assert T.fingerprint(T.deserialize_registry(text)) == T.fingerprint(REG)


def test_registry_validation():
    with pytest.raises(ValueError):
        T.validate_registry(REG[:-1])
    with pytest.raises(ValueError):
        T.validate_registry([REG[1], REG[0], *REG[2:]])


def test_fingerprint_changes_with_params():
    altered = list(REG)
    altered[0] = T.ToolSpec(0, "brighten_gamma", "dark", {"gamma": 0.5})
    assert T.fingerprint(altered) != T.fingerprint(REG)


def test_brighten_gamma_value():
    out = rgb_to_hsv(T.apply_tool(BY_NAME["brighten_gamma"], v_pixel(0.5)))[0, 0, 2]
    assert out == pytest.approx(0.5 ** (2 / 3), abs=1e-12)
    assert out == pytest.approx(0.6300, abs=1e-4)


def test_brighten_const_clamps():
    out = rgb_to_hsv(T.apply_tool(BY_NAME["brighten_const"], v_pixel(0.9)))[0, 0, 2]
    assert out == 1.0
    low = rgb_to_hsv(T.apply_tool(BY_NAME["brighten_const"], v_pixel(0.2)))[0, 0, 2]
    assert low == pytest.approx(0.2 + 40 / 255, abs=1e-12)


@pytest.mark.parametrize("name", ["median3", "median5"])
def test_median_removes_salt(name):
    img = constant(0.3, 16, 16)
    img[7, 9] = 1.0
    np.testing.assert_array_equal(T.apply_tool(BY_NAME[name], img), constant(0.3, 16, 16))


def test_stop_is_rejected():
    with pytest.raises(T.ToolError):
        T.apply_tool(REG[-1], constant(0.5))


@pytest.mark.parametrize("tool", REG[:-1], ids=lambda t: t.name)
def test_tools_are_deterministic_and_shape_preserving(tool, photo):
    img = photo[:40, :56]
    a = T.apply_tool(tool, img)
    b = T.apply_tool(tool, img)
    assert a.shape == img.shape
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1


@settings(max_examples=25, deadline=None)
@given(h=st.integers(8, 40), w=st.integers(8, 40), seed=st.integers(0, 2 ** 16))
def test_tools_preserve_dimensions_property(h, w, seed):
    img = np.random.default_rng(seed).random((h, w, 3))
    for tool in REG[:-1]:
        assert T.apply_tool(tool, img).shape == (h, w, 3)


def test_dcp_near_identity_with_black_region(photo):
    img = photo.copy()
    img[:32, :32] = 0.0
    # the black patch pulls the dark channel to 0 there; elsewhere natural images stay near 0 too
    assert np.abs(T.dcp_dehaze(img) - img).mean() < 0.08


def test_dcp_constant_image_is_finite():
    for v in (0.0, 0.5, 1.0):
        out = T.dcp_dehaze(constant(v))
        assert np.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_dcp_improves_hazed_psnr(corpus):
    for img in corpus:
        hazed = D.haze(img, 0.85, 2.0)
        assert psnr(T.dcp_dehaze(hazed), img) > psnr(hazed, img)


def test_dcp_brightens_dark_images(corpus):
    rng = np.random.default_rng(7)
    for img in corpus:
        dark = D.apply_dark(img, rng=rng)
        before = rgb_to_hsv(dark)[..., 2].mean()
        after = rgb_to_hsv(T.dcp_dehaze(dark))[..., 2].mean()
        assert after > before


def test_deblock_reduces_blockiness(corpus):
    from restoreplan.features import raw_statistics
    for img in corpus:
        j = D.apply_jpeg(img, quality=10)
        assert raw_statistics(T.apply_tool(BY_NAME["deblock"], j))["blockiness"] < raw_statistics(j)["blockiness"]


# ---------------------------------------------------------------- external commands

def _script(tmp_path, body):
    p = tmp_path / "tool.py"
    p.write_text(body)
    return (sys.executable, str(p))


def test_external_tool_runs(tmp_path):
    cmd = _script(tmp_path, "import sys, shutil\nshutil.copy(sys.argv[1], sys.argv[2])\n")
    spec = T.ToolSpec(0, "copy", "noise", command=cmd)
    img = np.round(np.random.default_rng(0).random((12, 10, 3)) * 255) / 255
    np.testing.assert_allclose(T.apply_tool(spec, img), img, atol=1e-12)


@pytest.mark.parametrize("body", ["import sys\nsys.exit(3)\n", "pass\n"], ids=["nonzero", "no_output"])
def test_external_tool_failures(tmp_path, body):
    spec = T.ToolSpec(0, "broken", "noise", command=_script(tmp_path, body))
    with pytest.raises(T.ToolError):
        T.apply_tool(spec, constant(0.5, 8, 8))
