import json
import threading
import urllib.request

import numpy as np
import pytest

from restoreplan import degrade as D
from restoreplan import reward as R
from restoreplan.env import RestorationEnv
from restoreplan.features import FEATURE_DIM, SLOT
from restoreplan.mockscorer import serve
from restoreplan.raster import luma
from restoreplan.tools import apply_tool, default_registry
from conftest import constant

REG = default_registry()
BY_NAME = {t.name: t for t in REG}


@pytest.fixture
def mock(monkeypatch):
    monkeypatch.delenv("SCORER_URL", raising=False)
    servers = []

    def start(mode, **kw):
        srv = serve(mode, **kw)
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        return f"http://127.0.0.1:{srv.server_address[1]}", srv

    yield start
    for srv in servers:
        srv.shutdown()
        srv.server_close()


# ---------------------------------------------------------------- oracle

def test_oracle_examples(photo):
    p = R.OraclePsnrProvider(photo)
    assert p.score(photo) == 99.0
    assert p.reward(photo, photo.copy()) == 0.0
    with pytest.raises(Exception):
        p.score(photo[:10])


def test_oracle_denoise_reward_positive(corpus):
    rng = np.random.default_rng(5)
    for img in corpus:
        noisy = D.add_noise(img, "gaussian", 0.08, rng)
        assert R.OraclePsnrProvider(img).reward(noisy, apply_tool(BY_NAME["gauss_denoise"], noisy)) > 0


# ---------------------------------------------------------------- proxy

def test_proxy_fixed_point():
    f = np.zeros(FEATURE_DIM)
    f[SLOT["sharpness"]] = 1.0
    f[SLOT["std_luma"]] = 1.0
    f[SLOT["mean_v"]] = 0.8
    assert R.ProxyProvider().score_features(f) == 5.0


def test_proxy_range_and_weights(photo):
    s = R.ProxyProvider().score(photo)
    assert 1.0 <= s <= 5.0
    assert R.ProxyProvider({k: 0.0 for k in R.PROXY_TERMS}).score(photo) == 5.0
    assert R.ProxyProvider({k: 100.0 for k in R.PROXY_TERMS}).score(photo) == 1.0
    with pytest.raises(ValueError):
        R.ProxyProvider({"sharpness": 1.0})


def test_proxy_dark_penalty_threshold():
    f = np.zeros(FEATURE_DIM)
    f[SLOT["mean_v"]] = 0.25
    assert R.proxy_penalties(f)["dark"] == pytest.approx(0.5)
    f[SLOT["mean_v"]] = 0.7
    assert R.proxy_penalties(f)["dark"] == 0.0


def test_proxy_clean_beats_every_case(corpus):
    p = R.ProxyProvider()
    for cid in D.CASES:
        for i, img in enumerate(corpus):
            degraded, _ = D.synth_case(img, cid, D.make_rng(1000 * cid + i))
            assert p.score(img) >= p.score(degraded), (cid, i)


def test_proxy_invariant_to_transposed_traversal(photo):
    # same pixels, same score, whatever order the arrays are walked in
    a = np.ascontiguousarray(photo)
    b = np.asfortranarray(photo)
    assert R.ProxyProvider().score(a) == R.ProxyProvider().score(b)


@pytest.mark.parametrize("make", [lambda img: R.ProxyProvider(), lambda img: R.OraclePsnrProvider(img)],
                         ids=["proxy", "oracle"])
def test_no_op_and_telescoping(make, photo, rng):
    p = make(photo)
    degraded, _ = D.synth_case(photo, 11, rng)
    assert p.reward(degraded, degraded.copy()) == 0.0
    img, total = degraded, 0.0
    for idx in rng.integers(0, 10, size=6):
        nxt = apply_tool(REG[idx], img)
        total += p.reward(img, nxt)
        img = nxt
    assert total == pytest.approx(p.score(img) - p.score(degraded), abs=1e-9)


def test_make_provider(photo):
    assert isinstance(R.make_provider("proxy"), R.ProxyProvider)
    assert isinstance(R.make_provider("oracle", clean=photo), R.OraclePsnrProvider)
    for bad in (lambda: R.make_provider("oracle"), lambda: R.make_provider("lpips")):
        with pytest.raises(ValueError):
            bad()


def test_png_b64_round_trip():
    img = np.round(np.random.default_rng(0).random((9, 7, 3)) * 255) / 255
    np.testing.assert_allclose(R.decode_png_b64(R.encode_png_b64(img)), img, atol=1e-12)


# ---------------------------------------------------------------- remote

def test_remote_constant_gives_zero_rewards(mock, photo):
    url, _ = mock("constant")
    p = R.RemoteProvider(url, timeout=5, retries=0)
    env = RestorationEnv(REG, p, t_max=3)
    env.reset(photo)
    for a in (0, 5, 7):
        _, r, _ = env.step(a)
        assert r == 0.0


def test_remote_luminance_rewards_brightening(mock, corpus):
    url, _ = mock("luminance")
    p = R.RemoteProvider(url, timeout=5, retries=0)
    for img in corpus[:4]:
        dark = D.apply_dark(img, strategy="gamma", amount=2.5)
        out = apply_tool(BY_NAME["brighten_gamma"], dark)
        r = p.reward(dark, out)
        assert r > 0
        assert p.score(dark) == pytest.approx(1 + 4 * luma(np.round(dark * 255) / 255).mean(), abs=1e-9)


def test_remote_wire_format(mock):
    url, _ = mock("luminance")
    body = json.dumps({"image": R.encode_png_b64(constant(0.5, 8, 8))}).encode()
    req = urllib.request.Request(url + "/score", data=body, method="POST",
                                 headers={"content-type": "application/json"})
    with urllib.request.urlopen(req, timeout=5) as resp:
        payload = json.loads(resp.read())
    assert set(payload) == {"score"}
    assert payload["score"] == pytest.approx(1 + 4 * 128 / 255)


def test_remote_malformed_fails_without_retry(mock):
    url, srv = mock("malformed")
    p = R.RemoteProvider(url, timeout=5, retries=3, backoff=0.0)
    with pytest.raises(R.ProviderError, match="malformed"):
        p.score(constant(0.5))
    assert srv.request_state["requests"] == 1


def test_remote_5xx_retries_then_fails(mock):
    url, srv = mock("5xx")
    p = R.RemoteProvider(url, timeout=5, retries=2, backoff=0.0)
    with pytest.raises(R.ProviderError, match="unavailable"):
        p.score(constant(0.5))
    assert srv.request_state["requests"] == 3


def test_remote_flaky_recovers(mock):
    url, srv = mock("flaky", fail_first=2)
    p = R.RemoteProvider(url, timeout=5, retries=3, backoff=0.0)
    assert p.score(constant(0.5)) == pytest.approx(1 + 4 * 128 / 255)
    assert srv.request_state["requests"] == 3


def test_remote_timeout(mock):
    url, _ = mock("timeout", delay=1.0)
    p = R.RemoteProvider(url, timeout=0.2, retries=1, backoff=0.0)
    with pytest.raises(R.ProviderError):
        p.score(constant(0.5))


def test_remote_unreachable():
    p = R.RemoteProvider("http://127.0.0.1:9", timeout=0.5, retries=1, backoff=0.0)
    with pytest.raises(R.ProviderError):
        p.score(constant(0.5))


def test_scorer_url_env_override(monkeypatch):
    monkeypatch.setenv("SCORER_URL", "http://example.invalid:1234/")
    assert R.RemoteProvider("http://ignored").url == "http://example.invalid:1234/score"
    monkeypatch.delenv("SCORER_URL")
    with pytest.raises(ValueError):
        R.RemoteProvider(None)
