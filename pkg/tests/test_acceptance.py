"""Acceptance gate: one test per criterion, thresholds fixed in advance."""
import logging
import subprocess
import sys
import time

import numpy as np
import pytest

from restoreplan import degrade as D
from restoreplan import nets as N
from restoreplan import po as P
from restoreplan import toy
from restoreplan.cli import bench
from restoreplan.corpus import natural_crops
from restoreplan.raster import psnr, ssim
from restoreplan.reward import ProviderError, RemoteProvider
from restoreplan.tools import default_registry
from restoreplan.train import Sample, TrainingAborted, infer_plan, train
from conftest import max_rel_error, numeric_grads, record
from test_degrade import monotonicity_failures
from test_po import double_sum_gae

REG = default_registry()

MATCH_RATE_PPO = 0.80
MATCH_RATE_GRPO = 0.70
PROXY_PSNR_GAP_DB = 1.0
ORACLE_PSNR_GAP_DB = 0.5
TOY_RUNTIME_S = 15 * 60


@pytest.fixture(scope="module")
def split():
    return toy.toy_split(n_train=50, n_heldout=50)


def _toy_run(split, provider_for, tolerance, **cfg_kw):
    train_set, heldout = split
    cfg = P.PoConfig(t_max=toy.TOY_T_MAX, **cfg_kw)
    t0 = time.perf_counter()
    res = train(cfg, train_set, provider_for)
    plans = [infer_plan(res.actor, s.degraded, REG, toy.TOY_T_MAX).actions for s in heldout]
    ev = toy.evaluate_against_oracle(plans, heldout, provider_for, tolerance, l_max=toy.TOY_T_MAX)
    ev["seconds"] = time.perf_counter() - t0
    ev["result"] = res
    return ev


@pytest.fixture(scope="module")
def proxy_run(split):
    return _toy_run(split, toy.proxy_for, toy.PROXY_MATCH_TOL)


@pytest.fixture(scope="module")
def psnr_run(split):
    return _toy_run(split, toy.psnr_for, toy.PSNR_MATCH_TOL)


def test_c1_gae_oracle_equivalence():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        r, v = rng.normal(size=n), rng.normal(size=n)
        gamma, lam, term = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0), float(rng.normal())
        adv, _ = P.compute_gae(r, v, term, gamma, lam)
        worst = max(worst, float(np.abs(adv - double_sum_gae(r, v, term, gamma, lam)).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and dt < 1.0
    record(1, ok, f"max |recursion - double sum| = {worst:.2e} (<= 1e-12), {dt:.2f} s (< 1 s)")
    assert ok


def test_c2_gradient_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        s = rng.random((3, 43))
        for d_out in (11, 1):
            p = N.init_params(43, d_out, seed)
            p.ln_gain = 1.0 + 0.2 * rng.standard_normal(128)
            p.ln_bias = 0.1 * rng.standard_normal(128)
            w = rng.standard_normal((3, d_out))
            err = max_rel_error(N.backward(p, s, w),
                                numeric_grads(p, lambda q: float((N.mlp_forward(q, s)[0] * w).sum()), h=1e-4))
            worst = max(worst, err)
    dt = time.perf_counter() - t0
    ok = worst < 1e-3 and dt < 30
    record(2, ok, f"max relative error {worst:.2e} (< 1e-3) over actor+critic at 3 seeds, {dt:.1f} s (< 30 s)")
    assert ok


def test_c3_clip_semantics():
    rng = np.random.default_rng(0)
    actor = N.init_params(43, 11, 0)
    s = rng.random((4, 43))
    a = rng.integers(0, 11, 4)
    logp = N.log_softmax(N.mlp_forward(actor, s)[0])[np.arange(4), a]
    adv = np.array([1.0, 0.5, -1.0, -0.5])
    ratios = np.array([1.5, 1.5, 0.5, 0.5])
    clipped = P.policy_loss_grads(actor, None, s, a, logp - np.log(ratios), adv, np.zeros(4), 0.0, 0.0, 0.2)
    zero = all(not g.any() for g in clipped.actor_grads.values())
    adv2 = rng.normal(size=4)
    at_old = P.policy_loss_grads(actor, None, s, a, logp, adv2, np.zeros(4), 0.0, 0.0, 0.2).actor_grads
    naive = P.naive_policy_grads(actor, s, a, adv2)
    diff = max(float(np.abs(at_old[k] - naive[k]).max()) for k in naive)
    ok = zero and diff <= 1e-9
    record(3, ok, f"clipped-sample gradient exactly zero: {zero}; |surrogate - naive| at ratio 1 = {diff:.1e} (<= 1e-9)")
    assert ok


@pytest.mark.slow
def test_c4_toy_learning_proxy(proxy_run):
    r = proxy_run
    gap = r["oracle_psnr"] - r["policy_psnr"]
    ok = r["match_rate"] >= MATCH_RATE_PPO and abs(gap) <= PROXY_PSNR_GAP_DB and r["seconds"] < TOY_RUNTIME_S
    record(4, ok, f"held-out oracle match {r['match_rate']:.0%} (>= 80%, tol {toy.PROXY_MATCH_TOL}); "
                  f"PSNR policy {r['policy_psnr']:.2f} vs oracle-under-proxy {r['oracle_psnr']:.2f} dB "
                  f"(|gap| {abs(gap):.2f} <= 1.0); {r['seconds']:.0f} s")
    assert ok


@pytest.mark.slow
def test_c5_supervised_extension(psnr_run):
    r = psnr_run
    gap = r["oracle_psnr"] - r["policy_psnr"]
    ok = r["match_rate"] >= MATCH_RATE_PPO and gap <= ORACLE_PSNR_GAP_DB and r["seconds"] < TOY_RUNTIME_S
    record(5, ok, f"held-out oracle match {r['match_rate']:.0%} (>= 80%, tol {toy.PSNR_MATCH_TOL} dB); "
                  f"PSNR policy {r['policy_psnr']:.2f} vs oracle {r['oracle_psnr']:.2f} dB "
                  f"(gap {gap:.2f} <= 0.5); {r['seconds']:.0f} s")
    assert ok


@pytest.mark.slow
def test_c6_telescoping(proxy_run, psnr_run):
    runs = (proxy_run["result"], psnr_run["result"])
    worst = max(r.max_telescoping_error for r in runs)
    episodes = sum(r.episodes for r in runs)
    ok = worst <= 1e-9 and episodes > 0
    record(6, ok, f"max |sum rewards - (final - initial)| = {worst:.1e} (<= 1e-9) over {episodes} episodes")
    assert ok


def _mixed_set(n_per_case, seed):
    crops = natural_crops(15 * n_per_case, 128, seed=seed)
    out = []
    for cid in D.CASES:
        for j in range(n_per_case):
            i = (cid - 1) * n_per_case + j
            img, _ = D.synth_case(crops[i], cid, D.make_rng(seed * 1000 + i))
            out.append(Sample(f"mix{seed}_{i:03d}", img, crops[i], cid, D.CASES[cid].setting))
    return out


@pytest.mark.slow
def test_c7_one_pass_efficiency():
    train_set = _mixed_set(4, seed=11)
    test_set = _mixed_set(2, seed=12)
    cfg = P.PoConfig(t_max=5, updates=60, seed=0)
    res = train(cfg, train_set, toy.proxy_for)
    report = bench(res.actor, REG, test_set, t_max=5)
    means = [float(r["mean_tool_invocations"]) for r in report.values()]
    structural = all(r["forwards_equal_len_plus_one"] and r["max_tool_invocations"] <= 5 for r in report.values())
    spread = max(means) - min(means)
    ok = set(report) == {"I", "II", "III", "IV"} and structural and spread <= 1.0
    record(7, ok, f"forwards = len + 1 and invocations <= 5 on all {len(test_set)} images: {structural}; "
                  f"mean invocations per setting {dict(zip(report, [round(m, 2) for m in means]))} (spread {spread:.2f} <= 1)")
    assert ok


@pytest.mark.slow
def test_c8_grpo_parity(split):
    r = _toy_run(split, toy.proxy_for, toy.PROXY_MATCH_TOL, optimizer_variant="grpo", grpo_group=8)
    ok = r["match_rate"] >= MATCH_RATE_GRPO
    record(8, ok, f"GRPO held-out oracle match {r['match_rate']:.0%} (>= 70%, tol {toy.PROXY_MATCH_TOL})")
    assert ok


def test_c9_metric_unit_checks(corpus):
    a, b = np.full((32, 32, 3), 0.5), np.full((32, 32, 3), 0.6)
    p = psnr(a, b)
    s = ssim(corpus[0], corpus[0])
    fails = monotonicity_failures(corpus)
    ok = abs(p - 20.0) <= 1e-9 and abs(s - 1.0) <= 1e-9 and not fails
    record(9, ok, f"psnr {p:.12f} (20 +- 1e-9); ssim(a, a) {s:.12f} (1 +- 1e-9); monotonicity failures {fails}")
    assert ok


@pytest.fixture
def mock_process():
    procs = []

    def start(mode, *extra):
        proc = subprocess.Popen([sys.executable, "-m", "restoreplan.mockscorer", "--mode", mode, "--port", "0",
                                 *extra], stdout=subprocess.PIPE, text=True)
        procs.append(proc)
        line = proc.stdout.readline()
        assert line.startswith("listening on"), line
        return f"http://127.0.0.1:{int(line.split()[-1])}"

    yield start
    for proc in procs:
        proc.terminate()
        proc.wait(timeout=10)


def test_c10_remote_provider_contract(split, mock_process, caplog, monkeypatch):
    monkeypatch.delenv("SCORER_URL", raising=False)
    samples = [Sample(s.key, s.degraded[:64, :64], None, s.case_id, s.setting) for s in split[0][:8]]
    cfg = P.PoConfig(t_max=2, updates=1, seed=0)

    url = mock_process("luminance")
    prov = RemoteProvider(url, timeout=5, retries=1, backoff=0.01)
    res = train(cfg, samples, lambda s: prov, memoize=False)
    full_update = len(res.log) == 1 and res.failures == 0 and res.episodes == cfg.episodes_per_update
    nonzero = res.log[0]["mean_return"] != 0.0

    outcomes = {}
    failing = {
        "timeout": (mock_process("timeout", "--delay", "2"), 0.3),
        "5xx": (mock_process("5xx"), 5.0),
        "malformed": (mock_process("malformed"), 5.0),
    }
    for mode, (murl, timeout) in failing.items():
        p = RemoteProvider(murl, timeout=timeout, retries=1, backoff=0.01)
        caplog.clear()
        with caplog.at_level(logging.WARNING, logger="restoreplan.train"):
            try:
                p.score(samples[0].degraded)
                direct = "returned a score"
            except ProviderError:
                direct = "raised"
            try:
                r = train(P.PoConfig(t_max=2, updates=1, failure_budget=2), samples, lambda s: p, memoize=False)
                aborted, rows = False, r.log
            except TrainingAborted:
                aborted, rows = True, []
        logged = sum("discarded" in rec.getMessage() for rec in caplog.records)
        outcomes[mode] = direct == "raised" and aborted and logged == 3 and rows == []
    ok = full_update and nonzero and all(outcomes.values())
    record(10, ok, f"luminance mock: one update of {res.episodes} episodes, mean return "
                   f"{res.log[0]['mean_return']:.3f}; abort-and-log on {outcomes}")
    assert ok
