"""Small dark+noise benchmark used to check that training reaches the
brute-force optimum: gamma darkening followed by Gaussian noise on 128x128
natural crops, with disjoint train and held-out crops."""
from __future__ import annotations

import numpy as np

from . import degrade as D
from .corpus import natural_crops
from .oracle import best_sequence, compare_plan
from .raster import psnr
from .reward import OraclePsnrProvider, ProxyProvider
from .tools import default_registry
from .train import Sample, execute_plan

TOY_OVERRIDES = {D.K.DARK: {"strategy": "gamma"}, D.K.NOISE: {"kind": "gaussian"}}
TOY_CASE = 1
TOY_T_MAX = 2

# a plan matches the oracle when its final score is within this of the optimum
PROXY_MATCH_TOL = 0.02
PSNR_MATCH_TOL = 0.1


def toy_split(n_train: int = 50, n_heldout: int = 50, size: int = 128, seed: int = 0):
    crops = natural_crops(n_train + n_heldout, size, seed)
    samples = []
    for i, clean in enumerate(crops):
        img, _ = D.synth_case(clean, TOY_CASE, D.make_rng(seed * 100003 + i), TOY_OVERRIDES)
        split = "train" if i < n_train else "heldout"
        samples.append(Sample(key=f"toy{seed}_{i:03d}", degraded=img, clean=clean, case_id=TOY_CASE, setting=split))
    return samples[:n_train], samples[n_train:]


def redegrade(sample: Sample, rng: np.random.Generator) -> Sample:
    """Fresh degradation draw of a training sample's clean image."""
    img, _ = D.synth_case(sample.clean, TOY_CASE, rng, TOY_OVERRIDES)
    return Sample(key=sample.key, degraded=img, clean=sample.clean, case_id=TOY_CASE, setting=sample.setting)


_PROXY = ProxyProvider()


def proxy_for(sample: Sample):
    return _PROXY


def psnr_for(sample: Sample):
    return OraclePsnrProvider(sample.clean)


def evaluate_against_oracle(actions_per_sample, samples, provider_for, tolerance: float,
                            l_max: int = TOY_T_MAX, registry=None) -> dict:
    """Per-sample oracle comparison plus the PSNR of both plans."""
    registry = registry or default_registry()
    rows = []
    for acts, s in zip(actions_per_sample, samples):
        prov = provider_for(s)
        orc = best_sequence(s.degraded, registry, l_max, prov)
        out = execute_plan(registry, s.degraded, acts)
        cmp = compare_plan(acts, prov.score(out), orc, tolerance)
        rows.append({**cmp.to_dict(), "policy_psnr": psnr(out, s.clean), "oracle_psnr": psnr(orc.image, s.clean)})
    return {
        "rows": rows,
        "match_rate": float(np.mean([r["within_tolerance"] for r in rows])),
        "policy_psnr": float(np.mean([r["policy_psnr"] for r in rows])),
        "oracle_psnr": float(np.mean([r["oracle_psnr"] for r in rows])),
    }
