"""Command line: synth, train, plan, eval, oracle, bench.

Every command reads an optional JSON config (``--config``); explicit flags
override config values. Exit codes: 0 success, 2 input error, 3 checkpoint
mismatch, 4 search budget exceeded, 1 anything else.
"""
from __future__ import annotations

import argparse
import collections
import copy
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import degrade as D
from .nets import CheckpointError
from .oracle import BudgetExceeded, aggregate, best_sequence, compare_plan
from .po import PoConfig
from .raster import RasterError, psnr, read_png, ssim, write_png
from .reward import ProviderError, ProxyProvider, make_provider
from .tools import default_registry, deserialize_registry
from .train import TrainingAborted, infer_plan, load_policy, load_samples, train

log = logging.getLogger("restoreplan")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_BUDGET = 0, 1, 2, 3, 4

DEFAULT_CONFIG = {
    "seed": 0,
    "registry": None,
    "synth": {"cases": [1, 2, 3, 4, 5], "n_per_case": 20, "overrides": {}},
    "provider": {"kind": "proxy", "weights": None, "endpoint": None, "timeout": 10.0, "retries": 3,
                 "backoff": 0.1},
    "train": {},
    "heldout_manifest": None,
    "plan": {"t_max": 5},
    "oracle": {"l_max": 2, "budget": 1000000, "tolerance": 0.02},
    "eval": {"metrics": ["psnr", "ssim", "proxy"]},
}

CSV_COLUMNS = ("degraded", "case_id", "setting", "psnr", "ssim", "proxy", "plan")


class InputError(Exception):
    pass


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        user = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    return _merge(DEFAULT_CONFIG, user)


def registry_from(cfg: dict):
    if not cfg.get("registry"):
        return default_registry()
    try:
        return deserialize_registry(Path(cfg["registry"]).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"bad registry file {cfg['registry']}: {exc}") from exc


def provider_factory(pcfg: dict):
    kind = pcfg["kind"]
    if kind == "oracle":
        def for_sample(sample):
            if sample.clean is None:
                raise InputError("the oracle provider needs clean paths in the manifest")
            return make_provider("oracle", clean=sample.clean)
        return for_sample
    try:
        shared = make_provider(kind, **{k: v for k, v in pcfg.items() if k != "kind" and v is not None})
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return lambda sample: shared


def _samples(manifest):
    try:
        return load_samples(manifest)
    except RasterError as exc:
        raise InputError(str(exc)) from exc


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg) -> int:
    sc = cfg["synth"]
    cases = [int(c) for c in (args.cases.split(",") if args.cases else sc["cases"])]
    bad = [c for c in cases if c not in D.CASES]
    if bad:
        raise InputError(f"unknown case ids {bad}")
    n = args.n_per_case if args.n_per_case is not None else sc["n_per_case"]
    seed = args.seed if args.seed is not None else cfg["seed"]
    overrides = {D.DegradationKind(k): v for k, v in (sc.get("overrides") or {}).items()}
    manifest = D.synth_dataset(args.clean_dir, args.out, cases, n, seed, overrides)
    counts = collections.Counter(r["case_id"] for r in D.read_manifest(manifest))
    print(f"manifest: {manifest}")
    for cid in cases:
        print(f"case {cid:2d} ({D.CASES[cid].name}): {counts[cid]}")
    print(f"{sum(counts.values())} images")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    tcfg = dict(cfg["train"])
    tcfg.setdefault("seed", cfg["seed"])
    if args.updates is not None:
        tcfg["updates"] = args.updates
    if args.seed is not None:
        tcfg["seed"] = args.seed
    try:
        po_cfg = PoConfig.from_dict(tcfg)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad train config: {exc}") from exc
    pcfg = dict(cfg["provider"])
    if args.provider:
        pcfg["kind"] = args.provider
    registry = registry_from(cfg)
    samples = _samples(args.manifest)
    if not samples:
        raise InputError(f"manifest {args.manifest} is empty")
    heldout_path = args.heldout or cfg.get("heldout_manifest")
    heldout = _samples(heldout_path) if heldout_path else None
    provider_for = provider_factory(pcfg)
    # only deterministic local providers may be memoized
    res = train(po_cfg, samples, provider_for, registry, heldout, args.out, memoize=pcfg["kind"] != "remote")
    out = Path(args.out)
    print(f"checkpoint: {out / 'checkpoint.json'}")
    print(f"log: {out / 'train_log.jsonl'}")
    final = res.log[-1]["greedy_eval"] if res.log else res.initial_eval
    print(f"updates: {len(res.log)}  episodes: {res.episodes}  failed episodes: {res.failures}")
    print(f"final greedy eval: {final if final is not None else 'n/a (no held-out set)'}")
    return EXIT_OK


def _load(args, cfg):
    registry = registry_from(cfg)
    actor, doc = load_policy(args.checkpoint, registry)
    return registry, actor, doc


def _t_max(args, cfg) -> int:
    t = args.t_max if getattr(args, "t_max", None) is not None else cfg["plan"]["t_max"]
    if t < 0:
        raise InputError("t-max must be >= 0")
    return t


def cmd_plan(args, cfg) -> int:
    registry, actor, _ = _load(args, cfg)
    img = read_png(args.image)
    t_max = _t_max(args, cfg)
    # per-step scores need a no-reference evaluator; the PSNR oracle has no clean image here
    pcfg = dict(cfg["provider"])
    if pcfg["kind"] == "oracle":
        pcfg["kind"] = "proxy"
    plan = infer_plan(actor, img, registry, t_max, provider_factory(pcfg)(None))
    stem = Path(args.image).stem
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    out_png = out_dir / f"{stem}_restored.png"
    out_json = out_dir / f"{stem}_plan.json"
    write_png(out_png, plan.image)
    out_json.write_text(json.dumps(plan.to_json(args.image, out_png), indent=2, sort_keys=True) + "\n")
    print(json.dumps(plan.names))
    return EXIT_OK


def _metric_row(metrics, out, clean):
    row = {}
    if "psnr" in metrics:
        row["psnr"] = psnr(out, clean) if clean is not None else None
    if "ssim" in metrics:
        row["ssim"] = ssim(out, clean) if clean is not None else None
    if "proxy" in metrics:
        row["proxy"] = ProxyProvider().score(out)
    return row


def svg_polylines(summary: dict[str, dict[str, float]], metrics) -> str:
    """One normalized polyline per metric across settings."""
    settings = list(summary)
    w, h, pad = 400, 240, 30
    colors = {"psnr": "#1f77b4", "ssim": "#d62728", "proxy": "#2ca02c"}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">']
    for i, s in enumerate(settings):
        x = pad + i * (w - 2 * pad) / max(len(settings) - 1, 1)
        parts.append(f'<text x="{x:.1f}" y="{h - 8}" font-size="11" text-anchor="middle">{s}</text>')
    for m in metrics:
        vals = [summary[s].get(m) for s in settings]
        pts = [(i, v) for i, v in enumerate(vals) if v is not None]
        if not pts:
            continue
        lo, hi = min(v for _, v in pts), max(v for _, v in pts)
        span = hi - lo or 1.0
        coords = " ".join(
            f"{pad + i * (w - 2 * pad) / max(len(settings) - 1, 1):.1f},"
            f"{h - pad - (v - lo) / span * (h - 2 * pad):.1f}" for i, v in pts)
        parts.append(f'<polyline fill="none" stroke="{colors.get(m, "#000")}" points="{coords}"><title>{m}</title></polyline>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_eval(args, cfg) -> int:
    registry, actor, _ = _load(args, cfg)
    metrics = args.metrics.split(",") if args.metrics else list(cfg["eval"]["metrics"])
    unknown = set(metrics) - {"psnr", "ssim", "proxy"}
    if unknown:
        raise InputError(f"unknown metrics {sorted(unknown)}")
    t_max = _t_max(args, cfg)
    rows = []
    for s in _samples(args.manifest):
        plan = infer_plan(actor, s.degraded, registry, t_max)
        rows.append({"degraded": Path(s.key).name, "case_id": s.case_id, "setting": s.setting,
                     **_metric_row(metrics, plan.image, s.clean), "plan": "+".join(plan.names)})
    groups = collections.defaultdict(list)
    for r in rows:
        groups[r["setting"]].append(r)
    summary = {}
    for setting in sorted(groups, key=str):
        means = {}
        for m in metrics:
            vals = [r[m] for r in groups[setting] if r.get(m) is not None]
            means[m] = float(np.mean(vals)) if vals else None
        summary[setting] = means
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        wr = csv.writer(fh)
        wr.writerow(CSV_COLUMNS)
        fmt = lambda v: "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)
        for r in rows:
            wr.writerow([fmt(r.get(c)) for c in CSV_COLUMNS])
        for setting, means in summary.items():
            wr.writerow([fmt(v) for v in ("mean", "", setting, means.get("psnr"), means.get("ssim"),
                                          means.get("proxy"), "")])
    finally:
        if args.out:
            fh.close()
    if args.plot:
        Path(args.plot).write_text(svg_polylines(summary, metrics))
    return EXIT_OK


def cmd_oracle(args, cfg) -> int:
    ocfg = cfg["oracle"]
    l_max = args.l_max if args.l_max is not None else ocfg["l_max"]
    pcfg = dict(cfg["provider"])
    if args.provider:
        pcfg["kind"] = args.provider
    registry = registry_from(cfg)
    actor = None
    if args.checkpoint:
        actor, _ = load_policy(args.checkpoint, registry)
    n_tools = sum(not t.is_stop for t in registry)
    if n_tools ** l_max > ocfg["budget"]:
        raise BudgetExceeded(f"{n_tools}^{l_max} sequences exceed the budget of {ocfg['budget']}")
    provider_for = provider_factory(pcfg)
    reports = []
    fh = open(args.out, "w") if args.out else sys.stdout
    try:
        for s in _samples(args.manifest):
            prov = provider_for(s)
            res = best_sequence(s.degraded, registry, l_max, prov, budget=ocfg["budget"])
            row = {"degraded": s.key, "case_id": s.case_id, "oracle_plan": [registry[i].name for i in res.sequence],
                   "oracle_score": res.score}
            if actor is not None:
                plan = infer_plan(actor, s.degraded, registry, l_max)
                cmp = compare_plan(plan.actions, prov.score(plan.image), res, ocfg["tolerance"])
                reports.append(cmp)
                row.update(cmp.to_dict())
                row["policy_plan"] = plan.names
                row["oracle_plan"] = [registry[i].name for i in res.sequence]
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        if reports:
            fh.write(json.dumps({"aggregate": aggregate(reports)}, sort_keys=True) + "\n")
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def bench(actor, registry, samples, t_max: int) -> dict:
    per = collections.defaultdict(lambda: {"seconds": [], "tools": [], "forwards": [], "plan_len": []})
    for s in samples:
        t0 = time.perf_counter()
        plan = infer_plan(actor, s.degraded, registry, t_max)
        dt = time.perf_counter() - t0
        g = per[s.setting]
        g["seconds"].append(dt)
        g["tools"].append(plan.tool_calls)
        g["forwards"].append(plan.forwards)
        g["plan_len"].append(len(plan.actions))
    out = {}
    for setting in sorted(per, key=str):
        g = per[setting]
        out[setting] = {
            "n": len(g["tools"]),
            "mean_seconds": float(np.mean(g["seconds"])),
            "mean_tool_invocations": float(np.mean(g["tools"])),
            "mean_policy_forwards": float(np.mean(g["forwards"])),
            "max_tool_invocations": int(max(g["tools"])),
            "forwards_equal_len_plus_one": bool(all(f == n + 1 for f, n in zip(g["forwards"], g["plan_len"]))),
        }
    return out


def cmd_bench(args, cfg) -> int:
    registry, actor, _ = _load(args, cfg)
    report = bench(actor, registry, _samples(args.manifest), _t_max(args, cfg))
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="restoreplan", description="Sequential tool planning for image restoration.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="degrade a folder of clean PNGs into a manifest")
    p.add_argument("--config")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--cases", help="comma-separated case ids")
    p.add_argument("--n-per-case", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a policy on a manifest")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--provider", choices=("oracle", "proxy", "remote"))
    p.add_argument("--out", required=True)
    p.add_argument("--heldout")
    p.add_argument("--updates", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="restore one image with a trained policy")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--t-max", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("eval", help="run plans over a manifest and write metrics CSV")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--metrics")
    p.add_argument("--t-max", type=int)
    p.add_argument("--out")
    p.add_argument("--plot", help="write an SVG summary plot here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="brute-force best plans (optionally compared with a policy)")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--l-max", type=int)
    p.add_argument("--provider", choices=("oracle", "proxy", "remote"))
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench", help="per-setting runtime, tool invocations and policy forwards")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--t-max", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (InputError, RasterError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ProviderError, TrainingAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
