"""Exhaustive search over tool sequences, used as ground truth for plans."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .raster import as_raster
from .reward import RewardProvider
from .tools import ToolSpec, apply_tool

DEFAULT_BUDGET = 10 ** 6


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class OracleResult:
    sequence: tuple[int, ...]
    score: float
    image: np.ndarray
    evaluated: int
    applications: int
    table: dict | None = None


def n_sequences(n_tools: int, l_max: int) -> int:
    return sum(n_tools ** k for k in range(l_max + 1))


def _tools(registry):
    return [t for t in registry if not t.is_stop]


def best_sequence(degraded: np.ndarray, registry: list[ToolSpec], l_max: int, scorer: RewardProvider,
                  budget: int = DEFAULT_BUDGET, keep_table: bool = False) -> OracleResult:
    """Depth-first search over every non-STOP sequence of length 0..l_max.

    Shared prefixes are applied once. Among equal scores the
    lexicographically smallest index tuple wins, and the empty plan sorts
    first. ``keep_table`` records the score of every sequence.
    """
    if l_max < 0:
        raise ValueError("l_max must be >= 0")
    tools = _tools(registry)
    n = len(tools)
    if n ** l_max > budget:
        raise BudgetExceeded(f"{n}^{l_max} = {n ** l_max} sequences exceed the budget of {budget}")
    root = as_raster(degraded)
    table = {} if keep_table else None
    best = [(), float(scorer.score(root)), root]
    counters = [1, 0]
    if table is not None:
        table[()] = best[1]

    def visit(prefix, img):
        for t in tools:
            seq = prefix + (t.index,)
            out = apply_tool(t, img)
            counters[1] += 1
            s = float(scorer.score(out))
            counters[0] += 1
            if table is not None:
                table[seq] = s
            # DFS visits sequences in lexicographic order, so strict > keeps the smallest tie
            if s > best[1] or (s == best[1] and seq < best[0]):
                best[:] = [seq, s, out]
            if len(seq) < l_max:
                visit(seq, out)

    if l_max > 0:
        visit((), root)
    return OracleResult(tuple(best[0]), best[1], best[2], counters[0], counters[1], table)


def naive_scores(degraded, registry, l_max, scorer) -> dict:
    """Every sequence evaluated independently from the input (test reference)."""
    from itertools import product
    tools = _tools(registry)
    root = as_raster(degraded)
    out = {}
    for k in range(l_max + 1):
        for seq in product(tools, repeat=k):
            img = root
            for t in seq:
                img = apply_tool(t, img)
            out[tuple(t.index for t in seq)] = float(scorer.score(img))
    return out


@dataclass
class PlanComparison:
    policy_score: float
    oracle_score: float
    gap: float
    exact_match: bool
    within_tolerance: bool
    policy_plan: tuple[int, ...]
    oracle_plan: tuple[int, ...]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy_plan"] = list(self.policy_plan)
        d["oracle_plan"] = list(self.oracle_plan)
        return d


def compare_plan(policy_plan, policy_score: float, oracle: OracleResult, tolerance: float = 0.0) -> PlanComparison:
    """``gap = oracle - policy``; a plan matches when its final score is within
    ``tolerance`` of the oracle's (identical plans always match)."""
    gap = float(oracle.score - policy_score)
    exact = tuple(policy_plan) == tuple(oracle.sequence)
    return PlanComparison(float(policy_score), float(oracle.score), gap, exact,
                          exact or gap <= tolerance, tuple(policy_plan), tuple(oracle.sequence))


def aggregate(reports: list[PlanComparison]) -> dict:
    if not reports:
        return {"n": 0, "mean_gap": float("nan"), "match_rate": float("nan"), "exact_match_rate": float("nan")}
    return {
        "n": len(reports),
        "mean_gap": float(np.mean([r.gap for r in reports])),
        "match_rate": float(np.mean([r.within_tolerance for r in reports])),
        "exact_match_rate": float(np.mean([r.exact_match for r in reports])),
        "mean_policy_score": float(np.mean([r.policy_score for r in reports])),
        "mean_oracle_score": float(np.mean([r.oracle_score for r in reports])),
    }
