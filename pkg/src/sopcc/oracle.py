"""Exact ground truth for small instances.

Path failure probabilities under the exponential cost model are tails of a
hypoexponential distribution. :func:`exact_solve` enumerates every simple
start-to-goal path and keeps the best one that meets the chance constraint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import mpmath
import numpy as np

from .instance import Instance, make_rng

MAX_ORACLE_VERTICES = 10
REWARD_TIE_TOL = 1e-12


class UnsupportedConfiguration(ValueError):
    """Raised for equal exponential rates, where the closed form has no meaning."""


class InstanceTooLarge(ValueError):
    pass


def _tail_float(rates: Sequence[float], B: float) -> tuple[float, float]:
    """Closed form in double precision plus the sum of |terms| (cancellation gauge)."""
    total, scale = 0.0, 0.0
    for i, li in enumerate(rates):
        coef = 1.0
        for j, lj in enumerate(rates):
            if j != i:
                coef *= lj / (lj - li)
        term = coef * math.exp(-li * B)
        total += term
        scale += abs(term)
    return total, scale


def _tail_mp(rates: Sequence[float], B: float, dps: int = 60) -> float:
    with mpmath.workdps(dps):
        lam = [mpmath.mpf(x) for x in rates]
        total = mpmath.mpf(0)
        for i, li in enumerate(lam):
            coef = mpmath.mpf(1)
            for j, lj in enumerate(lam):
                if j != i:
                    coef *= lj / (lj - li)
            total += coef * mpmath.exp(-li * B)
        return float(total)


def hypoexp_tail(means: Sequence[float], B: float) -> float:
    """P(X_1 + ... + X_k > B) for independent exponentials with the given means.

    Uses the partial-fraction closed form; when its terms cancel badly (nearly
    equal rates) the same formula is re-evaluated in extended precision.
    """
    means = [float(m) for m in means]
    if not means:
        return 0.0 if B >= 0 else 1.0
    if any(not m > 0 for m in means):
        raise ValueError("means must be positive")
    if B <= 0:
        return 1.0
    rates = [1.0 / m for m in means]
    if len(set(rates)) != len(rates):
        raise UnsupportedConfiguration("hypoexponential tail needs pairwise distinct rates")
    if len(rates) == 1:
        return math.exp(-rates[0] * B)
    p, scale = _tail_float(rates, B)
    if scale > 1e6 or not 0.0 <= p <= 1.0:
        p = _tail_mp(rates, B)
    return min(max(p, 0.0), 1.0)


def mc_tail(means: Sequence[float], B: float, samples: int, rng: np.random.Generator) -> float:
    draws = rng.standard_exponential((samples, len(means))) @ np.asarray(means, dtype=float)
    return float(np.mean(draws > B))


@dataclass
class OracleSolution:
    path: list[int]
    reward: float
    failure_prob: float
    method: str  # "analytic" or "monte-carlo"
    feasible: bool


def path_failure(inst: Instance, path: Sequence[int], B: float, mc_samples: int = 100_000,
                 seed: int = 0) -> tuple[float, str]:
    """Failure probability of ``path`` and how it was obtained."""
    means = [float(inst.lengths[a, b]) for a, b in zip(path[:-1], path[1:])]
    try:
        return hypoexp_tail(means, B), "analytic"
    except UnsupportedConfiguration:
        return mc_tail(means, B, mc_samples, make_rng(seed, len(means))), "monte-carlo"


def _enumerate(inst: Instance, B: float, prune_at: float | None, first: int | None = None):
    """Yield (path, failure, method) for simple start-goal paths.

    A prefix whose own tail already exceeds ``prune_at`` cannot be completed
    within it (adding edges only raises the tail), so it is cut.
    """
    n, s, g = inst.n, inst.start, inst.goal
    L = inst.lengths
    if s == g:
        yield [s], 0.0, "analytic"
        return

    def tail(means):
        try:
            return hypoexp_tail(means, B), True
        except UnsupportedConfiguration:
            return None, False

    def rec(path, means, used):
        u = path[-1]
        for v in range(n):
            if used >> v & 1:
                continue
            if first is not None and len(path) == 1 and v != first:
                continue
            m2 = means + [float(L[u, v])]
            p, exact = tail(m2)
            if v == g:
                yield path + [g], m2, p, exact
                continue
            if prune_at is not None and exact and p > prune_at:
                continue
            yield from rec(path + [v], m2, used | (1 << v))

    yield from rec([s], [], 1 << s)


def exact_solve(inst: Instance, B: float | None = None, P_f: float | None = None,
                mc_samples: int = 100_000, seed: int = 0) -> OracleSolution:
    """Best simple start-goal path with failure probability at most ``P_f``.

    Ties on reward go to the lower failure probability, then the
    lexicographically smaller path. Monte-Carlo estimates (only needed for
    paths with equal edge lengths) must stay below ``P_f`` by one binomial
    standard error.
    """
    if inst.n > MAX_ORACLE_VERTICES:
        raise InstanceTooLarge(f"exact enumeration is capped at {MAX_ORACLE_VERTICES} vertices")
    B = inst.budget if B is None else float(B)
    P_f = inst.p_f if P_f is None else float(P_f)
    best = None
    best_key = None
    for path, means, p, exact in _enumerate(inst, B, P_f):
        method = "analytic"
        margin = 0.0
        if not exact:
            p = mc_tail(means, B, mc_samples, make_rng(seed, len(means)))
            margin = math.sqrt(max(p * (1 - p), 0.25 / mc_samples) / mc_samples)
            method = "monte-carlo"
        if p + margin > P_f:
            continue
        reward = inst.path_reward(path)
        if best is not None:
            if reward < best.reward - REWARD_TIE_TOL:
                continue
            if abs(reward - best.reward) <= REWARD_TIE_TOL and (p, path) >= best_key:
                continue
        best = OracleSolution(path, reward, p, method, True)
        best_key = (p, path)
    if best is not None:
        return best
    direct = [inst.start] if inst.start == inst.goal else [inst.start, inst.goal]
    p, method = path_failure(inst, direct, B, mc_samples, seed)
    return OracleSolution(direct, inst.path_reward(direct), p, method, False)


def first_move_failure(inst: Instance, v: int, B: float | None = None,
                       mc_samples: int = 100_000, seed: int = 0) -> float:
    """Smallest failure probability of any simple path that starts with the move to ``v``."""
    if inst.n > MAX_ORACLE_VERTICES:
        raise InstanceTooLarge(f"exact enumeration is capped at {MAX_ORACLE_VERTICES} vertices")
    if v == inst.start or not 0 <= v < inst.n:
        raise ValueError(f"{v} is not a legal first move")
    B = inst.budget if B is None else float(B)
    best = 1.0
    for path, means, p, exact in _enumerate(inst, B, None, first=v):
        if not exact:
            p = mc_tail(means, B, mc_samples, make_rng(seed, len(means)))
        best = min(best, p)
    return best
