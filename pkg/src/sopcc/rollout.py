"""Handcrafted rollout policy and the Monte-Carlo (Q, F) estimator.

The policy walks from the current vertex, at each step choosing among the
unvisited vertices whose expected detour ``L[u, v] + L[v, goal]`` still fits in
the remaining budget: with probability ``greedy_prob`` the one with the best
reward/length ratio, otherwise a uniformly random one. With no candidate left
it heads to the goal. Every traversal subtracts a sampled exponential cost.

All randomness for a run is drawn up front into a fixed layout (see
:class:`RolloutNoise`), which makes the vectorized estimator and the scalar
reference :func:`rollout_once` consume identical numbers, and lets callers
couple runs across budgets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .instance import Instance, InvalidPathError, PathState


@dataclass(frozen=True)
class RolloutParams:
    S: int = 100
    greedy_prob: float = 0.7

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be at least 1")
        if not 0.0 <= self.greedy_prob <= 1.0:
            raise ValueError("greedy_prob must lie in [0, 1]")


@dataclass(frozen=True)
class RolloutEstimate:
    Q: float
    F: float
    successes: int
    S: int


@dataclass(frozen=True)
class RolloutNoise:
    """Pre-drawn randomness for ``S`` runs of at most ``steps`` traversals.

    ``explore[s, k]`` decides greedy vs random at step k, ``pick[s, k]`` selects
    the random candidate, ``cost[s, k]`` is a unit-mean exponential scaled by
    the traversed edge length.
    """

    explore: np.ndarray
    pick: np.ndarray
    cost: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, S: int, steps: int) -> "RolloutNoise":
        explore = rng.random((S, steps))
        pick = rng.random((S, steps))
        cost = rng.standard_exponential((S, steps))
        return cls(explore, pick, cost)


def _check_plan(inst: Instance, state: PathState, plan: Sequence[int]) -> None:
    seen = set(state.visited)
    for v in plan:
        if not 0 <= v < inst.n:
            raise InvalidPathError(f"vertex {v} out of range")
        if v in seen:
            raise InvalidPathError(f"planned vertex {v} already visited")
        seen.add(v)


def _run_one(inst, visited, u, budget, reward, plan, explore, pick, cost, greedy_prob):
    """Scalar reference run. Mutates ``visited``."""
    L, r, g = inst.lengths, inst.rewards, inst.goal
    k = 0
    for v in plan:
        if u == g or budget < 0:
            break
        budget -= L[u, v] * cost[k]
        if not visited[v]:
            reward += r[v]
        visited[v] = True
        u = v
        k += 1
    n = inst.n
    while u != g and budget >= 0:
        cands = [v for v in range(n) if not visited[v] and v != g and L[u, v] + L[v, g] <= budget]
        if not cands:
            nxt = g
        elif explore[k] < greedy_prob:
            nxt = max(cands, key=lambda v: (r[v] / L[u, v], -v))
        else:
            nxt = cands[min(int(pick[k] * len(cands)), len(cands) - 1)]
        budget -= L[u, nxt] * cost[k]
        if not visited[nxt]:
            reward += r[nxt]
        visited[nxt] = True
        u = nxt
        k += 1
    return float(reward), bool(u == g and budget >= 0)


def rollout_once(
    inst: Instance,
    state: PathState,
    remaining_budget: float,
    rng: np.random.Generator,
    greedy_prob: float = 0.7,
    plan: Sequence[int] = (),
) -> tuple[float, bool]:
    """Simulate the policy once from ``state``.

    ``plan`` lists vertices traversed (with sampled costs) before the policy
    takes over. Returns ``(reward, success)`` where reward is the state's
    collected reward plus everything newly collected; success means the goal
    was reached with nonnegative remaining budget.
    """
    _check_plan(inst, state, plan)
    noise = RolloutNoise.draw(rng, 1, inst.n)
    visited = state.visited_mask(inst.n)
    return _run_one(
        inst, visited, state.current, float(remaining_budget), state.collected_reward,
        plan, noise.explore[0], noise.pick[0], noise.cost[0], greedy_prob,
    )


def simulate(
    inst: Instance,
    visited: np.ndarray,
    current: int,
    remaining_budget: float,
    base_reward: float,
    plan,
    noise: RolloutNoise,
    greedy_prob: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized runs, one per row of ``noise``; same semantics as :func:`rollout_once`.

    ``plan`` is either one vertex sequence shared by all rows or an integer
    array of shape ``(rows, steps)`` giving a forced prefix per row. Rows are
    independent, so stacking the noise of several calls gives the same per-row
    results as separate calls. Returns per-run rewards and success flags.
    """
    L, r, g, n = inst.lengths, inst.rewards, inst.goal, inst.n
    S = noise.cost.shape[0]
    plan = np.asarray(plan, dtype=np.intp)
    if plan.ndim == 1:
        plan = np.broadcast_to(plan, (S, plan.size))
    vis = np.repeat(visited[None, :], S, axis=0)
    u = np.full(S, current, dtype=np.intp)
    b = np.full(S, float(remaining_budget))
    reward = np.full(S, float(base_reward))
    idx = np.arange(S)

    for k in range(plan.shape[1]):
        v = plan[:, k]
        live = (u != g) & (b >= 0)
        b = np.where(live, b - L[u, v] * noise.cost[:, k], b)
        reward = np.where(live & ~vis[idx, v], reward + r[v], reward)
        vis[idx[live], v[live]] = True
        u = np.where(live, v, u)
    k = plan.shape[1]

    to_goal = L[:, g]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(L > 0, r[None, :] / L, np.inf)
    rows = np.flatnonzero((u != g) & (b >= 0))
    while rows.size and k < noise.cost.shape[1]:
        ua = u[rows]
        ba = b[rows]
        feas = ~vis[rows] & (L[ua] + to_goal[None, :] <= ba[:, None])
        feas[:, g] = False
        cnt = feas.sum(axis=1)
        greedy = np.where(feas, ratio[ua], -np.inf).argmax(axis=1)
        nth = np.minimum((noise.pick[rows, k] * cnt).astype(np.intp), np.maximum(cnt - 1, 0))
        rand = (np.cumsum(feas, axis=1) <= nth[:, None]).sum(axis=1)
        rand = np.minimum(rand, n - 1)
        nxt = np.where(cnt == 0, g, np.where(noise.explore[rows, k] < greedy_prob, greedy, rand))
        b[rows] = ba - L[ua, nxt] * noise.cost[rows, k]
        reward[rows] += np.where(vis[rows, nxt], 0.0, r[nxt])
        vis[rows, nxt] = True
        u[rows] = nxt
        rows = rows[(nxt != g) & (b[rows] >= 0)]
        k += 1
    success = (u == g) & (b >= 0)
    return reward, success


def summarize(reward: np.ndarray, success: np.ndarray) -> RolloutEstimate:
    S = int(success.size)
    wins = int(success.sum())
    Q = float(reward[success].mean()) if wins else 0.0
    return RolloutEstimate(Q=Q, F=(S - wins) / S, successes=wins, S=S)


def estimate_qf(
    inst: Instance,
    state: PathState,
    remaining_budget: float,
    params: RolloutParams,
    rng: np.random.Generator,
    plan: Sequence[int] = (),
) -> RolloutEstimate:
    """F = failed runs / S; Q = mean reward over successful runs (0 if none)."""
    _check_plan(inst, state, plan)
    noise = RolloutNoise.draw(rng, params.S, inst.n)
    reward, success = simulate(
        inst, state.visited_mask(inst.n), state.current, remaining_budget,
        state.collected_reward, plan, noise, params.greedy_prob,
    )
    return summarize(reward, success)


def choose_next(inst: Instance, visited: np.ndarray, u: int, budget: float, rng: np.random.Generator,
                greedy_prob: float = 0.7) -> int:
    """One decision of the policy from real state; used by the policy-only baseline."""
    L, r, g = inst.lengths, inst.rewards, inst.goal
    cands = [v for v in range(inst.n) if not visited[v] and v != g and L[u, v] + L[v, g] <= budget]
    explore, pick = rng.random(2)
    if not cands:
        return g
    if explore < greedy_prob:
        return max(cands, key=lambda v: (r[v] / L[u, v], -v))
    return cands[min(int(pick * len(cands)), len(cands) - 1)]
