"""Online plan/execute loop and batch evaluation.

A trial starts at the start vertex with the full budget, asks a planner for
the next vertex, traverses the edge with a sampled cost, and repeats until the
goal is reached or the budget is overrun.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .instance import Instance, PathState, make_rng, sample_edge_cost
from .mcts import PlanningComplete, SearchParams, plan_next_vertex
from .rollout import choose_next

WORKERS_ENV = "SOPCC_WORKERS"

CSV_COLUMNS = ["instance", "solver", "n", "B", "P_f", "mean_reward", "failure_rate",
               "mean_plan_time_s", "trials", "seed"]

Planner = Callable[[Instance, PathState, float, np.random.Generator], int]


@dataclass
class TrialRecord:
    path: list[int]
    realized_cost: float
    reward: float
    success: bool
    planning_time_total: float
    per_step_times: list[float]
    seed: int
    instance: str = ""
    solver: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        return cls(**json.loads(line))


class MctsSolver:
    name = "mcts"

    def __init__(self, params: SearchParams | None = None):
        self.params = params or SearchParams()

    def planner(self, inst: Instance) -> Planner:
        def plan(inst, state, budget, rng):
            return plan_next_vertex(inst, state, budget, self.params, rng)
        return plan


class GreedySolver:
    """The rollout policy executed directly, without a tree."""

    name = "rollout-greedy"

    def __init__(self, greedy_prob: float = 0.7):
        self.greedy_prob = greedy_prob

    def planner(self, inst: Instance) -> Planner:
        def plan(inst, state, budget, rng):
            return choose_next(inst, state.visited_mask(inst.n), state.current, budget, rng,
                               self.greedy_prob)
        return plan


class OracleSolver:
    """Executes the exact offline solution; falls back to the direct path when infeasible."""

    name = "oracle"

    def __init__(self, mc_samples: int = 100_000):
        self.mc_samples = mc_samples

    def planner(self, inst: Instance) -> Planner:
        from .oracle import exact_solve

        sol = exact_solve(inst, inst.budget, inst.p_f, self.mc_samples)
        route = sol.path if sol.feasible else [inst.start, inst.goal]

        def plan(inst, state, budget, rng):
            return route[len(state.visited)]
        return plan


def run_trial(inst: Instance, solver, seed: int, instance_name: str = "") -> TrialRecord:
    """One online episode. Planning and traversal draw from separate streams of ``seed``."""
    plan_rng = make_rng(seed, 0)
    cost_rng = make_rng(seed, 1)
    planner = solver.planner(inst) if hasattr(solver, "planner") else solver
    state = PathState.at_start(inst)
    times: list[float] = []
    success = False
    overrun = False
    while True:
        if state.current == inst.goal:
            success = True
            break
        remaining = inst.budget - state.realized_cost
        t0 = time.perf_counter()
        try:
            nxt = planner(inst, state, remaining, plan_rng)
        except PlanningComplete:
            times.append(time.perf_counter() - t0)
            break
        times.append(time.perf_counter() - t0)
        cost = sample_edge_cost(inst, state.current, nxt, cost_rng)
        if state.realized_cost + cost > inst.budget:
            # budget overrun mid-traversal: the vertex is never reached
            state = PathState(state.visited, state.realized_cost + cost, state.collected_reward)
            overrun = True
            break
        state = state.advance(inst, nxt, cost)
    return TrialRecord(
        path=list(state.visited),
        realized_cost=float(state.realized_cost),
        reward=float(state.collected_reward),
        success=success and not overrun,
        planning_time_total=float(sum(times)),
        per_step_times=times,
        seed=int(seed),
        instance=instance_name,
        solver=getattr(solver, "name", ""),
    )


def trial_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(index),)).generate_state(1, np.uint64)[0] >> 1)


def default_workers() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def _run_job(job):
    inst, solver, seed, name = job
    return run_trial(inst, solver, seed, name)


def run_batch(
    instances: Sequence[Instance] | Instance,
    solver,
    seed: int,
    trials: int | None = None,
    workers: int | None = None,
    names: Sequence[str] | None = None,
) -> list[TrialRecord]:
    """Run trials and return their records in trial-index order.

    Either pass a list of instances (one trial each) or a single instance and
    ``trials``. Trial ``k`` uses :func:`trial_seed` ``(seed, k)``, so results do
    not depend on ``workers``.
    """
    if isinstance(instances, Instance):
        if trials is None or trials < 1:
            raise ValueError("trials must be at least 1")
        insts = [instances] * trials
    else:
        insts = list(instances)
        if not insts:
            raise ValueError("no instances")
    if names is None:
        names = [str(i) for i in range(len(insts))] if len(set(map(id, insts))) > 1 else ["0"] * len(insts)
    jobs = [(inst, solver, trial_seed(seed, k), names[k]) for k, inst in enumerate(insts)]
    workers = default_workers() if workers is None else workers
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs, chunksize=1))


@dataclass
class Aggregate:
    mean_reward: float
    failure_rate: float
    mean_plan_time: float
    trials: int
    mean_success_reward: float = field(default=0.0)


def aggregate(records: Iterable[TrialRecord]) -> Aggregate:
    recs = list(records)
    if not recs:
        raise ValueError("no records")
    k = len(recs)
    wins = [r.reward for r in recs if r.success]
    return Aggregate(
        mean_reward=math.fsum(r.reward for r in recs) / k,
        failure_rate=sum(not r.success for r in recs) / k,
        mean_plan_time=math.fsum(r.planning_time_total for r in recs) / k,
        trials=k,
        mean_success_reward=math.fsum(wins) / len(wins) if wins else 0.0,
    )


def csv_row(set_name: str, solver_name: str, inst: Instance, agg: Aggregate, seed: int,
            p_f: float | None = None) -> dict:
    return {
        "instance": set_name,
        "solver": solver_name,
        "n": inst.n,
        "B": repr(inst.budget),
        "P_f": repr(inst.p_f if p_f is None else p_f),
        "mean_reward": repr(agg.mean_reward),
        "failure_rate": repr(agg.failure_rate),
        "mean_plan_time_s": repr(agg.mean_plan_time),
        "trials": agg.trials,
        "seed": seed,
    }


def write_records(path: str | Path, records: Iterable[TrialRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list[TrialRecord]:
    with open(path, encoding="utf-8") as fh:
        return [TrialRecord.from_json(line) for line in fh if line.strip()]


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str] = CSV_COLUMNS) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)
