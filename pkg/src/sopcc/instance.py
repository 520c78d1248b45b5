"""Problem instances, the stochastic edge-cost model and seeded generation.

An instance is a complete graph on ``n`` vertices with nonnegative vertex
rewards, a start and a goal vertex, a travel budget and a failure bound.
Traversing edge ``(i, j)`` costs an exponential random variable whose mean is
the deterministic length ``lengths[i, j]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

COST_MODELS = ("exponential",)


class InvalidInstanceError(ValueError):
    pass


class InvalidEdgeError(ValueError):
    pass


class InvalidPathError(ValueError):
    pass


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a PCG64 generator for ``(seed, stream)``.

    Distinct streams of the same seed are independent (they are spawned
    children of one ``SeedSequence``), so per-trial or per-worker streams can
    be handed out without coordination.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Instance:
    """Immutable problem instance.

    ``lengths`` is stored rather than derived from ``coords`` so that
    non-Euclidean instances load unchanged; :func:`generate_instance` fills it
    with Euclidean distances.
    """

    coords: np.ndarray
    rewards: np.ndarray
    start: int
    goal: int
    budget: float
    p_f: float
    lengths: np.ndarray = None
    cost_model: str = "exponential"
    n: int = field(init=False)

    def __post_init__(self):
        coords = _frozen(self.coords)
        rewards = _frozen(self.rewards)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidInstanceError(f"coords must be (n, 2), got {coords.shape}")
        n = coords.shape[0]
        if self.lengths is None:
            lengths = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
        else:
            lengths = np.array(self.lengths, dtype=float)
        lengths = _frozen(lengths)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "start", int(self.start))
        object.__setattr__(self, "goal", int(self.goal))
        object.__setattr__(self, "budget", float(self.budget))
        object.__setattr__(self, "p_f", float(self.p_f))
        object.__setattr__(self, "n", n)
        self.validate()

    def validate(self) -> None:
        n = self.n
        if n < 2:
            raise InvalidInstanceError("an instance needs at least 2 vertices")
        if self.rewards.shape != (n,):
            raise InvalidInstanceError("rewards must have one entry per vertex")
        if np.any(self.rewards < 0) or not np.all(np.isfinite(self.rewards)):
            raise InvalidInstanceError("rewards must be finite and nonnegative")
        L = self.lengths
        if L.shape != (n, n):
            raise InvalidInstanceError(f"lengths must be ({n}, {n}), got {L.shape}")
        if not np.all(np.isfinite(L)):
            raise InvalidInstanceError("lengths must be finite")
        if not np.array_equal(L, L.T):
            raise InvalidInstanceError("lengths must be symmetric")
        if np.any(np.diag(L) != 0):
            raise InvalidInstanceError("lengths must have a zero diagonal")
        off = L[~np.eye(n, dtype=bool)]
        if np.any(off <= 0):
            raise InvalidInstanceError("degenerate instance: zero-length edge between distinct vertices")
        if not (0 <= self.start < n and 0 <= self.goal < n):
            raise InvalidInstanceError("start/goal out of range")
        if not self.budget > 0:
            raise InvalidInstanceError("budget must be positive")
        if not 0 < self.p_f < 1:
            raise InvalidInstanceError("p_f must lie in (0, 1)")
        if self.cost_model not in COST_MODELS:
            raise InvalidInstanceError(f"unsupported cost model {self.cost_model!r}")

    def with_params(self, *, budget: float | None = None, p_f: float | None = None) -> "Instance":
        return Instance(
            coords=self.coords,
            rewards=self.rewards,
            start=self.start,
            goal=self.goal,
            budget=self.budget if budget is None else budget,
            p_f=self.p_f if p_f is None else p_f,
            lengths=self.lengths,
            cost_model=self.cost_model,
        )

    def path_reward(self, path: Sequence[int]) -> float:
        """R(P): sum of rewards over the distinct vertices of ``path``."""
        total = 0.0
        for v in dict.fromkeys(path):
            total += float(self.rewards[v])
        return total

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "coords": self.coords.tolist(),
            "rewards": self.rewards.tolist(),
            "start": self.start,
            "goal": self.goal,
            "budget": self.budget,
            "p_f": self.p_f,
            "cost_model": self.cost_model,
            "lengths": self.lengths.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        try:
            inst = cls(
                coords=d["coords"],
                rewards=d["rewards"],
                start=d["start"],
                goal=d["goal"],
                budget=d["budget"],
                p_f=d["p_f"],
                lengths=d.get("lengths"),
                cost_model=d.get("cost_model", "exponential"),
            )
        except KeyError as exc:
            raise InvalidInstanceError(f"missing field {exc}") from None
        if "n" in d and d["n"] != inst.n:
            raise InvalidInstanceError(f"n={d['n']} does not match {inst.n} coordinates")
        return inst

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Instance":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


@dataclass
class PathState:
    """Executed path prefix: visited vertices, realized cost, collected reward."""

    visited: list[int]
    realized_cost: float = 0.0
    collected_reward: float = 0.0

    @classmethod
    def at_start(cls, inst: Instance) -> "PathState":
        return cls([inst.start], 0.0, float(inst.rewards[inst.start]))

    @property
    def current(self) -> int:
        return self.visited[-1]

    def visited_mask(self, n: int) -> np.ndarray:
        mask = np.zeros(n, dtype=bool)
        mask[self.visited] = True
        return mask

    def advance(self, inst: Instance, vertex: int, cost: float) -> "PathState":
        if vertex in self.visited:
            raise InvalidPathError(f"vertex {vertex} already visited")
        if cost < 0:
            raise ValueError("traversal cost must be nonnegative")
        gain = float(inst.rewards[vertex])
        return PathState(self.visited + [vertex], self.realized_cost + cost, self.collected_reward + gain)


def generate_instance(n: int, budget: float, p_f: float, rng: np.random.Generator) -> Instance:
    """Random instance: coords and rewards uniform on [0, 1], Euclidean lengths.

    Start and goal are drawn uniformly without replacement.
    """
    if n < 2:
        raise InvalidInstanceError("an instance needs at least 2 vertices")
    coords = rng.random((n, 2))
    rewards = rng.random(n)
    start, goal = (int(v) for v in rng.choice(n, size=2, replace=False))
    return Instance(coords=coords, rewards=rewards, start=start, goal=goal, budget=budget, p_f=p_f)


def sample_edge_cost(inst: Instance, i: int, j: int, rng: np.random.Generator) -> float:
    if i == j:
        raise InvalidEdgeError(f"no edge from vertex {i} to itself")
    return float(rng.exponential(inst.lengths[i, j]))


def check_simple_path(inst: Instance, path: Sequence[int]) -> None:
    n = inst.n
    for v in path:
        if not 0 <= v < n:
            raise InvalidPathError(f"vertex {v} out of range")
    inner = list(path)
    if len(inner) >= 2 and inner[0] == inner[-1] and inst.start == inst.goal == inner[0]:
        inner = inner[:-1]
    if len(set(inner)) != len(inner):
        raise InvalidPathError(f"path {list(path)} repeats a vertex")


def path_cost_sample(inst: Instance, path: Sequence[int], rng: np.random.Generator) -> float:
    """One sample of C(P): independent edge draws summed in path order."""
    check_simple_path(inst, path)
    total = 0.0
    for a, b in zip(path[:-1], path[1:]):
        total += sample_edge_cost(inst, a, b, rng)
    return total
