"""Tree search with the UCTF tree policy and dual (Q, F) backup.

Each node stores ``Q`` (expected reward collected from its vertex onward,
the vertex's own reward included), ``F`` (estimated probability of overrunning
the budget on a path through it) and the visit count ``N``. Expanding a node
creates every child at once and asks an evaluator for all their (Q, F) pairs
in one call; the evaluator is either Monte-Carlo rollouts or a learned model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .instance import Instance, PathState, make_rng
from .rollout import RolloutNoise, RolloutParams, simulate, summarize


class PlanningComplete(Exception):
    """Raised when no legal next vertex exists."""


class Evaluator(Protocol):
    def __call__(
        self,
        inst: Instance,
        state: PathState,
        budget: float,
        path: Sequence[int],
        children: Sequence[int],
        rng: np.random.Generator,
    ) -> tuple[np.ndarray, np.ndarray]:
        """(Q, F) for every child of the node reached by ``path`` from the root.

        ``state``/``budget`` describe the executed prefix at the root and
        ``path`` the tree vertices after the root vertex, ending at the node
        being expanded.
        """


@dataclass(eq=False)
class TreeNode:
    vertex: int
    parent: TreeNode | None = None
    children: list = field(default_factory=list)
    Q: float = 0.0
    F: float = 1.0
    N: int = 0
    planned_budget: float = 0.0
    visited: int = 0  # bitmask over vertices
    expanded: bool = False

    def path_from_root(self) -> list[int]:
        out = []
        node = self
        while node.parent is not None:
            out.append(node.vertex)
            node = node.parent
        out.reverse()
        return out


@dataclass
class SearchParams:
    expansions: int = 350
    z: float = 0.3
    evaluator: Evaluator | None = None
    rollout: RolloutParams = field(default_factory=RolloutParams)
    p_f: float | None = None

    def __post_init__(self):
        if self.expansions < 1:
            raise ValueError("expansions must be at least 1")
        if self.z < 0:
            raise ValueError("z must be nonnegative")
        if self.p_f is not None and not 0 < self.p_f < 1:
            raise ValueError("p_f must lie in (0, 1)")
        if self.evaluator is None:
            self.evaluator = RolloutEvaluator(self.rollout)


def uctf(Q: float, F: float, n_child: int, n_parent: int, z: float) -> float:
    if not 0.0 <= F <= 1.0:
        raise ValueError(f"F={F} outside [0, 1]")
    if n_child == 0:
        return math.inf
    if n_parent < 1:
        raise ValueError("parent visit count must be positive when the child was visited")
    return Q * (1.0 - F) + z * math.sqrt(math.log(n_parent) / n_child)


def select_leaf(root: TreeNode, z: float) -> TreeNode:
    """Descend by maximal UCTF (ties: lowest vertex) to a node with no children
    or with a not-yet-visited child."""
    node = root
    sqrt = math.sqrt
    while node.children:
        # uctf() inlined: this loop dominates the tree overhead
        log_n = math.log(node.N) if node.N > 0 else 0.0
        best, best_val = None, -math.inf
        for child in node.children:
            if child.N == 0:
                return node
            val = child.Q * (1.0 - child.F) + z * sqrt(log_n / child.N)
            if val > best_val:
                best, best_val = child, val
        node = best
    return node


def is_terminal(node: TreeNode, inst: Instance) -> bool:
    return not _legal_children(node, inst)


def _legal_children(node: TreeNode, inst: Instance) -> list[int]:
    if node.vertex == inst.goal:
        return []
    return [v for v in range(inst.n) if not node.visited >> v & 1]


def expand_all(node: TreeNode, inst: Instance, evaluator: Evaluator, state: PathState,
               budget: float, rng: np.random.Generator) -> list[TreeNode]:
    """Create all children of ``node`` and evaluate them in one evaluator call."""
    if node.expanded:
        raise ValueError("node already expanded")
    verts = _legal_children(node, inst)
    node.expanded = True
    if not verts:
        return []
    Q, F = evaluator(inst, state, budget, node.path_from_root(), verts, rng)
    L = inst.lengths
    for v, q, f in zip(verts, Q, F):
        child = TreeNode(
            vertex=v,
            parent=node,
            Q=float(q),
            F=float(min(max(f, 0.0), 1.0)),
            planned_budget=node.planned_budget - float(L[node.vertex, v]),
            visited=node.visited | (1 << v),
        )
        if child.planned_budget < 0:
            child.F = 1.0
        node.children.append(child)
    return node.children


def backup(leaf: TreeNode, inst: Instance, p_f: float) -> None:
    """Count one evaluation pass through ``leaf`` and its ancestors and
    propagate (Q, F) upward under the chance-constrained rules."""
    r = inst.rewards
    leaf.N += 1
    child = leaf
    parent = leaf.parent
    while parent is not None:
        parent.N += 1
        cand_q = child.Q + float(r[parent.vertex])
        if parent.F <= p_f:
            if child.F <= p_f and cand_q > parent.Q:
                parent.Q, parent.F = cand_q, child.F
        elif child.F < parent.F:
            parent.Q, parent.F = cand_q, child.F
        child, parent = parent, parent.parent


def final_choice(root: TreeNode, p_f: float, goal: int | None = None) -> TreeNode:
    """Best root child by Q(1 - F) among those with F <= p_f, else minimal F.

    In the fallback, a tie on F goes to ``goal`` before the lowest index: when
    every move looks equally doomed, only heading home can still succeed.
    """
    if not root.children:
        raise PlanningComplete("no legal next vertex")
    ok = [c for c in root.children if c.F <= p_f]
    if ok:
        return max(ok, key=lambda c: (c.Q * (1.0 - c.F), -c.vertex))
    return min(root.children, key=lambda c: (c.F, c.vertex != goal, c.vertex))


def search(inst: Instance, state: PathState, budget: float, params: SearchParams,
           rng: np.random.Generator) -> TreeNode:
    """Run ``params.expansions`` select/expand/evaluate/backup iterations; return the root."""
    p_f = inst.p_f if params.p_f is None else params.p_f
    root = TreeNode(
        vertex=state.current,
        planned_budget=float(budget),
        visited=sum(1 << v for v in set(state.visited)),
    )
    for _ in range(params.expansions):
        leaf = select_leaf(root, params.z)
        pending = [c for c in leaf.children if c.N == 0]
        if pending:
            for c in pending:
                backup(c, inst, p_f)
        elif leaf.expanded or is_terminal(leaf, inst):
            if leaf is root:
                break
            backup(leaf, inst, p_f)
        else:
            for c in expand_all(leaf, inst, params.evaluator, state, budget, rng):
                backup(c, inst, p_f)
            if leaf is root and not root.children:
                break
    return root


def plan_next_vertex(inst: Instance, state: PathState, remaining_budget: float,
                     params: SearchParams, rng: np.random.Generator) -> int:
    if state.current == inst.goal:
        raise PlanningComplete("already at the goal")
    root = search(inst, state, remaining_budget, params, rng)
    p_f = inst.p_f if params.p_f is None else params.p_f
    return final_choice(root, p_f, inst.goal).vertex


class RolloutEvaluator:
    """Monte-Carlo evaluator: ``S`` policy runs per child.

    Each run starts at the root with the real remaining budget, traverses the
    tree path to the child with sampled costs, then follows the policy. Every
    child gets its own random stream derived from one draw of ``rng``, so a
    child's estimate equals :func:`~sopcc.rollout.estimate_qf` called with that
    stream and ``plan=path + [child]``, minus the reward already banked before
    the child.
    """

    def __init__(self, params: RolloutParams | None = None):
        self.params = params or RolloutParams()

    def __call__(self, inst, state, budget, path, children, rng):
        seed = int(rng.integers(2**63))
        L, r = inst.lengths, inst.rewards
        visited = state.visited_mask(inst.n)
        prefix_reward = state.collected_reward + float(sum(r[v] for v in path))
        planned = float(budget)
        u = state.current
        for v in path:
            planned -= L[u, v]
            u = v
        Q = np.zeros(len(children))
        F = np.ones(len(children))
        live = [i for i, c in enumerate(children) if planned - L[u, c] >= 0]
        if not live:
            return Q, F
        S = self.params.S
        draws = [RolloutNoise.draw(make_rng(seed, children[i]), S, inst.n) for i in live]
        noise = RolloutNoise(
            explore=np.concatenate([d.explore for d in draws]),
            pick=np.concatenate([d.pick for d in draws]),
            cost=np.concatenate([d.cost for d in draws]),
        )
        plan = np.empty((len(live) * S, len(path) + 1), dtype=np.intp)
        plan[:, :-1] = path
        plan[:, -1] = np.repeat([children[i] for i in live], S)
        rew, ok = simulate(inst, visited, state.current, budget, state.collected_reward,
                           plan, noise, self.params.greedy_prob)
        for j, i in enumerate(live):
            est = summarize(rew[j * S:(j + 1) * S], ok[j * S:(j + 1) * S])
            F[i] = est.F
            Q[i] = est.Q - prefix_reward if est.successes else 0.0
        return Q, F
