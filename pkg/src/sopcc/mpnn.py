"""Edge-conditioned message-passing network predicting per-vertex Q or F.

Each vertex starts from an 8-attribute vector (see ``ATTRIBUTES``) projected to
width ``D``. Each of the ``T = 3`` layers sends vertex ``w`` the message
``A(e_vw) h_w`` to every other vertex ``v``, where the ``D x D`` matrix
``A(e)`` comes from a small MLP of the scalar edge distance, sums the messages
and feeds them as input to a GRU whose hidden state is ``h_v``. A readout MLP
maps the final embedding of every vertex to one number: identity head for Q,
sigmoid head for F.

The edge MLP has the form ``A(e) = sum_k relu(e w1_k + b1_k) W2_k + B2``, so the
message sum factorizes as ``sum_k W2_k^T (G_k h)`` with ``G_k[v, w] =
relu(e_vw w1_k + b1_k)``; the ``n^2 D^2`` tensor of per-edge matrices is never
built.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .instance import Instance, PathState
from .mcts import SearchParams, plan_next_vertex
from .neural import (GruParams, gru_step, gru_step_backward, load_arrays, save_arrays,
                     sigmoid)

ATTRIBUTES = ("visited", "x", "y", "reward", "budget", "start", "goal", "current")
ABLATION_GROUPS = {
    "start": ("start",), "goal": ("goal",), "current": ("current",),
    "start-goal": ("start", "goal"),
}
HEADS = ("q", "f")


def parse_mask(names: Iterable[str]) -> tuple[str, ...]:
    out = []
    for name in names:
        for attr in ABLATION_GROUPS.get(name, (name,)):
            if attr not in ATTRIBUTES:
                raise ValueError(f"unknown attribute {attr!r}; choose from {ATTRIBUTES}")
            if attr not in out:
                out.append(attr)
    return tuple(sorted(out, key=ATTRIBUTES.index))


@dataclass
class FeatureGraph:
    node_attrs: np.ndarray  # (n, 8)
    edge_attrs: np.ndarray  # (n, n) Euclidean distances

    @property
    def n(self) -> int:
        return self.node_attrs.shape[0]


def euclidean(coords: np.ndarray) -> np.ndarray:
    return np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))


def encode_state(inst: Instance, visited, current: int, remaining_budget: float,
                 mask: Sequence[str] = (), edges: np.ndarray | None = None) -> FeatureGraph:
    """Node attributes for a planning state; ``mask`` names columns to zero out."""
    n = inst.n
    if not 0 <= current < n:
        raise ValueError(f"current vertex {current} out of range")
    X = np.zeros((n, len(ATTRIBUTES)))
    X[list(visited), 0] = 1.0
    X[current, 0] = 1.0
    X[:, 1:3] = inst.coords
    X[:, 3] = inst.rewards
    X[:, 4] = remaining_budget
    X[inst.start, 5] = 1.0
    X[inst.goal, 6] = 1.0
    X[current, 7] = 1.0
    for name in parse_mask(mask):
        X[:, ATTRIBUTES.index(name)] = 0.0
    E = euclidean(inst.coords) if edges is None else edges
    return FeatureGraph(X, E)


@dataclass
class MpnnModel:
    """Weights of one network; ``params`` maps names to arrays."""

    params: dict
    head: str = "q"
    D: int = 32
    T: int = 3
    K: int = 16
    H: int = 32
    mask: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.T != 3:
            raise ValueError("the architecture uses exactly three message-passing layers")
        self.mask = parse_mask(self.mask)
        expected = self.shapes(self.D, self.K, self.H, self.T)
        for k, shape in expected.items():
            if k not in self.params:
                raise ValueError(f"missing parameter {k}")
            if tuple(self.params[k].shape) != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    @staticmethod
    def shapes(D: int, K: int, H: int, T: int = 3) -> dict:
        out = {"in.W": (len(ATTRIBUTES), D), "in.b": (D,)}
        for t in range(T):
            out[f"e{t}.w1"] = (K,)
            out[f"e{t}.b1"] = (K,)
            out[f"e{t}.W2"] = (K, D, D)
            out[f"e{t}.B2"] = (D, D)
            out[f"gru{t}.W"] = (D, 3 * D)
            out[f"gru{t}.U"] = (D, 3 * D)
            out[f"gru{t}.b"] = (3 * D,)
        out.update({"out.W0": (D, H), "out.b0": (H,), "out.W1": (H, 1), "out.b1": (1,)})
        return out

    @classmethod
    def init(cls, head: str, rng: np.random.Generator, D: int = 32, K: int = 16, H: int = 32,
             mask: Sequence[str] = ()) -> "MpnnModel":
        p = {
            "in.W": rng.normal(0, 1 / np.sqrt(len(ATTRIBUTES)), (len(ATTRIBUTES), D)),
            "in.b": np.zeros(D),
        }
        for t in range(3):
            p[f"e{t}.w1"] = rng.normal(0, 1.0, K)
            p[f"e{t}.b1"] = rng.normal(0, 0.5, K)
            # messages are sums over ~n neighbours; start them small
            p[f"e{t}.W2"] = rng.normal(0, 0.1 / np.sqrt(K * D), (K, D, D))
            p[f"e{t}.B2"] = rng.normal(0, 0.1 / np.sqrt(D), (D, D))
            gru = GruParams.init(D, rng)
            p[f"gru{t}.W"], p[f"gru{t}.U"], p[f"gru{t}.b"] = gru.W, gru.U, gru.b
        p["out.W0"] = rng.normal(0, np.sqrt(2.0 / D), (D, H))
        p["out.b0"] = np.zeros(H)
        p["out.W1"] = rng.normal(0, np.sqrt(1.0 / H), (H, 1))
        p["out.b1"] = np.zeros(1)
        return cls(p, head=head, D=D, K=K, H=H, mask=tuple(mask))

    def gru(self, t: int) -> GruParams:
        p = self.params
        return GruParams(p[f"gru{t}.W"], p[f"gru{t}.U"], p[f"gru{t}.b"])

    # ------------------------------------------------------------ forward

    def edge_hidden(self, E: np.ndarray) -> list:
        """Per layer ``(pre, G)`` with ``G[..., v, w, k]``; the diagonal is zeroed."""
        n = E.shape[-1]
        off = ~np.eye(n, dtype=bool)
        out = []
        for t in range(self.T):
            pre = E[..., None] * self.params[f"e{t}.w1"] + self.params[f"e{t}.b1"]
            G = np.maximum(pre, 0.0) * off[..., None]
            out.append((pre, G))
        return out

    def forward_batch(self, X: np.ndarray, E: np.ndarray, edge=None, return_cache: bool = False):
        """Outputs ``(B, n)`` for node attributes ``(B, n, 8)`` and edges ``(B, n, n)``."""
        p = self.params
        D, K = self.D, self.K
        B, n, _ = X.shape
        if self.mask:
            X = X.copy()
            X[..., [ATTRIBUTES.index(a) for a in self.mask]] = 0.0
        if edge is None:
            edge = self.edge_hidden(E)
        h = X @ p["in.W"] + p["in.b"]
        caches = []
        for t in range(self.T):
            pre, G = edge[t]
            Gt = np.swapaxes(G, -1, -2).reshape(B, n * K, n)  # [v*K + k, w]
            P = (Gt @ h).reshape(B, n, K * D)                 # [v, k*D + j]
            S = h.sum(axis=1, keepdims=True) - h
            m = P @ p[f"e{t}.W2"].reshape(K * D, D) + S @ p[f"e{t}.B2"]
            h_new, gcache = gru_step(self.gru(t), h, m, return_cache=True)
            caches.append((h, pre, G, Gt, P, S, gcache))
            h = h_new
        z1 = h @ p["out.W0"] + p["out.b0"]
        a1 = np.maximum(z1, 0.0)
        y = (a1 @ p["out.W1"] + p["out.b1"])[..., 0]
        if self.head == "f":
            y = sigmoid(y)
        if return_cache:
            return y, (X, E, caches, h, z1, a1, y)
        return y

    def forward(self, g: FeatureGraph, edge=None) -> np.ndarray:
        """Per-vertex outputs for one graph."""
        if g.node_attrs.shape[1] != len(ATTRIBUTES):
            raise ValueError("node attributes must have 8 columns")
        if edge is not None:
            edge = [(pre[None], G[None]) for pre, G in edge]
        return self.forward_batch(g.node_attrs[None], g.edge_attrs[None], edge=edge)[0]

    # ------------------------------------------------------------ backward

    def backward(self, cache, dy: np.ndarray) -> dict:
        """Gradients of ``sum(dy * y)`` with respect to every parameter."""
        p = self.params
        D, K = self.D, self.K
        X, E, caches, h, z1, a1, y = cache
        B, n, _ = X.shape
        grads = {}
        if self.head == "f":
            dy = dy * y * (1.0 - y)
        dy = dy[..., None]
        grads["out.W1"] = a1.reshape(-1, self.H).T @ dy.reshape(-1, 1)
        grads["out.b1"] = dy.reshape(-1, 1).sum(axis=0)
        dz1 = (dy @ p["out.W1"].T) * (z1 > 0)
        grads["out.W0"] = h.reshape(-1, D).T @ dz1.reshape(-1, self.H)
        grads["out.b0"] = dz1.reshape(-1, self.H).sum(axis=0)
        dh = dz1 @ p["out.W0"].T
        off = ~np.eye(n, dtype=bool)
        for t in reversed(range(self.T)):
            h_prev, pre, G, Gt, P, S, gcache = caches[t]
            dh_prev, dm, gg = gru_step_backward(self.gru(t), gcache, dh)
            for k, v in gg.items():
                grads[f"gru{t}.{k}"] = v
            W2r = p[f"e{t}.W2"].reshape(K * D, D)
            dm2 = dm.reshape(-1, D)
            grads[f"e{t}.W2"] = (P.reshape(-1, K * D).T @ dm2).reshape(K, D, D)
            grads[f"e{t}.B2"] = S.reshape(-1, D).T @ dm2
            dS = dm @ p[f"e{t}.B2"].T
            dh_prev = dh_prev + dS.sum(axis=1, keepdims=True) - dS
            dP = (dm @ W2r.T).reshape(B, n * K, D)
            dh_prev = dh_prev + np.swapaxes(Gt, -1, -2) @ dP
            dGt = dP @ np.swapaxes(h_prev, -1, -2)              # (B, n*K, n)
            dG = np.swapaxes(dGt.reshape(B, n, K, n), -1, -2)    # (B, n, n, K)
            dpre = dG * (pre > 0) * off[..., None]
            grads[f"e{t}.w1"] = (dpre * E[..., None]).sum(axis=(0, 1, 2))
            grads[f"e{t}.b1"] = dpre.sum(axis=(0, 1, 2))
            dh = dh_prev
        grads["in.W"] = X.reshape(-1, X.shape[-1]).T @ dh.reshape(-1, D)
        grads["in.b"] = dh.reshape(-1, D).sum(axis=0)
        return grads

    # ------------------------------------------------------------ io

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"kind": f"{self.head}-net", "head": self.head, "D": self.D, "T": self.T,
                "K": self.K, "H": self.H, "mask": list(self.mask),
                "head_activation": "sigmoid" if self.head == "f" else "identity"}
        meta.update(self.meta)
        if extra:
            meta.update(extra)
        save_arrays(path, self.params, meta)

    @classmethod
    def load(cls, path: str | Path) -> "MpnnModel":
        params, meta = load_arrays(path)
        model = cls(params, head=meta["head"], D=meta["D"], T=meta["T"], K=meta["K"], H=meta["H"],
                    mask=tuple(meta.get("mask", ())))
        model.meta = {k: v for k, v in meta.items()
                      if k not in ("kind", "head", "D", "T", "K", "H", "mask", "head_activation")}
        return model


def node_state(inst: Instance, state: PathState, budget: float, path: Sequence[int]):
    """Visited set, current vertex and planned remaining budget after ``path``."""
    visited = list(state.visited) + list(path)
    u = state.current
    remaining = float(budget)
    for v in path:
        remaining -= inst.lengths[u, v]
        u = v
    return visited, u, remaining


def evaluate_children(q_net: MpnnModel, f_net: MpnnModel, inst: Instance, visited, current: int,
                      remaining_budget: float, children: Sequence[int], edges=None):
    """(Q, F) for ``children`` from one forward pass of each network on the parent state."""
    if q_net is None or f_net is None:
        raise RuntimeError("both networks must be loaded")
    if not len(children):
        raise ValueError("no children to evaluate")
    vis = set(visited) | {current}
    if any(c in vis for c in children):
        raise ValueError("children must be unvisited")
    g = encode_state(inst, visited, current, remaining_budget)
    qe, fe = (None, None) if edges is None else edges
    Q = q_net.forward(g, qe)
    F = f_net.forward(g, fe)
    idx = list(children)
    return Q[idx], F[idx]


class PairedNets:
    """Inference-only view of a Q-net and an F-net evaluated in one stacked pass.

    The two networks keep separate weights; stacking them along a leading axis
    only lets numpy run both forward passes through the same calls. Inference
    runs in ``dtype`` (single precision by default, about twice as fast as
    double and far more precise than the labels the nets were fitted to).
    """

    def __init__(self, q_net: MpnnModel, f_net: MpnnModel, dtype=np.float32):
        if (q_net.D, q_net.K, q_net.H) != (f_net.D, f_net.K, f_net.H):
            raise ValueError("paired networks must share D, K and H")
        if q_net.head != "q" or f_net.head != "f":
            raise ValueError("expected a q-head and an f-head network")
        self.q_net, self.f_net = q_net, f_net
        self.D, self.K = q_net.D, q_net.K
        self.w = {k: np.stack([q_net.params[k], f_net.params[k]]) for k in q_net.params}
        D, K = self.D, self.K
        for t in range(3):
            self.w[f"e{t}.W2r"] = self.w[f"e{t}.W2"].reshape(2, K * D, D)
            self.w[f"gru{t}.Uzr"] = np.ascontiguousarray(self.w[f"gru{t}.U"][:, :, :2 * D])
            self.w[f"gru{t}.Uc"] = np.ascontiguousarray(self.w[f"gru{t}.U"][:, :, 2 * D:])
        self.w = {k: v.astype(dtype) for k, v in self.w.items()}
        self.dtype = dtype
        self.cols = [[ATTRIBUTES.index(a) for a in net.mask] for net in (q_net, f_net)]

    def edge_hidden(self, E: np.ndarray) -> list:
        """Per layer ``(2, n*K, n)`` matrices ``G[net, v*K + k, w]``."""
        n = E.shape[0]
        qe, fe = self.q_net.edge_hidden(E), self.f_net.edge_hidden(E)
        return [np.stack([np.swapaxes(a[1], -1, -2).reshape(n * self.K, n),
                          np.swapaxes(b[1], -1, -2).reshape(n * self.K, n)]).astype(self.dtype)
                for a, b in zip(qe, fe)]

    def forward(self, X: np.ndarray, edge: list) -> tuple[np.ndarray, np.ndarray]:
        w, D, K = self.w, self.D, self.K
        n = X.shape[0]
        Xs = np.stack([X, X]).astype(self.dtype)
        for i, cols in enumerate(self.cols):
            if cols:
                Xs[i][:, cols] = 0.0
        h = Xs @ w["in.W"] + w["in.b"][:, None, :]
        for t in range(3):
            P = (edge[t] @ h).reshape(2, n, K * D)
            S = h.sum(axis=1, keepdims=True) - h
            m = P @ w[f"e{t}.W2r"] + S @ w[f"e{t}.B2"]
            gx = m @ w[f"gru{t}.W"] + w[f"gru{t}.b"][:, None, :]
            zr = sigmoid(gx[..., :2 * D] + h @ w[f"gru{t}.Uzr"])
            c = np.tanh(gx[..., 2 * D:] + (zr[..., D:] * h) @ w[f"gru{t}.Uc"])
            h = h + zr[..., :D] * (c - h)
        a1 = np.maximum(h @ w["out.W0"] + w["out.b0"][:, None, :], 0.0)
        y = (a1 @ w["out.W1"])[..., 0] + w["out.b1"]
        return y[0].astype(float), sigmoid(y[1]).astype(float)


class GnnEvaluator:
    """Tree evaluator backed by a Q-net and an F-net.

    Edge hidden activations depend only on the instance geometry, so they are
    cached per instance. Children whose planned budget is already negative are
    forced to F = 1 by the search, so when every child is in that state the
    networks are not consulted.
    """

    def __init__(self, q_net: MpnnModel, f_net: MpnnModel, dtype=np.float32):
        self.q_net = q_net
        self.dtype = dtype
        self.f_net = f_net
        self.calls = 0
        self._pair = None
        self._inst = None
        self._edges = None

    def _edge_cache(self, inst: Instance):
        if self._pair is None:
            self._pair = PairedNets(self.q_net, self.f_net, self.dtype)
        if self._inst is not inst:
            self._edges = self._pair.edge_hidden(euclidean(inst.coords))
            self._inst = inst
        return self._edges

    def __call__(self, inst, state, budget, path, children, rng):
        visited, u, remaining = node_state(inst, state, budget, path)
        L = inst.lengths
        if all(remaining - L[u, c] < 0 for c in children):
            return np.zeros(len(children)), np.ones(len(children))
        edges = self._edge_cache(inst)
        self.calls += 1
        X = encode_state(inst, visited, u, remaining, edges=np.empty(0)).node_attrs
        Q, F = self._pair.forward(X, edges)
        idx = list(children)
        return Q[idx], F[idx]

    def __getstate__(self):
        return {"q_net": self.q_net, "f_net": self.f_net, "dtype": self.dtype, "calls": 0,
                "_pair": None, "_inst": None, "_edges": None}


class GnnMctsSolver:
    name = "gnn-mcts"

    def __init__(self, q_net: MpnnModel, f_net: MpnnModel, params: SearchParams | None = None):
        params = params or SearchParams()
        self.params = SearchParams(expansions=params.expansions, z=params.z,
                                   evaluator=GnnEvaluator(q_net, f_net),
                                   rollout=params.rollout, p_f=params.p_f)

    def planner(self, inst: Instance):
        def plan(inst, state, budget, rng):
            return plan_next_vertex(inst, state, budget, self.params, rng)
        return plan
