"""Small dense numerical kernel: MLP, GRU cell, masked MSE, Adam, checkpoints.

Everything works on float64 numpy arrays in row-vector convention
(``y = x @ W + b``) and broadcasts over leading batch axes. Backward passes
are written out by hand per layer; ``tests/test_neural.py`` checks every one
against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit as sigmoid

ACTIVATIONS = ("relu", "sigmoid", "identity")


class TrainingDiverged(RuntimeError):
    pass


def _act(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(y, pre, kind, dy):
    if kind == "relu":
        return dy * (pre > 0)
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    return dy


# ---------------------------------------------------------------- GRU

@dataclass
class GruParams:
    """Gate weights fused column-wise as [update | reset | candidate].

    ``W`` acts on the input, ``U`` on the hidden state; both are ``(D, 3D)``.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    @property
    def D(self) -> int:
        return self.U.shape[0]

    @classmethod
    def init(cls, D: int, rng: np.random.Generator, D_in: int | None = None) -> "GruParams":
        D_in = D if D_in is None else D_in
        W = rng.normal(0.0, 1.0 / np.sqrt(D_in), (D_in, 3 * D))
        U = rng.normal(0.0, 1.0 / np.sqrt(D), (D, 3 * D))
        return cls(W, U, np.zeros(3 * D))

    def arrays(self) -> dict:
        return {"W": self.W, "U": self.U, "b": self.b}


def gru_step(p: GruParams, h: np.ndarray, x: np.ndarray, return_cache: bool = False):
    """h' = (1 - z) h + z tanh(x Wh + (r h) Uh + bh), z/r the sigmoid gates."""
    D = p.D
    if h.shape[-1] != D or x.shape[-1] != p.W.shape[0]:
        raise ValueError(f"GRU expects hidden {D} and input {p.W.shape[0]}, got {h.shape} and {x.shape}")
    gx = x @ p.W + p.b
    gh = h @ p.U[:, :2 * D]
    z = sigmoid(gx[..., :D] + gh[..., :D])
    r = sigmoid(gx[..., D:2 * D] + gh[..., D:])
    rh = r * h
    c = np.tanh(gx[..., 2 * D:] + rh @ p.U[:, 2 * D:])
    out = h + z * (c - h)
    if return_cache:
        return out, (h, x, z, r, rh, c)
    return out


def gru_step_backward(p: GruParams, cache, dout):
    """Return ``(dh, dx, grads)`` for upstream gradient ``dout``."""
    h, x, z, r, rh, c = cache
    D = p.D
    dz = dout * (c - h)
    dc = dout * z
    dh = dout * (1.0 - z)
    dc_pre = dc * (1.0 - c * c)
    Uc = p.U[:, 2 * D:]
    drh = dc_pre @ Uc.T
    dr = drh * h
    dh = dh + drh * r
    dz_pre = dz * z * (1.0 - z)
    dr_pre = dr * r * (1.0 - r)
    dgx = np.concatenate([dz_pre, dr_pre, dc_pre], axis=-1)
    dgh = np.concatenate([dz_pre, dr_pre], axis=-1)
    dx = dgx @ p.W.T
    dh = dh + dgh @ p.U[:, :2 * D].T
    x2 = x.reshape(-1, x.shape[-1])
    h2 = h.reshape(-1, D)
    dW = x2.T @ dgx.reshape(-1, 3 * D)
    dU = np.empty_like(p.U)
    dU[:, :2 * D] = h2.T @ dgh.reshape(-1, 2 * D)
    dU[:, 2 * D:] = rh.reshape(-1, D).T @ dc_pre.reshape(-1, D)
    db = dgx.reshape(-1, 3 * D).sum(axis=0)
    return dh, dx, {"W": dW, "U": dU, "b": db}


# ---------------------------------------------------------------- MLP

@dataclass
class MlpParams:
    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @classmethod
    def init(cls, sizes, activations, rng: np.random.Generator) -> "MlpParams":
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0.0, np.sqrt(2.0 / (a + b)), (a, b)))
            bs.append(np.zeros(b))
        return cls(ws, bs, list(activations))

    def arrays(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out


def mlp_forward(p: MlpParams, x: np.ndarray, return_cache: bool = False):
    if x.shape[-1] != p.weights[0].shape[0]:
        raise ValueError(f"MLP expects input width {p.weights[0].shape[0]}, got {x.shape[-1]}")
    cache = []
    for W, b, act in zip(p.weights, p.biases, p.activations):
        pre = x @ W + b
        y = _act(pre, act)
        cache.append((x, pre, y))
        x = y
    if return_cache:
        return x, cache
    return x


def mlp_backward(p: MlpParams, cache, dout):
    grads = {}
    for i in reversed(range(len(p.weights))):
        x, pre, y = cache[i]
        dpre = _act_grad(y, pre, p.activations[i], dout)
        grads[f"W{i}"] = x.reshape(-1, x.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
        grads[f"b{i}"] = dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)
        dout = dpre @ p.weights[i].T
    return dout, grads


# ---------------------------------------------------------------- loss

def mse_loss(pred, target, mask) -> float:
    """Mean squared error over entries with mask 1; 0 when nothing is masked in."""
    pred, target, mask = (np.asarray(a, dtype=float) for a in (pred, target, mask))
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError("pred, target and mask must share a shape")
    k = mask.sum()
    if k == 0:
        return 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        return float((mask * (pred - target) ** 2).sum() / k)


def mse_grad(pred, target, mask) -> np.ndarray:
    k = mask.sum()
    if k == 0:
        return np.zeros_like(pred)
    return 2.0 * mask * (pred - target) / k


# ---------------------------------------------------------------- Adam

class Adam:
    """Bias-corrected Adam over a dict of named arrays, updated in place."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for {k}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: dict | None, params: dict, grads: dict, lr=1e-3, beta1=0.9, beta2=0.999,
              eps=1e-8):
    """Functional form: returns ``(new_params, new_state)`` without mutating inputs."""
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    opt = Adam(params, lr, beta1, beta2, eps)
    if state is not None:
        opt.m = {k: np.array(v) for k, v in state["m"].items()}
        opt.v = {k: np.array(v) for k, v in state["v"].items()}
        opt.t = state["t"]
    opt.step(grads)
    return opt.params, {"m": opt.m, "v": opt.v, "t": opt.t}


# ---------------------------------------------------------------- checkpoints

def save_arrays(path: str | Path, arrays: dict, meta: dict) -> None:
    """JSON checkpoint: shape plus flat values per named array, 17 significant digits."""
    body = {
        "meta": meta,
        "params": {
            k: {"shape": list(v.shape), "values": [float(f"{x:.17g}") for x in np.ravel(v)]}
            for k, v in arrays.items()
        },
    }
    Path(path).write_text(json.dumps(body), encoding="utf-8")


def load_arrays(path: str | Path) -> tuple[dict, dict]:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    arrays = {}
    for k, spec in body["params"].items():
        a = np.array(spec["values"], dtype=float)
        if a.size != int(np.prod(spec["shape"])):
            raise ValueError(f"checkpoint entry {k}: {a.size} values for shape {spec['shape']}")
        arrays[k] = a.reshape(spec["shape"])
    return arrays, body["meta"]
