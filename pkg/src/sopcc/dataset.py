"""Supervision distilled from rollout-based tree search, and network training.

Every successful plan/execute trial contributes one example per planning
call: the node attributes of the state at the root, plus the (Q, F) of each
root child that the search visited at least ``min_visits`` times.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .executor import default_workers, run_trial, trial_seed
from .instance import Instance, PathState, generate_instance, make_rng
from .mcts import PlanningComplete, SearchParams, final_choice, search
from .mpnn import ATTRIBUTES, MpnnModel, encode_state, euclidean
from .neural import Adam, TrainingDiverged, mse_grad, mse_loss

MIN_VISITS = 5


@dataclass
class TrainingExample:
    X: np.ndarray      # (n, 8) node attributes at the planning root
    q: np.ndarray      # (n,) reward-to-go labels
    f: np.ndarray      # (n,) failure-probability labels
    mask: np.ndarray   # (n,) 1 where the labels are trusted
    instance: int = 0
    step: int = 0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def edges(self) -> np.ndarray:
        return euclidean(self.X[:, 1:3])

    def to_json(self) -> str:
        return json.dumps({
            "n": self.n, "instance": self.instance, "step": self.step,
            "X": self.X.ravel().tolist(), "q": self.q.tolist(), "f": self.f.tolist(),
            "mask": self.mask.astype(int).tolist(),
        })

    @classmethod
    def from_json(cls, line: str) -> "TrainingExample":
        d = json.loads(line)
        n = d["n"]
        return cls(
            X=np.array(d["X"], dtype=float).reshape(n, len(ATTRIBUTES)),
            q=np.array(d["q"], dtype=float),
            f=np.array(d["f"], dtype=float),
            mask=np.array(d["mask"], dtype=float),
            instance=d["instance"],
            step=d["step"],
        )


@dataclass
class DatasetMeta:
    sizes: list
    budget: float = 2.0
    p_f: float = 0.1
    count: int = 0
    seed: int = 0
    success_only: bool = True
    instances: int = 0
    successes: int = 0
    expansions: int = 350
    min_visits: int = MIN_VISITS


def root_example(inst: Instance, state: PathState, budget: float, root, min_visits: int = MIN_VISITS,
                 instance: int = 0, step: int = 0) -> TrainingExample:
    n = inst.n
    X = encode_state(inst, state.visited, state.current, budget, edges=np.empty(0)).node_attrs
    q, f, mask = np.zeros(n), np.zeros(n), np.zeros(n)
    for c in root.children:
        q[c.vertex], f[c.vertex] = c.Q, c.F
        mask[c.vertex] = float(c.N >= min_visits)
    return TrainingExample(X, q, f, mask, instance, step)


class RecordingSolver:
    """Rollout search that keeps the root statistics of every planning call."""

    name = "mcts"

    def __init__(self, params: SearchParams, min_visits: int = MIN_VISITS):
        self.params = params
        self.min_visits = min_visits
        self.examples: list[TrainingExample] = []

    def planner(self, inst: Instance):
        p_f = inst.p_f if self.params.p_f is None else self.params.p_f

        def plan(inst, state, budget, rng):
            if state.current == inst.goal:
                raise PlanningComplete("already at the goal")
            root = search(inst, state, budget, self.params, rng)
            self.examples.append(root_example(inst, state, budget, root, self.min_visits,
                                              step=len(self.examples)))
            return final_choice(root, p_f, inst.goal).vertex
        return plan


def _instance_job(job):
    index, n, budget, p_f, seed, params, min_visits = job
    s = trial_seed(seed, index)
    inst = generate_instance(n, budget, p_f, make_rng(s, 2))
    solver = RecordingSolver(params, min_visits)
    rec = run_trial(inst, solver, s)
    if not rec.success:
        return index, False, []
    for ex in solver.examples:
        ex.instance = index
    return index, True, solver.examples


def generate_dataset(path: str | Path, sizes: Sequence[int], instances_per_size: int,
                     params: SearchParams | None = None, seed: int = 0, budget: float = 2.0,
                     p_f: float = 0.1, workers: int | None = None, min_visits: int = MIN_VISITS,
                     progress: Callable[[int, int], None] | None = None) -> DatasetMeta:
    """Solve random instances with rollout search and write successful trials' examples.

    Instance ``i`` (counted across sizes) and its trial depend only on
    ``(seed, i)``, so the file is the same for any worker count.
    """
    params = params or SearchParams()
    jobs = []
    for size in sizes:
        for _ in range(instances_per_size):
            jobs.append((len(jobs), int(size), budget, p_f, seed, params, min_visits))
    workers = default_workers() if workers is None else workers
    meta = DatasetMeta(sizes=[int(s) for s in sizes], budget=budget, p_f=p_f, seed=seed,
                       instances=len(jobs), expansions=params.expansions, min_visits=min_visits)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": asdict(meta)}) + "\n")
        if workers <= 1:
            results = map(_instance_job, jobs)
            pool = None
        else:
            pool = ProcessPoolExecutor(max_workers=workers)
            results = pool.map(_instance_job, jobs, chunksize=1)
        try:
            for done, (_, ok, examples) in enumerate(results, 1):
                meta.successes += ok
                for ex in examples:
                    fh.write(ex.to_json() + "\n")
                    meta.count += 1
                fh.flush()
                if progress:
                    progress(done, len(jobs))
        finally:
            if pool is not None:
                pool.shutdown()
    # rewrite the header with the final counts
    lines = Path(path).read_text(encoding="utf-8").splitlines(keepends=True)
    lines[0] = json.dumps({"meta": asdict(meta)}) + "\n"
    Path(path).write_text("".join(lines), encoding="utf-8")
    return meta


def load_dataset(path: str | Path) -> tuple[DatasetMeta, list[TrainingExample]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        meta = DatasetMeta(**header["meta"])
        examples = [TrainingExample.from_json(line) for line in fh if line.strip()]
    return meta, examples


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    head: str = "q"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    D: int = 32
    K: int = 16
    H: int = 32
    mask: tuple = ()
    val_fraction: float = 0.1


@dataclass
class LossCurve:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)

    def rows(self):
        return [{"epoch": i + 1, "train_loss": t, "val_loss": v}
                for i, (t, v) in enumerate(zip(self.train, self.val))]


def _batches(examples: Sequence[TrainingExample], order: Sequence[int], batch_size: int):
    """Chunks of ``order`` in which every example has the same vertex count."""
    by_n: dict[int, list[int]] = {}
    for i in order:
        by_n.setdefault(examples[i].n, []).append(i)
    out = []
    for idx in by_n.values():
        out.extend(idx[k:k + batch_size] for k in range(0, len(idx), batch_size))
    return out


def _stack(examples, idx, head):
    X = np.stack([examples[i].X for i in idx])
    E = np.stack([examples[i].edges() for i in idx])
    y = np.stack([getattr(examples[i], head) for i in idx])
    m = np.stack([examples[i].mask for i in idx])
    return X, E, y, m


def evaluate_loss(model: MpnnModel, examples: Sequence[TrainingExample], batch_size: int = 256) -> float:
    """Masked MSE pooled over all labelled entries."""
    if not examples:
        return float("nan")
    sq, cnt = 0.0, 0.0
    for idx in _batches(examples, range(len(examples)), batch_size):
        X, E, y, m = _stack(examples, idx, model.head)
        pred = model.forward_batch(X, E)
        sq += float((m * (pred - y) ** 2).sum())
        cnt += float(m.sum())
    return sq / cnt if cnt else 0.0


def split_examples(examples: Sequence[TrainingExample], val_fraction: float, seed: int):
    """Split by instance so one trial's correlated steps stay on one side."""
    ids = sorted({ex.instance for ex in examples})
    rng = make_rng(seed, 7)
    rng.shuffle(ids)
    n_val = int(round(len(ids) * val_fraction)) if len(ids) > 1 else 0
    val_ids = set(ids[:n_val])
    train = [ex for ex in examples if ex.instance not in val_ids]
    val = [ex for ex in examples if ex.instance in val_ids]
    return train, val


def train_model(examples: Sequence[TrainingExample], cfg: TrainConfig,
                on_epoch: Callable[[int, float, float], None] | None = None
                ) -> tuple[MpnnModel, LossCurve]:
    """Fit one head by masked MSE with Adam.

    Returns the weights of the epoch with the lowest validation loss (the last
    epoch when there is no validation split) and the per-epoch curve.
    """
    if not examples:
        raise ValueError("dataset is empty")
    train, val = split_examples(examples, cfg.val_fraction, cfg.seed)
    model = MpnnModel.init(cfg.head, make_rng(cfg.seed, 0), D=cfg.D, K=cfg.K, H=cfg.H, mask=cfg.mask)
    opt = Adam(model.params, lr=cfg.lr)
    rng = make_rng(cfg.seed, 1)
    curve = LossCurve()
    best_val, best_params = math.inf, None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        batches = _batches(train, order, cfg.batch_size)
        rng.shuffle(batches)
        sq, cnt = 0.0, 0.0
        for idx in batches:
            X, E, y, m = _stack(train, idx, cfg.head)
            pred, cache = model.forward_batch(X, E, return_cache=True)
            loss = mse_loss(pred, y, m)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch + 1}")
            sq += loss * m.sum()
            cnt += m.sum()
            if m.sum() == 0:
                continue
            opt.step(model.backward(cache, mse_grad(pred, y, m)))
        train_loss = sq / cnt if cnt else 0.0
        val_loss = evaluate_loss(model, val) if val else float("nan")
        curve.train.append(float(train_loss))
        curve.val.append(float(val_loss))
        if on_epoch:
            on_epoch(epoch + 1, train_loss, val_loss)
        score = val_loss if val else -epoch
        if score <= best_val:
            best_val = score
            best_params = {k: v.copy() for k, v in model.params.items()}
    model.params = best_params
    model.meta = {"epochs": cfg.epochs, "lr": cfg.lr, "batch_size": cfg.batch_size,
                  "seed": cfg.seed, "train_examples": len(train), "val_examples": len(val),
                  "best_val_loss": None if not val else float(best_val)}
    return model, curve
