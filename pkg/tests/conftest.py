import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sopcc.instance import Instance

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parents[1]
ARTIFACTS = Path(os.environ.get("SOPCC_ARTIFACTS", ROOT / "artifacts"))

CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


def line_instance(lengths, rewards=None, start=0, goal=None, budget=2.0, p_f=0.1):
    """Instance with explicit lengths; coordinates are placeholders."""
    L = np.asarray(lengths, dtype=float)
    n = L.shape[0]
    coords = np.column_stack([np.linspace(0, 1, n), np.zeros(n)])
    rewards = np.ones(n) if rewards is None else rewards
    goal = n - 1 if goal is None else goal
    return Instance(coords=coords, rewards=rewards, start=start, goal=goal, budget=budget,
                    p_f=p_f, lengths=L)


@pytest.fixture
def two_vertex():
    return line_instance([[0, 1.0], [1.0, 0]], rewards=[0.3, 0.5])


@pytest.fixture
def three_vertex():
    # start 0 -> 1 (mean 1) -> goal 2 (mean 0.5); direct edge mean 1.2
    L = [[0, 1.0, 1.2], [1.0, 0, 0.5], [1.2, 0.5, 0]]
    return line_instance(L, rewards=[0.1, 0.7, 0.2])


# ---------------------------------------------------------------- shared benchmark batches

BENCH_SEED = 100      # instance seed for the 20-vertex benchmark set
TRIAL_SEED = 0        # trial seed for every benchmark batch


def bench_instances(n: int, count: int, seed: int, budget=2.0, p_f=0.1):
    from sopcc.executor import trial_seed
    from sopcc.instance import generate_instance, make_rng
    return [generate_instance(n, budget, p_f, make_rng(trial_seed(seed, k), 2)) for k in range(count)]


def require_nets(tag: str):
    from sopcc.mpnn import MpnnModel
    q, f = ARTIFACTS / f"q_{tag}.json", ARTIFACTS / f"f_{tag}.json"
    if not (q.exists() and f.exists()):
        pytest.fail(f"trained checkpoints {q.name}/{f.name} missing; run scripts/build_artifacts.sh")
    return MpnnModel.load(q), MpnnModel.load(f), (q, f)


@pytest.fixture(scope="session")
def bench20():
    return bench_instances(20, 100, BENCH_SEED)


@pytest.fixture(scope="session")
def mcts20(bench20):
    from bench_cache import cached
    from sopcc.executor import MctsSolver, run_batch
    cfg = {"batch": "mcts20", "n": 20, "count": 100, "seed": BENCH_SEED, "trial_seed": TRIAL_SEED}
    return cached("mcts20", cfg, lambda: run_batch(bench20, MctsSolver(), TRIAL_SEED))


@pytest.fixture(scope="session")
def nets20():
    return require_nets("n20")


@pytest.fixture(scope="session")
def gnn20(bench20, nets20):
    from bench_cache import cached
    from sopcc.executor import run_batch
    from sopcc.mpnn import GnnMctsSolver
    q, f, files = nets20
    cfg = {"batch": "gnn20", "n": 20, "count": 100, "seed": BENCH_SEED, "trial_seed": TRIAL_SEED}
    return cached("gnn20", cfg, lambda: run_batch(bench20, GnnMctsSolver(q, f), TRIAL_SEED), files)
