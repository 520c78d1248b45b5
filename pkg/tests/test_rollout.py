import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sopcc.instance import PathState, generate_instance, make_rng
from sopcc.rollout import (RolloutNoise, RolloutParams, _run_one, choose_next, estimate_qf,
                           rollout_once, simulate, summarize)


def binom_sigma(p, n):
    return math.sqrt(p * (1 - p) / n)


def test_params_validation():
    with pytest.raises(ValueError):
        RolloutParams(S=0)
    with pytest.raises(ValueError):
        RolloutParams(greedy_prob=1.5)


def test_at_goal_is_immediate_success(two_vertex):
    state = PathState.at_start(two_vertex).advance(two_vertex, 1, 1.9)
    reward, ok = rollout_once(two_vertex, state, 0.0, make_rng(0))
    assert ok and reward == pytest.approx(0.8)


def test_negative_budget_is_immediate_failure(two_vertex):
    state = PathState.at_start(two_vertex)
    reward, ok = rollout_once(two_vertex, state, -0.1, make_rng(0))
    assert not ok and reward == pytest.approx(0.3)


def test_single_edge_failure_frequency(two_vertex):
    est = estimate_qf(two_vertex, PathState.at_start(two_vertex), 2.0, RolloutParams(S=100_000),
                      make_rng(1))
    p = math.exp(-2)
    assert abs(est.F - p) < 3 * binom_sigma(p, 100_000)
    assert est.Q == pytest.approx(0.8)


def test_rollout_once_single_edge_frequency(two_vertex):
    rng = make_rng(3)
    state = PathState.at_start(two_vertex)
    fails = sum(not rollout_once(two_vertex, state, 2.0, rng)[1] for _ in range(20_000))
    p = math.exp(-2)
    assert abs(fails / 20_000 - p) < 3 * binom_sigma(p, 20_000)


def test_all_runs_fail_gives_zero_q(two_vertex):
    est = estimate_qf(two_vertex, PathState.at_start(two_vertex), -1.0, RolloutParams(S=50), make_rng(0))
    assert est.F == 1.0 and est.Q == 0.0 and est.successes == 0


def test_goal_reached_gives_certain_success(two_vertex):
    state = PathState.at_start(two_vertex).advance(two_vertex, 1, 0.5)
    est = estimate_qf(two_vertex, state, 1.5, RolloutParams(S=20), make_rng(0))
    assert est.F == 0.0 and est.Q == pytest.approx(0.8)


def test_forced_prefix_two_edge_tail(three_vertex):
    est = estimate_qf(three_vertex, PathState.at_start(three_vertex), 2.0, RolloutParams(S=100_000),
                      make_rng(2), plan=[1])
    p = 2 * math.exp(-2) - math.exp(-4)
    assert abs(est.F - p) < 3 * binom_sigma(p, 100_000)


@given(st.integers(0, 2**32), st.integers(4, 12), st.floats(0.3, 3.0))
def test_vectorized_matches_scalar_reference(seed, n, budget):
    inst = generate_instance(n, budget, 0.1, make_rng(seed))
    state = PathState.at_start(inst)
    noise = RolloutNoise.draw(make_rng(seed, 1), 16, n)
    vis = state.visited_mask(n)
    rew, ok = simulate(inst, vis, state.current, budget, state.collected_reward, (), noise, 0.7)
    for s in range(16):
        r1, ok1 = _run_one(inst, vis.copy(), state.current, budget, state.collected_reward, (),
                           noise.explore[s], noise.pick[s], noise.cost[s], 0.7)
        assert ok1 == ok[s]
        assert r1 == pytest.approx(rew[s], abs=1e-12)


@given(st.integers(0, 2**32), st.integers(3, 15))
def test_runs_are_simple_and_bounded(seed, n):
    inst = generate_instance(n, 2.0, 0.1, make_rng(seed))
    noise = RolloutNoise.draw(make_rng(seed, 1), 8, n)
    visited = PathState.at_start(inst).visited_mask(n)
    for s in range(8):
        vis = visited.copy()
        before = vis.sum()
        reward, _ = _run_one(inst, vis, inst.start, 2.0, float(inst.rewards[inst.start]), (),
                             noise.explore[s], noise.pick[s], noise.cost[s], 0.7)
        # each step marks one new vertex, so at most n - 1 steps happened
        assert vis.sum() - before <= n - 1
        assert reward == pytest.approx(float(inst.rewards[vis].sum()))


@given(st.integers(0, 2**32), st.floats(0.1, 3.0), st.floats(0.0, 2.0))
def test_single_edge_success_monotone_in_budget(seed, b, extra):
    from conftest import line_instance
    inst = line_instance([[0, 1.0], [1.0, 0]])
    noise = RolloutNoise.draw(make_rng(seed), 64, 2)
    vis = np.array([True, False])
    _, ok_lo = simulate(inst, vis, 0, b, 1.0, (), noise, 0.7)
    _, ok_hi = simulate(inst, vis, 0, b + extra, 1.0, (), noise, 0.7)
    assert np.all(ok_hi >= ok_lo)


@given(st.lists(st.booleans(), min_size=1, max_size=50))
def test_summarize_counts(flags):
    ok = np.array(flags)
    rew = np.arange(len(flags), dtype=float)
    est = summarize(rew, ok)
    assert est.successes + (est.S - est.successes) == est.S
    assert est.F == (len(flags) - ok.sum()) / len(flags)
    assert est.Q == (rew[ok].mean() if ok.any() else 0.0)


def test_choose_next_prefers_ratio_when_greedy():
    inst = generate_instance(8, 2.0, 0.1, make_rng(5))
    vis = PathState.at_start(inst).visited_mask(8)
    v = choose_next(inst, vis, inst.start, 2.0, make_rng(0), greedy_prob=1.0)
    L, r, g = inst.lengths, inst.rewards, inst.goal
    cands = [w for w in range(8) if not vis[w] and w != g and L[inst.start, w] + L[w, g] <= 2.0]
    assert v == max(cands, key=lambda w: r[w] / L[inst.start, w])
    assert choose_next(inst, vis, inst.start, 0.0, make_rng(0)) == g
