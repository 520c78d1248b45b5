import numpy as np
import pytest
from hypothesis import given, strategies as st

from sopcc.instance import PathState, generate_instance, make_rng
from sopcc.mcts import SearchParams, search
from sopcc.mpnn import (ATTRIBUTES, FeatureGraph, GnnEvaluator, GnnMctsSolver, MpnnModel, PairedNets,
                        encode_state, euclidean, evaluate_children, node_state, parse_mask)
from gradcheck import numeric_grad, rel_error


def small_pair(seed=0, D=8, K=4, H=6):
    return (MpnnModel.init("q", make_rng(seed, 0), D=D, K=K, H=H),
            MpnnModel.init("f", make_rng(seed, 1), D=D, K=K, H=H))


def random_graph(n, rng):
    X = np.zeros((n, 8))
    X[:, 0] = rng.random(n) < 0.4
    X[:, 1:4] = rng.random((n, 3))
    X[:, 4] = rng.uniform(0, 2)
    X[rng.integers(n), 5] = 1
    X[rng.integers(n), 6] = 1
    cur = rng.integers(n)
    X[cur, 7] = 1
    X[cur, 0] = 1
    return FeatureGraph(X, euclidean(X[:, 1:3]))


def test_encode_at_start():
    inst = generate_instance(6, 2.0, 0.1, make_rng(0))
    g = encode_state(inst, [inst.start], inst.start, 2.0)
    X = g.node_attrs
    assert X.shape == (6, len(ATTRIBUTES))
    s = inst.start
    assert X[s, 5] == X[s, 7] == X[s, 0] == 1
    assert X[:, 0].sum() == 1 and X[:, 7].sum() == 1 and X[:, 6].sum() == 1
    assert np.all(X[:, 4] == 2.0)
    assert np.array_equal(X[:, 1:3], inst.coords) and np.array_equal(X[:, 3], inst.rewards)
    assert np.allclose(g.edge_attrs, inst.lengths, atol=1e-15)


def test_encode_budget_after_planned_path():
    inst = generate_instance(6, 2.0, 0.1, make_rng(1))
    state = PathState.at_start(inst)
    state = state.advance(inst, [v for v in range(6) if v not in (inst.start, inst.goal)][0], 0.3)
    rest = [v for v in range(6) if v not in state.visited and v != inst.goal]
    visited, u, rem = node_state(inst, state, 2.0 - 0.3, rest[:1])
    assert rem == pytest.approx(2.0 - 0.3 - inst.lengths[state.current, rest[0]])
    X = encode_state(inst, visited, u, rem).node_attrs
    assert np.all(X[:, 4] == rem)
    assert X[u, 7] == 1 and X[visited, 0].sum() == len(visited)


def test_encode_ablation_mask():
    inst = generate_instance(6, 2.0, 0.1, make_rng(0))
    full = encode_state(inst, [inst.start], inst.start, 2.0).node_attrs
    masked = encode_state(inst, [inst.start], inst.start, 2.0, mask=["start-goal"]).node_attrs
    assert np.all(masked[:, 5:7] == 0)
    keep = [0, 1, 2, 3, 4, 7]
    assert np.array_equal(masked[:, keep], full[:, keep])


def test_encode_rejects_bad_vertex():
    inst = generate_instance(4, 2.0, 0.1, make_rng(0))
    with pytest.raises(ValueError):
        encode_state(inst, [0], 9, 2.0)
    with pytest.raises(ValueError):
        parse_mask(["colour"])


def test_exactly_three_layers():
    q, _ = small_pair()
    with pytest.raises(ValueError):
        MpnnModel(q.params, head="q", D=8, K=4, H=6, T=2)
    with pytest.raises(ValueError):
        MpnnModel({k: v for k, v in q.params.items() if k != "gru2.U"}, head="q", D=8, K=4, H=6)


@given(st.integers(0, 2**32), st.integers(4, 12))
def test_permutation_equivariance(seed, n):
    rng = make_rng(seed)
    q, f = small_pair(seed % 7)
    g = random_graph(n, rng)
    perm = rng.permutation(n)
    gp = FeatureGraph(g.node_attrs[perm], g.edge_attrs[np.ix_(perm, perm)])
    for model in (q, f):
        assert np.max(np.abs(model.forward(gp) - model.forward(g)[perm])) < 1e-9


def test_single_node_graph():
    q, _ = small_pair()
    X = np.zeros((1, 8))
    X[0, [0, 5, 6, 7]] = 1
    out, cache = q.forward_batch(X[None], np.zeros((1, 1, 1)), return_cache=True)
    # messages into a lone vertex are zero at every layer
    for h, pre, G, Gt, P, S, gcache in cache[2]:
        assert np.all(P == 0) and np.all(S == 0)
    assert out.shape == (1, 1)


@given(st.integers(0, 2**32))
def test_heads(seed):
    rng = make_rng(seed)
    q, f = small_pair(seed % 5)
    g = random_graph(9, rng)
    g.node_attrs[:, 4] = 50.0  # push activations hard
    y = f.forward(g)
    assert np.all((y > 0) & (y < 1))
    assert np.all(np.isfinite(q.forward(g)))


def test_h0_enters_only_through_first_gru_hidden_state():
    q, _ = small_pair(3)
    p = q.params
    D = q.D
    # layer-0 messages vanish and the candidate ignores its hidden input, so h1 no
    # longer depends on h0; with no skip connection the output must not either
    p["e0.W2"][:] = 0
    p["e0.B2"][:] = 0
    p["gru0.U"][:, 2 * D:] = 0
    p["gru0.b"][:D] = 50.0  # update gate fully open
    rng = make_rng(0)
    a, b = random_graph(6, rng), random_graph(6, rng)
    b.edge_attrs = a.edge_attrs
    assert np.allclose(q.forward(a), q.forward(b), atol=1e-12)
    p["gru0.b"][:D] = 0.0
    assert not np.allclose(q.forward(a), q.forward(b), atol=1e-6)


@pytest.mark.parametrize("head", ["q", "f"])
@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradients(head, seed):
    rng = make_rng(seed, 9)
    model = MpnnModel.init(head, rng, D=6, K=4, H=5)
    for k in model.params:
        if k.endswith("b1") or k.endswith(".b") or k == "in.b" or k.startswith("out.b"):
            model.params[k] = rng.normal(0, 0.5, model.params[k].shape)
    graphs = [random_graph(4, rng) for _ in range(2)]
    X = np.stack([g.node_attrs for g in graphs])
    E = np.stack([g.edge_attrs for g in graphs])
    w = rng.normal(size=(2, 4))
    loss = lambda: float((model.forward_batch(X, E) * w).sum())
    _, cache = model.forward_batch(X, E, return_cache=True)
    grads = model.backward(cache, w)
    for name, arr in model.params.items():
        assert rel_error(grads[name], numeric_grad(loss, arr)) < 1e-4, name


def test_evaluate_children_two_forward_passes(monkeypatch):
    inst = generate_instance(20, 2.0, 0.1, make_rng(2))
    q, f = small_pair()
    calls = []
    orig = MpnnModel.forward_batch

    def counting(self, *a, **kw):
        calls.append(self.head)
        return orig(self, *a, **kw)

    monkeypatch.setattr(MpnnModel, "forward_batch", counting)
    children = [v for v in range(20) if v != inst.start]
    Q, F = evaluate_children(q, f, inst, [inst.start], inst.start, 2.0, children)
    assert len(Q) == len(F) == 19
    assert sorted(calls) == ["f", "q"]
    assert np.all((F > 0) & (F < 1))


def test_evaluate_children_contract():
    inst = generate_instance(6, 2.0, 0.1, make_rng(2))
    q, f = small_pair()
    with pytest.raises(ValueError):
        evaluate_children(q, f, inst, [inst.start], inst.start, 2.0, [])
    with pytest.raises(ValueError):
        evaluate_children(q, f, inst, [inst.start], inst.start, 2.0, [inst.start])
    with pytest.raises(RuntimeError):
        evaluate_children(None, f, inst, [inst.start], inst.start, 2.0, [inst.goal])


@pytest.mark.parametrize("mask", [(), ("current",)])
def test_paired_inference_matches_reference(mask):
    inst = generate_instance(12, 2.0, 0.1, make_rng(4))
    q = MpnnModel.init("q", make_rng(1), mask=mask)
    f = MpnnModel.init("f", make_rng(2), mask=mask)
    children = [v for v in range(12) if v != inst.start]
    Q, F = evaluate_children(q, f, inst, [inst.start], inst.start, 2.0, children)
    pair = PairedNets(q, f, dtype=np.float64)
    X = encode_state(inst, [inst.start], inst.start, 2.0).node_attrs
    Qp, Fp = pair.forward(X, pair.edge_hidden(inst.lengths))
    assert np.allclose(Qp[children], Q, atol=1e-12) and np.allclose(Fp[children], F, atol=1e-12)
    pair32 = PairedNets(q, f)
    Q32, F32 = pair32.forward(X, pair32.edge_hidden(inst.lengths))
    assert np.allclose(Q32[children], Q, atol=1e-4) and np.allclose(F32[children], F, atol=1e-4)


def test_gnn_evaluator_skips_hopeless_nodes():
    inst = generate_instance(8, 2.0, 0.1, make_rng(6))
    ev = GnnEvaluator(*small_pair())
    state = PathState.at_start(inst)
    Q, F = ev(inst, state, -1.0, [], [v for v in range(8) if v != inst.start], make_rng(0))
    assert ev.calls == 0 and np.all(F == 1) and np.all(Q == 0)
    ev(inst, state, 2.0, [], [v for v in range(8) if v != inst.start], make_rng(0))
    assert ev.calls == 1


def test_gnn_search_runs_and_is_deterministic():
    inst = generate_instance(10, 2.0, 0.1, make_rng(8))
    params = SearchParams(expansions=40, evaluator=GnnEvaluator(*small_pair()))
    a = search(inst, PathState.at_start(inst), 2.0, params, make_rng(0))
    b = search(inst, PathState.at_start(inst), 2.0, params, make_rng(0))
    assert [(c.Q, c.F, c.N) for c in a.children] == [(c.Q, c.F, c.N) for c in b.children]
    assert GnnMctsSolver(*small_pair()).name == "gnn-mcts"


def test_model_checkpoint_round_trip(tmp_path):
    q = MpnnModel.init("f", make_rng(0), D=8, K=4, H=6, mask=("goal", "start"))
    q.save(tmp_path / "f.json", extra={"note": "x"})
    back = MpnnModel.load(tmp_path / "f.json")
    assert back.head == "f" and back.mask == ("start", "goal") and back.meta["note"] == "x"
    for k in q.params:
        assert back.params[k].tobytes() == q.params[k].tobytes()
