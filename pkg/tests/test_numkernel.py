import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadtraj import numkernel as nk
from roadtraj.exceptions import EmptyInputError, IsolatedNodeError, NoCandidateError, NumericError, ShapeError


def _store(rng, **arrays):
    s = nk.ParamStore()
    for k, v in arrays.items():
        s.add(k, v)
    return s


# -- masked softmax ---------------------------------------------------------------------

def test_masked_softmax_single_unmasked():
    p = nk.masked_softmax([5.0, -3.0, 7.0], [0, 1, 0])
    assert p.tolist() == [0.0, 1.0, 0.0]


def test_masked_softmax_equal_logits():
    p = nk.masked_softmax([2.0, 2.0, 2.0], [1, 1, 0])
    assert p.tolist() == [0.5, 0.5, 0.0]


def test_masked_softmax_log_values():
    p = nk.masked_softmax([math.log(1), math.log(3)], [1, 1])
    assert p == pytest.approx([0.25, 0.75], abs=1e-15)


def test_masked_softmax_all_masked_raises():
    with pytest.raises(NoCandidateError):
        nk.masked_softmax([1.0, 2.0], [0, 0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.booleans()), min_size=1, max_size=12))
def test_masked_softmax_properties(items):
    logits = np.array([x for x, _ in items])
    mask = np.array([m for _, m in items])
    if not mask.any():
        mask[0] = True
    p = nk.masked_softmax(logits, mask)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p[~mask] == 0.0)
    assert np.all(np.isfinite(p))


def test_masked_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(3, 6))
    m = rng.random((3, 6)) > 0.4
    m[:, 0] = True
    ref = np.log(nk.masked_softmax(x, m)[m])
    assert np.allclose(nk.masked_log_softmax(x, m)[m], ref, atol=1e-13)


# -- embedding ----------------------------------------------------------------------------

def test_embedding_lookup_and_backward():
    table = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert nk.embedding_lookup(table, 1).tolist() == [3.0, 4.0]
    g = np.zeros_like(table)
    nk.embedding_backward(g, 1, np.array([1.0, 0.0]))
    assert g[0].tolist() == [0.0, 0.0] and g[1].tolist() == [1.0, 0.0]
    with pytest.raises(IndexError):
        nk.embedding_lookup(table, 2)
    with pytest.raises(IndexError):
        nk.embedding_lookup(table, -1)


def test_time_table_accepts_every_slot(rng):
    table = rng.normal(size=(2880, 3))
    assert nk.embedding_lookup(table, np.arange(2880)).shape == (2880, 3)


# -- recurrent cell -------------------------------------------------------------------------

def test_cell_zero_params_zero_output():
    s = nk.ParamStore()
    s.add("c.Wx", np.zeros((3, 8)))
    s.add("c.Wh", np.zeros((2, 8)))
    s.add("c.b", np.zeros(8))
    h, c = nk.recurrent_cell_step(s, "c", np.zeros(3), (np.zeros(2), np.zeros(2)))
    assert h.tolist() == [0.0, 0.0] and c.tolist() == [0.0, 0.0]


def test_cell_hidden_bounded(rng):
    s = nk.ParamStore()
    nk.lstm_params(s, "c", 4, 6, rng, scale=3.0)
    h, c = np.zeros(6), np.zeros(6)
    for _ in range(20):
        h, c = nk.recurrent_cell_step(s, "c", rng.normal(0, 10, 4), (h, c))
        assert np.all(np.abs(h) < 1)


def test_cell_shape_mismatch(rng):
    s = nk.ParamStore()
    nk.lstm_params(s, "c", 4, 6, rng)
    with pytest.raises(ShapeError):
        nk.recurrent_cell_step(s, "c", np.zeros(5), (np.zeros(6), np.zeros(6)))


def test_lstm_forward_matches_cell_steps(rng):
    s = nk.ParamStore()
    nk.lstm_params(s, "l", 3, 4, rng)
    X = rng.normal(size=(2, 5, 3))
    mask = np.ones((2, 5))
    mask[1, 3:] = 0
    Hs, _ = nk.lstm_forward(s, "l", X, mask)
    h, c = np.zeros(4), np.zeros(4)
    for t in range(3):
        h, c = nk.recurrent_cell_step(s, "l", X[1, t], (h, c))
    assert np.allclose(Hs[1, 2], h) and np.allclose(Hs[1, 4], h)


def test_lstm_gradient(rng):
    s = nk.ParamStore()
    nk.lstm_params(s, "l", 3, 4, rng)
    X = rng.normal(size=(2, 4, 3))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=float)
    target = rng.normal(size=(2, 4, 4))

    def loss(store):
        Hs, cache = nk.lstm_forward(store, "l", X, mask)
        nk.lstm_backward(store, "l", Hs - target, cache)
        return 0.5 * float(np.sum((Hs - target) ** 2))

    assert nk.check_gradients(s, loss) < 1e-6


def test_lstm_input_gradient(rng):
    s = nk.ParamStore()
    nk.lstm_params(s, "l", 3, 4, rng)
    X = rng.normal(size=(1, 3, 3))
    Hs, cache = nk.lstm_forward(s, "l", X)
    dX = nk.lstm_backward(s, "l", np.ones_like(Hs), cache)
    num = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += 1e-6
        Xm[idx] -= 1e-6
        num[idx] = (nk.lstm_forward(s, "l", Xp)[0].sum() - nk.lstm_forward(s, "l", Xm)[0].sum()) / 2e-6
    assert np.linalg.norm(dX - num) / np.linalg.norm(num) < 1e-6


# -- attention ----------------------------------------------------------------------------

def test_dot_attention_single_state():
    assert nk.dot_attention([[0.3, -0.2]]).tolist() == [0.3, -0.2]


def test_dot_attention_identical_states():
    assert np.allclose(nk.dot_attention([[0.5, 1.0], [0.5, 1.0]]), [0.5, 1.0])


def test_dot_attention_hand_computed():
    w0, w1 = 1.0 / (1 + math.e), math.e / (1 + math.e)
    out = nk.dot_attention([[1.0, 0.0], [0.0, 1.0]])
    assert out == pytest.approx([w0, w1], abs=1e-15)


def test_dot_attention_empty():
    with pytest.raises(EmptyInputError):
        nk.dot_attention(np.zeros((0, 3)))


def test_causal_attention_matches_per_position(rng):
    Hs = rng.normal(size=(2, 4, 3))
    out, _ = nk.causal_attention_forward(Hs)
    for b in range(2):
        for i in range(4):
            assert np.allclose(out[b, i], nk.dot_attention(Hs[b, :i + 1]))


def test_causal_attention_gradient(rng):
    Hs = rng.normal(size=(1, 4, 3))
    w = rng.normal(size=(1, 4, 3))
    out, cache = nk.causal_attention_forward(Hs)
    dH = nk.causal_attention_backward(w, cache)
    num = np.zeros_like(Hs)
    for idx in np.ndindex(Hs.shape):
        hp, hm = Hs.copy(), Hs.copy()
        hp[idx] += 1e-6
        hm[idx] -= 1e-6
        num[idx] = (np.sum(w * nk.causal_attention_forward(hp)[0]) -
                    np.sum(w * nk.causal_attention_forward(hm)[0])) / 2e-6
    assert np.linalg.norm(dH - num) / np.linalg.norm(num) < 1e-6


# -- graph attention --------------------------------------------------------------------------

def test_gat_single_node_self_loop(rng):
    s = nk.ParamStore()
    nk.gat_params(s, "g", 3, 2, rng)
    x = rng.normal(size=(1, 3))
    out = nk.gat_layer(s, "g", x, nk.neighbor_edges(1, [[]]))
    assert np.allclose(out, nk.elu(x @ s["g.W"]))


def test_gat_attention_sums_to_one(rng):
    s = nk.ParamStore()
    nk.gat_params(s, "g", 3, 4, rng)
    nbrs = [[1, 2], [0], [0, 1, 3], [2]]
    edges = nk.neighbor_edges(4, nbrs)
    alpha = nk.gat_attention_weights(s, "g", rng.normal(size=(4, 3)), edges)
    sums = np.bincount(edges[1], weights=alpha)
    assert np.all(np.abs(sums - 1.0) <= 1e-12)


def test_gat_two_node_hand_computed():
    s = nk.ParamStore()
    s.add("g.W", np.eye(2))
    s.add("g.a_src", np.array([1.0, 0.0]))
    s.add("g.a_dst", np.array([0.0, 0.0]))
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    # node 1 aggregates from node 0 and itself; scores e = a_src . Wh_src = 1 (node 0), 0 (self)
    out = nk.gat_layer(s, "g", x, nk.neighbor_edges(2, [[], [0]]))
    a0 = math.e / (math.e + 1)
    expect = np.array([a0 * 1.0, (1 - a0) * 2.0])
    assert np.allclose(out[1], expect)
    assert np.allclose(out[0], [1.0, 0.0])


def test_gat_isolated_node():
    with pytest.raises(IsolatedNodeError):
        nk.neighbor_edges(2, [[1], []], self_loops=False)


def test_gat_gradient(rng):
    s = nk.ParamStore()
    nk.gat_params(s, "g", 3, 4, rng)
    x = rng.normal(size=(5, 3))
    edges = nk.neighbor_edges(5, [[1, 2], [0], [0, 1, 3], [2, 4], [0]])
    w = rng.normal(size=(5, 4))

    def loss(store):
        out, cache = nk.gat_forward(store, "g", x, edges)
        nk.gat_backward(store, "g", w, cache)
        return float(np.sum(w * out))

    assert nk.check_gradients(s, loss) < 1e-6


# -- mlp --------------------------------------------------------------------------------------

def test_mlp_identity_passthrough():
    s = nk.ParamStore()
    s.add("m.0.W", np.eye(3))
    s.add("m.0.b", np.zeros(3))
    x = np.array([0.2, -1.0, 3.0])
    out, _ = nk.mlp_forward(s, "m", x, out_activation="linear")
    assert out.tolist() == x.tolist()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
def test_mlp_sigmoid_range(x):
    s = nk.ParamStore()
    nk.mlp_params(s, "m", [3, 4, 1], np.random.default_rng(0))
    out, _ = nk.mlp_forward(s, "m", np.array(x))
    assert np.all((out >= 0) & (out <= 1)) and np.all(np.isfinite(out))


def test_mlp_shape_error(rng):
    s = nk.ParamStore()
    nk.mlp_params(s, "m", [3, 2], rng)
    with pytest.raises(ShapeError):
        nk.mlp_forward(s, "m", np.zeros(4))


@pytest.mark.parametrize("act", ["sigmoid", "linear"])
def test_mlp_gradient(rng, act):
    s = nk.ParamStore()
    nk.mlp_params(s, "m", [3, 5, 2], rng)
    x = rng.normal(size=(4, 3))
    y = rng.normal(size=(4, 2))

    def loss(store):
        out, cache = nk.mlp_forward(store, "m", x, out_activation=act)
        nk.mlp_backward(store, "m", out - y, cache)
        return 0.5 * float(np.sum((out - y) ** 2))

    assert nk.check_gradients(s, loss) < 1e-6


# -- gradient checker -----------------------------------------------------------------------

def _linear_problem(rng):
    s = nk.ParamStore()
    s.add("W", rng.normal(size=(3, 2)))
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(5, 2))
    return s, x, y


def test_check_gradients_linear_squared(rng):
    s, x, y = _linear_problem(rng)

    def loss(store):
        r = x @ store["W"] - y
        store.grads["W"] += x.T @ r
        return 0.5 * float(np.sum(r * r))

    assert nk.check_gradients(s, loss) < 1e-6


def test_check_gradients_detects_corruption(rng):
    s, x, y = _linear_problem(rng)

    def loss(store):
        r = x @ store["W"] - y
        store.grads["W"] += 2.0 * (x.T @ r)
        return 0.5 * float(np.sum(r * r))

    assert nk.check_gradients(s, loss) == pytest.approx(1.0, abs=1e-4)


def test_check_gradients_nonfinite_loss(rng):
    s, _, _ = _linear_problem(rng)
    with pytest.raises(NumericError):
        nk.check_gradients(s, lambda store: float("nan"))


# -- optimizers and checkpoints -----------------------------------------------------------------

def test_sgd_step():
    s = nk.ParamStore()
    s.add("w", np.array([1.0, 2.0]))
    s.grads["w"][:] = [0.5, -1.0]
    nk.SGD(s, 0.1).step()
    assert s["w"].tolist() == [0.95, 2.1]


def test_checkpoint_round_trip(tmp_path, rng):
    s = nk.ParamStore()
    s.add("a.W", rng.normal(size=(3, 4)))
    s.add("b", rng.normal(size=7))
    path = tmp_path / "p.npz"
    nk.save_params(s, path, {"kind": "test", "z": 2})
    t, meta = nk.load_params(path)
    assert meta == {"kind": "test", "z": 2}
    assert t.names() == s.names()
    for k in s.names():
        assert np.array_equal(t[k], s[k]) and t[k].dtype == np.float64


def test_param_store_duplicate():
    s = nk.ParamStore()
    s.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        s.add("w", np.zeros(2))
