import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stagecast.errors import ShapeMismatch, UninitializedState
from stagecast.neural import (
    GRU_GATES,
    AdamState,
    ParamSet,
    adam_step,
    dense,
    dense_backward,
    finite_diff_grad,
    glorot_uniform,
    gru_cell,
    gru_cell_backward,
    gru_sequence,
    gru_sequence_backward,
    maxpool_time,
    maxpool_time_backward,
    mse,
    mse_backward,
    relative_error,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    tanh,
    tanh_backward,
)

SEEDS = range(20)
finite = st.floats(-50, 50, allow_nan=False)


def rng(seed):
    return np.random.default_rng(seed)


def gru_params(r, d, h, scale=0.5):
    p = ParamSet()
    for g in GRU_GATES:
        p[f"U{g}"] = r.normal(0, scale, (d, h))
        p[f"W{g}"] = r.normal(0, scale, (h, h))
        p[f"b{g}"] = r.normal(0, scale, h)
    return p


# --- dense / activations ----------------------------------------------------


def test_dense_identity_and_bias():
    x = np.array([1.0, -2.0, 3.0])
    y, _ = dense(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(y, x)
    y, _ = dense(np.zeros(3), np.ones((3, 2)), np.array([4.0, 5.0]))
    np.testing.assert_array_equal(y, [4.0, 5.0])


def test_dense_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dense(np.ones(4), np.ones((3, 2)), np.zeros(2))
    with pytest.raises(ShapeMismatch):
        dense(np.ones(3), np.ones((3, 2)), np.zeros(3))


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradients(seed):
    r = rng(seed)
    p = ParamSet()
    p["x"], p["W"], p["b"] = r.normal(size=(2, 5)), r.normal(size=(5, 3)), r.normal(size=3)
    up = r.normal(size=(2, 3))

    def f(ps):
        return float(np.sum(dense(ps["x"], ps["W"], ps["b"])[0] * up))

    _, cache = dense(p["x"], p["W"], p["b"])
    dx, dW, db = dense_backward(up, cache)
    num = finite_diff_grad(f, p, eps=1e-5)
    for name, g in (("x", dx), ("W", dW), ("b", db)):
        assert relative_error(g, num[name]) < 1e-6


def test_relu_values():
    y, mask = relu(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y, [0.0, 0.0, 2.0])
    # subgradient at exactly 0 is 0
    np.testing.assert_array_equal(relu_backward(np.ones(3), mask), [0.0, 0.0, 1.0])


@given(arrays(np.float64, st.integers(1, 30), elements=finite))
def test_relu_idempotent_and_elementwise(x):
    y, _ = relu(x)
    np.testing.assert_array_equal(relu(y)[0], y)
    np.testing.assert_array_equal(y, [max(v, 0.0) for v in x])


def test_sigmoid_tanh_at_zero():
    assert sigmoid(np.array(0.0))[0] == 0.5
    assert tanh(np.array(0.0))[0] == 0.0


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-500, 500)))
def test_sigmoid_symmetry_and_stability(x):
    with np.errstate(all="raise"):
        a, b = sigmoid(x)[0], sigmoid(-x)[0]
    assert np.all(np.isfinite(a))
    np.testing.assert_allclose(b, 1.0 - a, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_activation_gradients(seed):
    x = rng(seed).normal(0, 2, 7)
    eps = 1e-6
    for fwd, bwd in ((sigmoid, sigmoid_backward), (tanh, tanh_backward)):
        y, cache = fwd(x)
        num = (fwd(x + eps)[0] - fwd(x - eps)[0]) / (2 * eps)
        assert relative_error(bwd(np.ones_like(x), cache), num) < 1e-8


# --- GRU ----------------------------------------------------------------------


def test_gru_zero_params_closed_form():
    d, h = 3, 4
    p = ParamSet()
    for g in GRU_GATES:
        p[f"U{g}"], p[f"W{g}"], p[f"b{g}"] = np.zeros((d, h)), np.zeros((h, h)), np.zeros(h)
    s, cache = gru_cell(rng(0).normal(size=d), np.zeros(h), p)
    np.testing.assert_array_equal(s, np.zeros(h))
    gates = cache[2][1]  # recurrence cache: states, gates (r|z), ...
    np.testing.assert_array_equal(gates, np.full(gates.shape, 0.5))


def test_gru_update_gate_passthrough():
    d, h = 3, 4
    p = gru_params(rng(1), d, h, scale=0.0)
    p["bz"] = np.full(h, 50.0)
    prev = rng(2).uniform(-1, 1, h)
    s, _ = gru_cell(rng(3).normal(size=d), prev, p)
    np.testing.assert_allclose(s, prev, atol=1e-12)


def test_gru_sequence_length_one_is_cell():
    r = rng(4)
    p = gru_params(r, 3, 4)
    x, s0 = r.normal(size=3), r.normal(size=4)
    a, _ = gru_cell(x, s0, p)
    b, _ = gru_sequence(x[None], s0, p)
    np.testing.assert_array_equal(a, b[0])


def test_gru_shape_mismatch():
    p = gru_params(rng(0), 3, 4)
    with pytest.raises(ShapeMismatch):
        gru_sequence(np.ones((5, 2)), np.zeros(4), p)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_gru_state_bound(seed):
    r = rng(seed)
    p = gru_params(r, 3, 4, scale=3.0)
    states, _ = gru_sequence(r.normal(0, 5, (6, 3)), r.uniform(-1, 1, 4), p)
    assert np.max(np.abs(states)) <= 1.0


def _bptt_check(seed, batch):
    r = rng(seed)
    d, h, T = 3, 4, 5
    p = gru_params(r, d, h)
    shape = (batch, T, d) if batch else (T, d)
    p["xs"] = r.normal(size=shape)
    p["s0"] = r.uniform(-1, 1, (batch, h) if batch else h)
    up = r.normal(size=shape[:-1] + (h,))

    def f(ps):
        return float(np.sum(gru_sequence(ps["xs"], ps["s0"], ps)[0] * up))

    _, cache = gru_sequence(p["xs"], p["s0"], p)
    dxs, ds0, grads = gru_sequence_backward(up, cache)
    grads = {**grads, "xs": dxs, "s0": ds0}
    num = finite_diff_grad(f, p, eps=1e-5)
    return max(relative_error(grads[k], num[k]) for k in num)


@pytest.mark.parametrize("seed", SEEDS)
def test_gru_bptt_gradients(seed):
    assert _bptt_check(seed, batch=0) < 1e-5


def test_gru_bptt_gradients_batched():
    assert _bptt_check(99, batch=3) < 1e-5


def test_gru_cell_backward_matches_sequence():
    r = rng(5)
    p = gru_params(r, 3, 4)
    x, s0, up = r.normal(size=3), r.normal(size=4), r.normal(size=4)
    _, cache = gru_cell(x, s0, p)
    dx, ds0, grads = gru_cell_backward(up, cache)
    _, cache2 = gru_sequence(x[None], s0, p)
    dx2, ds02, grads2 = gru_sequence_backward(up[None], cache2)
    np.testing.assert_array_equal(dx, dx2[0])
    np.testing.assert_array_equal(ds0, ds02)


# --- pooling / loss -------------------------------------------------------------


def test_maxpool_examples():
    y, _ = maxpool_time(np.array([[1.0, 5.0], [3.0, 2.0]]))
    np.testing.assert_array_equal(y, [3.0, 5.0])
    x = np.array([[7.0, 8.0]])
    np.testing.assert_array_equal(maxpool_time(x)[0], x[0])


def test_maxpool_ties_route_to_first():
    _, cache = maxpool_time(np.array([[2.0], [2.0], [1.0]]))
    np.testing.assert_array_equal(maxpool_time_backward(np.array([1.0]), cache), [[1.0], [0.0], [0.0]])


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 6)), elements=finite))
def test_maxpool_oracle_and_mass(hs):
    y, cache = maxpool_time(hs)
    np.testing.assert_array_equal(y, hs.max(axis=0))
    dy = np.arange(1.0, hs.shape[1] + 1)
    dx = maxpool_time_backward(dy, cache)
    np.testing.assert_array_equal(dx.sum(axis=0), dy)


def test_mse_examples():
    t = np.arange(24.0)
    assert mse(t, t)[0] == 0.0
    assert mse(t + 1.0, t)[0] == 1.0
    with pytest.raises(ShapeMismatch):
        mse(np.ones(24), np.ones(23))


@given(arrays(np.float64, 24, elements=finite), arrays(np.float64, 24, elements=finite))
def test_mse_oracle_and_gradient(a, b):
    loss, diff = mse(a, b)
    assert loss == pytest.approx(sum((x - y) ** 2 for x, y in zip(a, b)) / 24, rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(mse_backward(diff), 2 * (a - b) / 24, rtol=1e-15)


# --- Adam / init -----------------------------------------------------------------


def test_adam_first_step_is_lr():
    p = ParamSet()
    p["w"] = np.array([1.0, -2.0, 0.5])
    state = AdamState.create(p, lr=1e-3)
    p.set_grads({"w": np.array([3.0, -0.2, 1e4])})
    adam_step(p, state)
    moved = np.array([1.0, -2.0, 0.5]) - p["w"]
    np.testing.assert_allclose(moved, 1e-3 * np.sign([3.0, -0.2, 1e4]), rtol=1e-2)
    assert state.step == 1


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = ParamSet()
    p["w"] = np.array([2.0])
    state = AdamState.create(p)
    state.m["w"][:] = 1.0
    state.v["w"][:] = 1.0
    p.set_grads({"w": np.zeros(1)})
    before = p["w"].copy()
    adam_step(p, state)
    assert state.m["w"][0] == pytest.approx(0.9)
    assert state.v["w"][0] == pytest.approx(0.999)
    # the decayed first moment still moves w; with fresh moments it would not
    fresh = ParamSet()
    fresh["w"] = before.copy()
    s2 = AdamState.create(fresh)
    fresh.set_grads({"w": np.zeros(1)})
    adam_step(fresh, s2)
    np.testing.assert_array_equal(fresh["w"], before)


def test_adam_quadratic_converges():
    p = ParamSet()
    p["w"] = np.array([0.0])
    state = AdamState.create(p, lr=0.05)
    for _ in range(5000):
        p.set_grads({"w": 2.0 * (p["w"] - 3.0)})
        adam_step(p, state)
    assert abs(p["w"][0] - 3.0) < 1e-6


def test_adam_uninitialized():
    p = ParamSet()
    p["w"] = np.ones(2)
    with pytest.raises(UninitializedState):
        adam_step(p, AdamState.create(p))  # no gradients yet
    p.set_grads({"w": np.ones(2)})
    with pytest.raises(UninitializedState):
        adam_step(p, AdamState(1e-3, 0.9, 0.999, 1e-8, 0, {}, {}))


def test_adam_deterministic():
    def run():
        r = rng(7)
        p = ParamSet()
        p["w"] = r.normal(size=(4, 3))
        state = AdamState.create(p)
        for _ in range(10):
            p.set_grads({"w": r.normal(size=(4, 3))})
            adam_step(p, state)
        return p["w"]

    assert run().tobytes() == run().tobytes()


def test_param_set_rejects_bad_grad_shape():
    p = ParamSet()
    p["w"] = np.ones((2, 2))
    with pytest.raises(ShapeMismatch):
        p.set_grads({"w": np.ones(3)})
    with pytest.raises(KeyError):
        p.set_grads({"q": np.ones(3)})


def test_glorot_bounds():
    g = np.random.Generator(np.random.Philox(0))
    w = glorot_uniform(g, (30, 20), 30, 20)
    assert np.max(np.abs(w)) <= np.sqrt(6 / 50)


# --- finite differences --------------------------------------------------------


def test_finite_diff_sum_of_squares_and_linear():
    p = ParamSet()
    p["w"] = np.array([1.0, -2.0, 0.25])
    g = finite_diff_grad(lambda ps: float(np.sum(ps["w"] ** 2)), p, eps=1e-4)["w"]
    np.testing.assert_allclose(g, 2 * p["w"], atol=1e-8)
    c = np.array([3.0, -1.0, 2.0])
    g = finite_diff_grad(lambda ps: float(c @ ps["w"]), p)["w"]
    np.testing.assert_allclose(g, c, rtol=1e-8)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda ps: 0.0, p, eps=0.0)
