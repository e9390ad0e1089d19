import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mwadapter import tensor as T
from mwadapter.gradcheck import finite_diff_check
from mwadapter.tensor import GradTape, Parameter, ShapeError, Tensor, backward


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def param(name, arr):
    return Parameter(name, Tensor(np.asarray(arr, dtype=np.float64)))


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_against_triple_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    expected = naive_matmul(a, b)
    np.testing.assert_array_equal(expected, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, expected)


def test_matmul_zeros():
    out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).normal(size=(3, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_random_against_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)


# -------------------------------------------------------------- layer_norm


def test_layer_norm_constant_row_is_zero():
    x = Tensor([[5.0, 5.0, 5.0, 5.0]])
    out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_zero_gamma_gives_beta():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    b = np.array([0.5, -1.0, 2.0, 3.0])
    out = T.layer_norm(x, Tensor(np.zeros(4)), Tensor(b), 1e-5)
    np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))


def test_layer_norm_hand_value():
    out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-15)


def test_layer_norm_width_mismatch():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), rows=st.integers(1, 8), d=st.integers(2, 8))
def test_layer_norm_standardizes_rows(seed, rows, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, d)) * 3.0 + rng.normal()
    x[:, 0] += 5.0  # keep row variance well above eps
    y = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), 1e-5).data
    assert np.all(np.abs(y.mean(axis=1)) <= 1e-6)
    assert np.all(np.abs(y.var(axis=1) - 1.0) <= 1e-4)


# -------------------------------------------------------------- relu/softmax


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(T.relu(Tensor(-np.arange(1.0, 5.0))).data, np.zeros(4))


def test_relu_gradient_is_positivity_indicator():
    p = param("x", [-1.0, 2.0])
    with GradTape() as tape:
        loss = T.sum(T.relu(p.tensor))
    np.testing.assert_array_equal(backward(loss, tape)["x"], [0.0, 1.0])


def test_relu_subgradient_at_zero():
    p = param("x", [0.0])
    with GradTape() as tape:
        loss = T.sum(T.relu(p.tensor))
    assert backward(loss, tape)["x"][0] == 0.0


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(T.softmax(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)
    out = T.softmax(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)


def test_softmax_log_values():
    out = T.softmax(Tensor([[math.log(1), math.log(2), math.log(3)]])).data
    np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, shift):
    x = np.random.default_rng(seed).normal(size=(3, 7)) * 4
    y = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(y >= 0)
    np.testing.assert_allclose(T.softmax(Tensor(x + shift)).data, y, atol=1e-6)


# ---------------------------------------------------------------- backward


def test_backward_linear_matches_outer_structure():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3))
    w = param("w", rng.normal(size=(3, 4)))
    with GradTape() as tape:
        loss = T.sum(T.matmul(Tensor(x), w.tensor))
    g = backward(loss, tape)["w"]
    # d/dW sum(x W) = column sums of x replicated along the output axis
    np.testing.assert_allclose(g, np.tile(x.sum(axis=0)[:, None], (1, 4)), atol=1e-12)
    err = finite_diff_check(lambda: T.sum(T.matmul(Tensor(x), w.tensor)), [w])
    assert err.max_rel_error <= 1e-8


def test_backward_untouched_parameter_absent():
    a = param("a", [1.0, 2.0])
    b = param("b", [3.0])
    with GradTape() as tape:
        loss = T.sum(T.mul(a.tensor, a.tensor))
    grads = backward(loss, tape)
    assert "b" not in grads
    np.testing.assert_array_equal(grads["a"], [2.0, 4.0])


def test_backward_zero_upstream_gives_zero_down_grad():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(3, 4)))
    w_down = param("w_down", rng.normal(size=(4, 2)))
    w_up = param("w_up", np.zeros((2, 4)))
    with GradTape() as tape:
        h = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        loss = T.sum(T.matmul(T.relu(T.matmul(h, w_down.tensor)), w_up.tensor))
    grads = backward(loss, tape)
    np.testing.assert_array_equal(grads["w_down"], np.zeros((4, 2)))


def test_backward_rejects_non_scalar():
    p = param("p", [1.0, 2.0])
    with GradTape() as tape:
        out = T.mul(p.tensor, 2.0)
    with pytest.raises(ShapeError):
        backward(out, tape)


def test_frozen_parameter_gets_no_gradient():
    a = param("a", [1.0, 2.0])
    b = param("b", [3.0, 4.0])
    b.freeze()
    with GradTape() as tape:
        loss = T.sum(T.mul(a.tensor, b.tensor))
    grads = backward(loss, tape)
    assert set(grads) == {"a"}


def test_non_finite_forward_raises():
    with pytest.raises(T.NonFiniteError):
        T.mul(Tensor([1.0]), float("inf"))


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(6, 8)))
    w = param("w", rng.normal(size=(8, 8)))

    def run():
        with GradTape() as tape:
            h = T.softmax(T.matmul(x, w.tensor))
            loss = T.sum(T.gelu(T.layer_norm(h, Tensor(np.ones(8)), Tensor(np.zeros(8)))))
        return backward(loss, tape)["w"]

    assert run().tobytes() == run().tobytes()


# --------------------------------------------------- finite-difference sweep


def _op_losses(rng):
    """Scalar losses exercising each differentiable op on small random tensors."""
    m, k, n = rng.integers(1, 6, size=3)
    a = param("a", rng.normal(size=(m, k)))
    b = param("b", rng.normal(size=(k, n)))
    g = param("g", rng.normal(size=(k,)))
    beta = param("beta", rng.normal(size=(k,)))
    c = Tensor(rng.normal(size=(m, n)))
    bat = param("bat", rng.normal(size=(2, m, k)))
    ids = rng.integers(0, m, size=5)
    yield "matmul", lambda: T.sum(T.mul(T.matmul(a.tensor, b.tensor), c)), [a, b]
    yield "batched_matmul", lambda: T.sum(T.matmul(bat.tensor, T.transpose(bat.tensor))), [bat]
    yield "layer_norm", lambda: T.sum(T.mul(T.layer_norm(a.tensor, g.tensor, beta.tensor), a.tensor)), [a, g, beta]
    yield "softmax", lambda: T.sum(T.mul(T.softmax(a.tensor), a.tensor)), [a]
    yield "gelu", lambda: T.sum(T.mul(T.gelu(a.tensor), a.tensor)), [a]
    yield "relu", lambda: T.sum(T.mul(T.relu(T.add(a.tensor, 0.3)), a.tensor)), [a]
    yield "l2_normalize", lambda: T.sum(T.mul(T.l2_normalize(a.tensor), T.relu(a.tensor))), [a]
    yield "cross_entropy", lambda: T.cross_entropy(T.matmul(a.tensor, b.tensor), np.zeros(m, dtype=int)), [a, b]
    yield "take_rows", lambda: T.sum(T.mul(T.take_rows(a.tensor, ids), T.take_rows(a.tensor, ids))), [a]
    yield "concat_getitem", lambda: T.sum(T.mul(T.concat([a.tensor, a.tensor], 0)[1:], 2.0)), [a]
    yield "broadcast_add", lambda: T.sum(T.mul(T.add(a.tensor, g.tensor), T.add(a.tensor, g.tensor))), [a, g]


@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_finite_difference_check(seed):
    for name, f, params in _op_losses(np.random.default_rng(seed)):
        # small eps: LayerNorm over 2 features is curved enough for 1e-4 to show truncation error
        res = finite_diff_check(f, params, eps=1e-5)
        assert res.max_rel_error <= 1e-5, (name, seed, res)


def test_finite_diff_exact_for_quadratic():
    w = param("w", [3.0])
    res = finite_diff_check(lambda: T.sum(T.mul(w.tensor, w.tensor)), [w])
    assert res.max_rel_error <= 1e-10


def test_finite_diff_skips_frozen():
    w = param("w", [3.0])
    v = param("v", [2.0])
    v.freeze()
    res = finite_diff_check(lambda: T.sum(T.mul(w.tensor, v.tensor)), [w, v])
    assert res.checked == 1
