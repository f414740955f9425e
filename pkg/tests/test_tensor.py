import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrir import tensor as T
from fedrir.tensor import Graph, Tensor


def fd_check(build, arrays, h=1e-5, tol=1e-4):
    """Compare backward with central differences for a scalar builder."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    out = build(leaves)
    out.backward()
    numeric = T.finite_difference_gradient(lambda p: build(p).item(), arrays, h)
    for k in arrays:
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arrays[k])
        assert T.max_relative_error(analytic, numeric[k], floor=1e-5) < tol, k


# -- forward examples --------------------------------------------------------


def test_relu_forward():
    g = Graph(lambda b: {"y": T.relu(b["x"])}, {"x": (2,)})
    np.testing.assert_array_equal(T.forward(g, {"x": np.array([-1.0, 2.0])})["y"], [0.0, 2.0])


def test_identity_matmul_forward():
    g = Graph(lambda b: {"y": b["x"] @ b["W"]}, {"x": (1, 2), "W": (2, 2)})
    y = T.forward(g, {"x": np.ones((1, 2)), "W": np.eye(2)})["y"]
    np.testing.assert_array_equal(y, [[1.0, 1.0]])


def test_uniform_softmax_cross_entropy():
    loss = T.softmax_cross_entropy(np.zeros((1, 3)), [1])
    assert loss.item() == pytest.approx(math.log(3), abs=1e-12)
    assert loss.item() == pytest.approx(1.0986, abs=1e-4)


def test_forward_rejects_shape_mismatch():
    g = Graph(lambda b: {"y": T.relu(b["x"])}, {"x": (2,)})
    with pytest.raises(T.ShapeError):
        T.forward(g, {"x": np.zeros(3)})


def test_forward_rejects_non_finite():
    with pytest.raises(T.NumericError):
        T.exp(np.array([1000.0]))


def test_forward_is_pure():
    rng = np.random.default_rng(1)
    g = Graph(lambda b: {"y": T.mean_all(T.relu(b["x"] @ b["W"]))}, {"x": (3, 4), "W": (4, 2)})
    bind = {"x": rng.standard_normal((3, 4)), "W": rng.standard_normal((4, 2))}
    before = {k: v.copy() for k, v in bind.items()}
    a, b = T.forward(g, bind), T.forward(g, bind)
    assert a["y"].tobytes() == b["y"].tobytes()
    for k in bind:
        np.testing.assert_array_equal(bind[k], before[k])


# -- backward examples -------------------------------------------------------


def test_square_sum_gradient():
    g = Graph(lambda b: {"y": T.sum_all(b["x"] * b["x"])}, {"x": (1,)}, frozenset({"x"}))
    np.testing.assert_allclose(T.backward(g, {"x": np.array([3.0])}, "y")["x"], [6.0])


def test_unused_parameter_gets_exact_zero():
    g = Graph(
        lambda b: {"y": T.sum_all(b["x"])},
        {"x": (2,), "W": (2, 2)},
        frozenset({"x", "W"}),
    )
    grads = T.backward(g, {"x": np.ones(2), "W": np.ones((2, 2))}, "y")
    assert np.all(grads["W"] == 0.0)


def test_backward_requires_scalar():
    g = Graph(lambda b: {"y": b["x"] * 2.0}, {"x": (2,)}, frozenset({"x"}))
    with pytest.raises(T.ShapeError):
        T.backward(g, {"x": np.ones(2)}, "y")


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(7)
    arrays = {
        "W1": rng.standard_normal((4, 5)),
        "b1": rng.standard_normal(5),
        "W2": rng.standard_normal((5, 3)),
        "b2": rng.standard_normal(3),
    }
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)

    def build(p):
        h = T.relu(T.bias_add(T.as_tensor(x) @ p["W1"], p["b1"]))
        return T.softmax_cross_entropy(T.bias_add(h @ p["W2"], p["b2"]), y)

    fd_check(build, arrays)


def test_graph_trace_is_topological():
    g = Graph(
        lambda b: {"y": T.mean_all(T.relu(T.bias_add(b["x"] @ b["W"], b["b"])))},
        {"x": (2, 3), "W": (3, 2), "b": (2,)},
    )
    nodes = g.trace({"x": np.ones((2, 3)), "W": np.ones((3, 2)), "b": np.zeros(2)})
    for n in nodes:
        assert all(i < n.id for i in n.inputs)
    assert nodes[-1].op == "mean" and nodes[-1].shape == ()


# -- finite differences ------------------------------------------------------


def test_fd_square():
    g = T.finite_difference_gradient(lambda p: float(p["x"][0] ** 2), {"x": np.array([2.0])}, 1e-5)
    assert abs(g["x"][0] - 4.0) < 1e-8


def test_fd_sin():
    g = T.finite_difference_gradient(lambda p: math.sin(p["x"][0]), {"x": np.array([0.0])}, 1e-5)
    assert abs(g["x"][0] - 1.0) < 1e-9


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        T.finite_difference_gradient(lambda p: 0.0, {"x": np.zeros(1)}, 0.0)


def test_fd_rejects_non_finite():
    with pytest.raises(T.NumericError):
        T.finite_difference_gradient(lambda p: float("nan"), {"x": np.zeros(1)})


# -- per-op gradient properties ---------------------------------------------

small = st.integers(min_value=1, max_value=4)
seeds = st.integers(min_value=0, max_value=2**31 - 1)


@settings(max_examples=25, deadline=None)
@given(seeds, small, small)
def test_elementwise_ops_gradients(seed, b, k):
    rng = np.random.default_rng(seed)
    arrays = {"a": rng.standard_normal((b, k)), "c": rng.standard_normal((b, k))}
    # keep relu/clamp inputs away from their kinks
    arrays["a"] += np.sign(arrays["a"]) * 0.05
    fd_check(lambda p: T.mean_all(T.add(p["a"], p["c"]) * p["c"]), arrays)
    fd_check(lambda p: T.sum_all(T.sub(p["a"], p["c"])), arrays)
    fd_check(lambda p: T.mean_all(T.relu(p["a"]) * p["c"]), arrays)
    fd_check(lambda p: T.mean_all(T.exp(p["a"]) * p["c"]), arrays)
    fd_check(lambda p: T.mean_all(T.log(T.exp(p["a"]) + 1.0)), arrays)
    fd_check(lambda p: T.mean_all(T.clamp(p["a"], -0.5, 0.5) * p["c"]), arrays)


@settings(max_examples=25, deadline=None)
@given(seeds, small, small, small)
def test_structural_ops_gradients(seed, b, k, m):
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.standard_normal((b, k)), "W": rng.standard_normal((k, m)), "bias": rng.standard_normal(m),
              "z": rng.standard_normal((b, m))}
    perm = rng.integers(0, b, size=b)
    fd_check(lambda p: T.mean_all(T.bias_add(p["x"] @ p["W"], p["bias"]) * p["z"]), arrays)
    fd_check(lambda p: T.mean_all(T.concat([p["x"], p["z"]], axis=1) * T.concat([p["x"], p["z"]], axis=1)), arrays)
    fd_check(lambda p: T.mean_all(T.take_rows(p["z"], perm) * p["z"]), arrays)
    fd_check(lambda p: T.squared_error_mean(p["x"] @ p["W"], p["z"]), arrays)


@settings(max_examples=25, deadline=None)
@given(seeds, st.integers(2, 5), small, small)
def test_loss_ops_gradients(seed, b, k, c):
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.standard_normal((b, k)), "mu": rng.standard_normal((b, k)), "lv": rng.standard_normal((b, k)),
              "logits": rng.standard_normal((b, c + 1))}
    labels = rng.integers(0, c + 1, size=b)
    fd_check(lambda p: T.mean_all(T.gaussian_log_density(p["x"], p["mu"], p["lv"])), arrays)
    fd_check(lambda p: T.softmax_cross_entropy(p["logits"], labels), arrays)


def test_concat_gradient_routes_slices():
    a = Tensor(np.zeros((2, 2)), requires_grad=True)
    b = Tensor(np.zeros((2, 3)), requires_grad=True)
    weights = np.arange(10.0).reshape(2, 5)
    T.sum_all(T.concat([a, b], axis=1) * weights).backward()
    np.testing.assert_array_equal(a.grad, weights[:, :2])
    np.testing.assert_array_equal(b.grad, weights[:, 2:])


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    arrays = {"W": rng.standard_normal((4, 3)), "x": rng.standard_normal((5, 4))}
    g = Graph(lambda b: {"y": T.mean_all(T.relu(b["x"] @ b["W"]))}, {"W": (4, 3), "x": (5, 4)}, frozenset({"W"}))
    a, b = T.backward(g, arrays, "y"), T.backward(g, arrays, "y")
    assert a["W"].tobytes() == b["W"].tobytes()


def test_gaussian_log_density_closed_form():
    x = np.array([[0.3, -1.2]])
    mu = np.array([[0.1, 0.4]])
    lv = np.array([[0.5, -0.7]])
    expected = sum(
        -0.5 * math.log(2 * math.pi) - 0.5 * lv[0, i] - (x[0, i] - mu[0, i]) ** 2 / (2 * math.exp(lv[0, i]))
        for i in range(2)
    )
    assert T.gaussian_log_density(x, mu, lv).data[0] == pytest.approx(expected, abs=1e-12)


def test_float32_mode(monkeypatch):
    monkeypatch.setenv("FEDRIR_PRECISION", "f32")
    assert T.default_dtype() is np.float32
    assert T.as_tensor([1, 2]).data.dtype == np.float32
    monkeypatch.setenv("FEDRIR_PRECISION", "f16")
    with pytest.raises(ValueError):
        T.default_dtype()
