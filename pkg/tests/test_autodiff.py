import numpy as np
import pytest

from mustkd import autodiff as ad

GRAD_TOL = 1e-4

# (name, builder(params, inputs) -> scalar, parameter shapes)
OPS = [
    ("add", lambda p, _: (p["a"] + p["b"]).sum(), {"a": (3, 2), "b": (2,)}),
    ("sub", lambda p, _: ((p["a"] - p["b"]) * (p["a"] - p["b"])).sum(), {"a": (2, 3), "b": (1, 3)}),
    ("mul", lambda p, _: (p["a"] * p["b"]).sum(), {"a": (2, 3), "b": (2, 3)}),
    ("div", lambda p, _: (ad.tanh(p["a"] / 3.0)).sum(), {"a": (2, 2)}),
    ("neg", lambda p, _: (-p["a"] * p["a"]).sum(), {"a": (3,)}),
    ("tanh", lambda p, _: ad.tanh(p["a"]).sum(), {"a": (2, 3)}),
    ("sigmoid", lambda p, _: (ad.sigmoid(p["a"]) * p["a"]).sum(), {"a": (4,)}),
    ("exp", lambda p, _: ad.exp(p["a"]).sum(), {"a": (2, 2)}),
    ("log", lambda p, _: ad.log(ad.exp(p["a"]) + 0.5).sum(), {"a": (3,)}),
    ("softmax", lambda p, _: (ad.softmax(p["a"]) * np.arange(4.0)).sum(), {"a": (2, 4)}),
    ("log_softmax", lambda p, _: (ad.log_softmax(p["a"], axis=0) * np.arange(6.0).reshape(3, 2)).sum(), {"a": (3, 2)}),
    ("matmul", lambda p, _: ad.tanh(p["a"] @ p["b"]).sum(), {"a": (2, 3, 4), "b": (4, 2)}),
    ("matmul_vec", lambda p, _: ad.tanh(p["a"] @ p["v"]).sum(), {"a": (3, 4), "v": (4,)}),
    ("swap_last", lambda p, _: (ad.swap_last(p["a"]) * np.arange(6.0).reshape(3, 2)).sum(), {"a": (2, 3)}),
    ("reshape", lambda p, _: (ad.reshape(p["a"], (3, 2)) * np.arange(6.0).reshape(3, 2)).sum(), {"a": (2, 3)}),
    ("tsum_axis", lambda p, _: ad.tanh(ad.tsum(p["a"], axis=1)).sum(), {"a": (3, 4)}),
    ("tmax", lambda p, _: ad.tmax(p["a"], axis=-1).sum(), {"a": (3, 4)}),
    ("mean", lambda p, _: ad.mean(p["a"] * p["a"]), {"a": (5,)}),
    ("concat", lambda p, _: (ad.concat([p["a"], p["b"]], axis=-1) * np.arange(10.0).reshape(2, 5)).sum(), {"a": (2, 2), "b": (2, 3)}),
    ("getitem", lambda p, _: (p["a"][1:, ::2] * p["a"][1:, ::2]).sum(), {"a": (3, 4)}),
    ("take_rows", lambda p, _: ad.tanh(ad.take_rows(p["e"], np.array([[0, 2], [2, 2]]))).sum(), {"e": (3, 2)}),
    ("recurrence", lambda p, _: (ad.recurrence(p["x"], p["w"], np.array([[1, 1, 0], [1, 1, 1]])) * np.arange(12.0).reshape(2, 3, 2)).sum(), {"x": (2, 3, 2), "w": (2, 2)}),
    ("recurrence_reverse", lambda p, _: ad.recurrence(p["x"], p["w"], np.array([[1, 0, 0], [1, 1, 1]]), reverse=True).sum(), {"x": (2, 3, 2), "w": (2, 2)}),
    ("ctc_loss", lambda p, _: ad.ctc_loss(p["z"], [[0, 1], [1]], [3, 2]).sum(), {"z": (2, 3, 3)}),
]


@pytest.mark.parametrize("name,fn,shapes", OPS, ids=[o[0] for o in OPS])
def test_gradients_at_random_points(name, fn, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    graph = ad.Graph(fn, {k: np.zeros(s) for k, s in shapes.items()})
    # tmax needs a unique maximum for differentiability; random points have one
    for _ in range(10):
        point = {k: rng.normal(size=s) for k, s in shapes.items()}
        assert ad.grad_check(graph, point) <= GRAD_TOL


def test_known_derivative_of_a_polynomial():
    graph = ad.Graph(lambda p, _: (p["x"] * p["x"] * p["x"]).sum(), {"x": np.array([2.0, -1.0])})
    graph.forward()
    np.testing.assert_allclose(graph.backward()["x"], [12.0, 3.0])


def test_shared_subexpression_accumulates():
    def fn(p, _):
        y = p["x"] * 2.0
        return (y + y * y).sum()

    graph = ad.Graph(fn, {"x": np.array([1.5])})
    graph.forward()
    # d/dx (2x + 4x^2) = 2 + 8x
    np.testing.assert_allclose(graph.backward()["x"], [14.0])


def test_unused_parameter_gets_zero_gradient():
    graph = ad.Graph(lambda p, _: p["a"].sum(), {"a": np.ones(2), "b": np.ones(3)})
    graph.forward()
    assert not graph.backward()["b"].any()


def test_inputs_are_constants():
    graph = ad.Graph(lambda p, x: (p["w"] * x["x"]).sum(), {"w": np.array([1.0, 2.0])})
    graph.forward({"x": np.array([3.0, 4.0])})
    np.testing.assert_allclose(graph.backward()["w"], [3.0, 4.0])


def test_module_level_forward_backward():
    graph = ad.Graph(lambda p, _: ad.tanh(p["a"]).sum(), {"a": np.zeros(3)})
    assert ad.forward(graph) == 0.0
    np.testing.assert_allclose(ad.backward(graph)["a"], np.ones(3))


def test_backward_before_forward_is_an_error():
    with pytest.raises(ad.GraphStateError):
        ad.Graph(lambda p, _: p["a"].sum(), {"a": np.ones(2)}).backward()


def test_shape_mismatch_names_a_node():
    with pytest.raises(ad.ShapeError) as err:
        ad.Tensor(np.ones((2, 3))) + ad.Tensor(np.ones((4,)))
    assert isinstance(err.value.node_id, int)
    with pytest.raises(ad.ShapeError):
        ad.Tensor(np.ones((2, 3))) @ ad.Tensor(np.ones((2, 3)))


def test_non_finite_result_is_reported_with_its_op():
    with pytest.raises(ad.NonFiniteError) as err:
        ad.exp(ad.Tensor(np.array([1000.0])))
    assert err.value.op == "exp"


def test_log_is_floored_instead_of_minus_infinity():
    assert np.isfinite(ad.log(ad.Tensor(np.array([0.0]))).data).all()


def test_grad_check_rejects_non_scalar_output():
    with pytest.raises(ValueError):
        ad.grad_check(ad.Graph(lambda p, _: p["a"] * 2.0, {"a": np.ones(2)}))


def test_grad_check_detects_a_wrong_gradient():
    def bad_square(x):
        return ad._node(x.data**2, (x,), lambda g: (g * x.data,), "bad_square")

    graph = ad.Graph(lambda p, _: bad_square(p["a"]).sum(), {"a": np.array([1.0, 2.0])})
    assert ad.grad_check(graph) > 0.1


def test_node_ids_follow_creation_order():
    a = ad.Tensor(1.0, requires_grad=True)
    b = a * 2.0
    c = b + a
    assert a.id < b.id < c.id
