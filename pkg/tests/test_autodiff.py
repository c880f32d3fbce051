import numpy as np
import pytest

from drift_forge import autodiff as ad
from drift_forge.autodiff import GraphConsumedError, NonFiniteError, Tensor

from oracles import central_diff


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))))


def check_grad(fn, *arrays, tol=1e-5):
    _, grads = ad.grad(fn, arrays)
    for k, x in enumerate(arrays):
        def f(v, k=k):
            args = list(arrays)
            args[k] = v
            return float(ad.value_of(fn(*args)))
        assert rel_err(grads[k], central_diff(f, x)) < tol


def test_product_grads():
    x, y = Tensor(2.0, requires_grad=True), Tensor(3.0, requires_grad=True)
    ad.backward(x * y)
    assert (x.grad, y.grad) == (3.0, 2.0)


def test_tanh_at_zero():
    x = Tensor(0.0, requires_grad=True)
    ad.backward(ad.tanh(x))
    assert x.grad == 1.0


def test_abs_subgradient_zero():
    x = Tensor(np.array([0.0, -2.0, 3.0]), requires_grad=True)
    ad.backward(ad.tsum(ad.absolute(x)))
    np.testing.assert_array_equal(x.grad, [0.0, -1.0, 1.0])


def test_shared_node_accumulates():
    x = Tensor(3.0, requires_grad=True)
    y = x * x + x
    ad.backward(y)
    assert x.grad == 7.0


def test_backward_twice_rejected():
    x = Tensor(1.5, requires_grad=True)
    y = ad.tanh(x) * 2.0
    ad.backward(y)
    with pytest.raises(GraphConsumedError):
        ad.backward(y)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(x * 2.0)


def test_invalid_points_raise():
    x = Tensor(np.array([1.0, 0.0]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        ad.div(1.0, x)
    with pytest.raises(NonFiniteError):
        ad.sqrt(Tensor(-1.0, requires_grad=True))
    with pytest.raises(NonFiniteError):
        ad.sqrt(Tensor(0.0, requires_grad=True))
    with pytest.raises(NonFiniteError):
        ad.arcsin(Tensor(1.0, requires_grad=True))


def test_plain_arrays_pass_through():
    out = ad.tanh(np.array([0.0, 1.0]))
    assert isinstance(out, np.ndarray)
    assert isinstance(ad.add(1.0, 2.0), np.ndarray | np.floating | float)


rng = np.random.default_rng(0)


@pytest.mark.parametrize(
    "name,fn,shapes",
    [
        ("add_broadcast", lambda a, b: ad.tsum((a + b) ** 2), [(3, 4), (4,)]),
        ("sub_mul", lambda a, b: ad.tsum((a - b) * a), [(5,), (5,)]),
        ("div", lambda a, b: ad.tsum(a / (b * b + 1.0)), [(4,), (4,)]),
        ("matmul", lambda a, b: ad.tsum(ad.tanh(a @ b)), [(3, 4), (4, 2)]),
        ("batched_matmul", lambda a, b: ad.tsum((a @ b) ** 2), [(2, 3, 3), (3, 2)]),
        ("arctan2", lambda a, b: ad.tsum(ad.arctan2(a, b * b + 0.5)), [(6,), (6,)]),
        ("sin_cos_exp", lambda a: ad.tsum(ad.sin(a) * ad.cos(a) + ad.exp(0.1 * a)), [(5,)]),
        ("sqrt", lambda a: ad.tsum(ad.sqrt(a * a + 1.0)), [(5,)]),
        ("arcsin", lambda a: ad.tsum(ad.arcsin(0.5 * ad.tanh(a))), [(5,)]),
        ("mean_axis", lambda a: ad.tsum(ad.mean(a, axis=0) ** 2), [(4, 3)]),
        ("getitem", lambda a: ad.tsum(a[1:, ::2] * a[:-1, ::2]), [(4, 4)]),
        ("fancy_index", lambda a: ad.tsum(a[[0, 0, 2]] ** 2), [(3, 2)]),
        ("reshape_swap", lambda a: ad.tsum(ad.swapaxes(ad.reshape(a, (2, 3)), 0, 1) * np.arange(6.0).reshape(3, 2)), [(6,)]),
        ("stack_concat", lambda a, b: ad.tsum(ad.stack([a, b]) ** 2) + ad.tsum(ad.concatenate([a, b]) * 2.0), [(3,), (3,)]),
        ("expand_dims", lambda a: ad.tsum(ad.expand_dims(a, 0) * np.ones((2, 3))), [(3,)]),
        ("power", lambda a: ad.tsum(ad.power(a * a + 1.0, 1.5)), [(4,)]),
        ("abs", lambda a: ad.tsum(ad.absolute(a)), [(5,)]),
    ],
)
def test_gradient_against_central_differences(name, fn, shapes):
    for _ in range(5):
        arrays = [rng.normal(size=s) for s in shapes]
        check_grad(fn, *arrays)


def test_take_along_axis_grad():
    x = rng.normal(size=(4, 3))
    order = np.argsort(x, axis=0)
    check_grad(lambda a: ad.tsum(ad.take_along_axis(a, order, 0) * np.arange(12.0).reshape(4, 3)), x)


def test_where_routes_gradient():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    ad.backward(ad.tsum(ad.where(np.array([True, False]), x * 3.0, x * 5.0)))
    np.testing.assert_array_equal(x.grad, [3.0, 5.0])
