"""Engine tests: forward examples, gradient oracles, second-order checks."""

import numpy as np
import pytest

from distillkit import autodiff as ad
from distillkit import nn_ops
from distillkit.errors import GraphError, ShapeError


def tensor(x, rg=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), rg)


# ---------------------------------------------------------------------------
# forward examples


def test_relu_definition():
    out = ad.relu(tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_avg_pool_constant_plane():
    c = 3.7
    x = tensor(np.full((1, 1, 4, 4), c))
    out = nn_ops.avg_pool2d(x)
    assert out.shape == (1, 1, 2, 2)
    assert np.allclose(out.data, c, rtol=0, atol=1e-15)


def test_squared_l2_norm_hand():
    assert ad.squared_l2_norm(tensor([3.0, 4.0])).item() == pytest.approx(25.0, abs=1e-12)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError) as e:
        ad.matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 3))))
    assert "matmul" in str(e.value) and "(2, 3)" in str(e.value)
    with pytest.raises(ShapeError):
        ad.add(tensor(np.zeros(3)), tensor(np.zeros(4)))


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    a = nn_ops.conv2d(tensor(x), tensor(w), tensor(b)).data
    c = nn_ops.conv2d(tensor(x), tensor(w), tensor(b)).data
    assert np.array_equal(a, c)


# ---------------------------------------------------------------------------
# grad basics


def test_grad_polynomial():
    x = tensor(3.0, rg=True)
    (g,) = ad.grad(ad.mul(x, x), [x])
    assert g.item() == pytest.approx(6.0, abs=1e-14)


def test_grad_linear_form():
    v = np.array([1.5, -2.0, 0.25])
    w = tensor(np.ones(3), rg=True)
    (g,) = ad.grad(ad.tensor_sum(ad.mul(w, tensor(v))), [w])
    assert np.allclose(g.data, v, rtol=0, atol=1e-15)


def test_second_order_hand_case():
    x = tensor(2.0, rg=True)
    y = ad.mul(ad.mul(x, x), x)
    (g,) = ad.grad(y, [x], create_graph=True)
    assert g.item() == pytest.approx(12.0, abs=1e-12)
    (h,) = ad.grad(g, [x])
    assert h.item() == pytest.approx(12.0, abs=1e-12)


def test_non_scalar_loss_rejected():
    x = tensor([1.0, 2.0], rg=True)
    with pytest.raises(GraphError):
        ad.grad(ad.mul(x, x), [x])


def test_unreachable_wrt_zero_plus_warning():
    x = tensor(1.0, rg=True)
    z = tensor([5.0, 6.0], rg=True)
    with pytest.warns(RuntimeWarning, match="unreachable"):
        g_x, g_z = ad.grad(ad.mul(x, x), [x, z])
    assert g_x.item() == pytest.approx(2.0)
    assert np.array_equal(g_z.data, np.zeros(2))


def test_grad_linearity():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4, 3))
    a, b = 2.75, -1.25

    def f(x):
        return ad.tensor_sum(ad.mul(x, ad.exp(ad.scale(x, 0.3))))

    def g(x):
        return ad.squared_l2_norm(ad.relu(x))

    x = tensor(x0, rg=True)
    (grad_combo,) = ad.grad(ad.add(ad.scale(f(x), a), ad.scale(g(x), b)), [x])
    (grad_f,) = ad.grad(f(x), [x])
    (grad_g,) = ad.grad(g(x), [x])
    assert np.allclose(grad_combo.data, a * grad_f.data + b * grad_g.data,
                       rtol=1e-12, atol=1e-12)


def test_grad_check_constant_function():
    err = ad.grad_check(lambda x: ad.scale(ad.tensor_sum(ad.mul(x, tensor(np.zeros(4)))), 1.0),
                        [np.ones(4)])
    assert err == 0.0


def test_grad_check_squared_norm():
    rng = np.random.default_rng(11)
    err = ad.grad_check(ad.squared_l2_norm, [rng.normal(size=10)], step=1e-5)
    assert err < 1e-6


def test_grad_check_rejects_nonfinite():
    from distillkit.errors import GradCheckError

    def f(x):
        return ad.log(ad.tensor_sum(x))

    with pytest.raises(GradCheckError, match="coordinate"):
        ad.grad_check(f, [np.array([1e-7])], step=1e-5)


# ---------------------------------------------------------------------------
# per-op gradient checks (first order < 1e-6, second order < 1e-4)

_RNG = np.random.default_rng(2024)


def _away_from_zero(shape, low=0.3, high=1.7):
    """Random values with |x| >= low: keeps ReLU kinks out of FD reach."""
    return _RNG.uniform(low, high, size=shape) * _RNG.choice([-1.0, 1.0], size=shape)


def _projection(shape):
    return tensor(_RNG.normal(size=shape))


def _op_cases():
    r2 = _projection((3, 4))
    r4 = _projection((2, 2, 4, 4))
    rp = _projection((2, 2, 2, 2))
    rc = _projection((2, 3, 4, 4))
    y = np.zeros((3, 4))
    y[np.arange(3), [0, 2, 3]] = 1.0
    return {
        "add": (lambda a, b: ad.tensor_sum(ad.mul(ad.add(a, b), r2)),
                [(3, 4), (1, 4)]),
        "sub": (lambda a, b: ad.tensor_sum(ad.mul(ad.sub(a, b), r2)),
                [(3, 4), (3, 1)]),
        "mul": (lambda a, b: ad.tensor_sum(ad.mul(ad.mul(a, b), r2)),
                [(3, 4), (4,)]),
        "scale": (lambda a: ad.tensor_sum(ad.mul(ad.scale(a, -2.5), r2)), [(3, 4)]),
        "matmul": (lambda a, b: ad.tensor_sum(ad.mul(ad.matmul(a, b), r2)),
                   [(3, 5), (5, 4)]),
        "reshape": (lambda a: ad.tensor_sum(ad.mul(ad.reshape(a, (3, 4)), r2)), [(12,)]),
        "concat": (lambda a, b: ad.tensor_sum(ad.mul(ad.concat([a, b], axis=1), r2)),
                   [(3, 1), (3, 3)]),
        "sum": (lambda a: ad.tensor_sum(ad.mul(ad.tensor_sum(a, axis=0), _projection((4,)))),
                [(3, 4)]),
        "mean": (lambda a: ad.tensor_sum(ad.mul(ad.tensor_mean(a, axis=1, keepdims=True),
                                                _projection((3, 1)))), [(3, 4)]),
        "squared_l2_norm": (ad.squared_l2_norm, [(7,)]),
        "relu": (lambda a: ad.tensor_sum(ad.mul(ad.relu(a), r2)), [(3, 4)]),
        "softmax_cross_entropy": (
            lambda z: ad.softmax_cross_entropy_with_onehot(z, tensor(y)), [(3, 4)]),
        "conv2d": (lambda x, w, b: ad.tensor_sum(ad.mul(nn_ops.conv2d(x, w, b), rc)),
                   [(2, 2, 4, 4), (3, 2, 3, 3), (3,)]),
        "instance_norm": (lambda x: ad.tensor_sum(ad.mul(nn_ops.instance_norm(x), r4)),
                          [(2, 2, 4, 4)]),
        "avg_pool2d": (lambda x: ad.tensor_sum(ad.mul(nn_ops.avg_pool2d(x), rp)),
                       [(2, 2, 4, 4)]),
        "permute": (lambda a: ad.tensor_sum(ad.mul(ad.permute(a, (1, 0)),
                                                   _projection((4, 3)))), [(3, 4)]),
        "take_put": (lambda a: ad.tensor_sum(ad.mul(
            ad.take_flat(a, np.array([0, 2, 2, 5]), (4,)), _projection((4,)))), [(6,)]),
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_op_grad_check(name):
    f, shapes = _op_cases()[name]
    worst = 0.0
    for _ in range(100):
        point = [_away_from_zero(s) for s in shapes]
        worst = max(worst, ad.grad_check(f, point, step=1e-5))
    assert worst < 1e-6, f"{name}: worst relative error {worst}"


def second_order_error(f, point, step=1e-4):
    """FD of the first gradient vs grad composed twice (directional)."""
    base = [np.asarray(p, dtype=np.float64) for p in point]
    rng = np.random.default_rng(5)
    us = [rng.normal(size=p.shape) for p in base]

    leaves = [ad.Tensor(p, requires_grad=True) for p in base]
    gs = ad.grad(f(*leaves), leaves, create_graph=True)
    h = None
    for g, u in zip(gs, us):
        term = ad.tensor_sum(ad.mul(g, ad.Tensor(u)))
        h = term if h is None else ad.add(h, term)
    analytic = [g.data.copy() for g in ad.grad(h, leaves)]

    def directional(arrays):
        ls = [ad.Tensor(p, requires_grad=True) for p in arrays]
        gs2 = ad.grad(f(*ls), ls)
        return float(sum(np.sum(g.data * u) for g, u in zip(gs2, us)))

    worst = 0.0
    for i, arr in enumerate(base):
        flat = arr.ravel()
        for k in range(flat.size):
            plus, minus = arr.copy(), arr.copy()
            plus.ravel()[k] += step
            minus.ravel()[k] -= step
            numeric = (directional(base[:i] + [plus] + base[i + 1 :])
                       - directional(base[:i] + [minus] + base[i + 1 :])) / (2 * step)
            a = analytic[i].ravel()[k]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_op_second_order(name):
    f, shapes = _op_cases()[name]
    worst = 0.0
    for _ in range(3):
        point = [_away_from_zero(s) for s in shapes]
        worst = max(worst, second_order_error(f, point))
    assert worst < 1e-4, f"{name}: worst second-order relative error {worst}"
