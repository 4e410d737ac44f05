import numpy as np
import pytest

from kpred import autodiff as ad


def leaf(rng, *shape):
    return ad.tensor(rng.normal(size=shape), requires_grad=True)


def test_relu_values_and_mask():
    x = ad.tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = ad.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    ad.backward(ad.sum_(y))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(ad.tensor(np.full(7, 3.0))).data, np.full(7, 1 / 7))


def test_matmul_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    ref = [[sum(a[i, k] * b[k, j] for k in range(3)) for j in range(2)] for i in range(2)]
    np.testing.assert_allclose(ad.matmul(a, b).data, ref, atol=1e-15)


@pytest.mark.parametrize("op,args", [
    (ad.add, ((2, 3), (3, 3))), (ad.mul, ((2,), (3,))), (ad.matmul, ((2, 3), (2, 3))),
    (ad.l1_rows, ((2, 3), (2, 4))), (ad.sqdist, ((2, 3), (2, 4))),
])
def test_shape_errors_name_op(op, args):
    a, b = (ad.tensor(np.zeros(s)) for s in args)
    with pytest.raises(ad.ShapeError, match=op.__name__.rstrip("_")):
        op(a, b)


def test_backward_square():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum_(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_constant_and_unreachable():
    store = ad.ParamStore(np.float64)
    w = store.add("w", np.ones(3))
    store.add("unused", np.ones(2))
    store.zero_grad()
    ad.backward(ad.sum_(ad.const(np.ones(3))))
    assert all(not np.any(p.grad) for p in store.params.values())
    ad.backward(ad.sum_(w))
    np.testing.assert_array_equal(store["unused"].grad, 0)
    np.testing.assert_array_equal(w.grad, 1)


def test_backward_nonscalar():
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.tensor(np.ones(3), requires_grad=True))


def test_accumulation_two_paths():
    x = ad.tensor([1.5, -2.0], requires_grad=True)
    ad.backward(ad.sum_(ad.add(x, x)))
    np.testing.assert_array_equal(x.grad, [2, 2])
    # a second backward accumulates rather than overwrites
    ad.backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, [3, 3])


def test_max_routes_to_first_argmax():
    x = ad.tensor([[1.0, 3.0, 3.0], [2.0, 0.0, 2.0]], requires_grad=True)
    ad.backward(ad.sum_(ad.max_(x, axis=1)))
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])
    y = ad.tensor([[1.0, 3.0, 3.0], [2.0, 0.0, 2.0]], requires_grad=True)
    ad.backward(ad.sum_(ad.max_(y, axis=0)))
    np.testing.assert_array_equal(y.grad, [[0, 1, 1], [1, 0, 0]])


def test_gather_indices_carry_no_gradient():
    x = ad.tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    ad.backward(ad.sum_(ad.gather_rows(x, [0, 2, 2])))
    np.testing.assert_array_equal(x.grad, [[1, 1], [0, 0], [2, 2]])


def test_no_grad_records_nothing():
    x = ad.tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.scale(x, 2.0)
    assert not y.requires_grad and y.parents == ()


# ---- grad_check

def test_grad_check_linear():
    rng = np.random.default_rng(0)
    w = leaf(rng, 4, 3)
    x = rng.normal(size=(5, 4))
    assert ad.grad_check(lambda: ad.sum_(ad.matmul(ad.const(x), w)), [w]) < 1e-10


def test_grad_check_mlp_softmax():
    rng = np.random.default_rng(1)
    w1, b1, w2 = leaf(rng, 4, 8), leaf(rng, 8), leaf(rng, 8, 5)
    x = rng.normal(size=(6, 4))
    target = rng.random((6, 5))

    def f():
        h = ad.relu(ad.add_bias(ad.matmul(ad.const(x), w1), b1))
        return ad.sum_(ad.mul(ad.softmax(ad.matmul(h, w2)), ad.const(target)))

    assert ad.grad_check(f, [w1, b1, w2], eps=1e-5) < 1e-6


def _op_cases(rng):
    a, b = leaf(rng, 4, 3), leaf(rng, 4, 3)
    m = leaf(rng, 3, 5)
    bias = leaf(rng, 3)
    g, beta = leaf(rng, 3), leaf(rng, 3)
    bat = leaf(rng, 2, 4, 3)
    bat2 = leaf(rng, 2, 3, 4)
    w = ad.const(rng.normal(size=(4, 3)))
    wk = ad.const(rng.normal(size=(4,)))
    return {
        "add": (lambda: ad.sum_(ad.mul(ad.add(a, b), w)), [a, b]),
        "sub": (lambda: ad.sum_(ad.mul(ad.sub(a, b), w)), [a, b]),
        "mul": (lambda: ad.sum_(ad.mul(a, b)), [a, b]),
        "scale": (lambda: ad.sum_(ad.mul(ad.scale(a, -2.5), w)), [a]),
        "add_bias": (lambda: ad.sum_(ad.mul(ad.add_bias(a, bias), w)), [a, bias]),
        "relu": (lambda: ad.sum_(ad.mul(ad.relu(a), w)), [a]),
        "abs": (lambda: ad.sum_(ad.mul(ad.abs_(a), w)), [a]),
        "softmax": (lambda: ad.sum_(ad.mul(ad.softmax(a), w)), [a]),
        "layer_norm": (lambda: ad.sum_(ad.mul(ad.layer_norm(a, g, beta), w)), [a, g, beta]),
        "matmul": (lambda: ad.sum_(ad.mul(ad.matmul(a, m), ad.const(np.ones((4, 5)) * 0.3))), [a, m]),
        "matmul_batch": (lambda: ad.sum_(ad.mul(ad.matmul(bat, bat2), ad.const(np.ones((2, 4, 4))))),
                         [bat, bat2]),
        "matmul_shared": (lambda: ad.sum_(ad.matmul(bat, m)), [bat, m]),
        "transpose": (lambda: ad.sum_(ad.mul(ad.transpose(ad.transpose(a)), w)), [a]),
        "reshape": (lambda: ad.sum_(ad.mul(ad.reshape(ad.reshape(a, (12,)), (4, 3)), w)), [a]),
        "concat": (lambda: ad.sum_(ad.mul(ad.concat([a, b], axis=-1), ad.const(np.ones((4, 6)) * 1.5))),
                   [a, b]),
        "index": (lambda: ad.sum_(ad.mul(ad.index(a, slice(1, 3)), ad.index(w, slice(0, 2)))), [a]),
        "gather_rows": (lambda: ad.sum_(ad.mul(ad.gather_rows(a, [3, 0, 3, 1]), w)), [a]),
        "sum": (lambda: ad.sum_(ad.mul(ad.sum_(ad.mul(a, w), axis=1), wk)), [a]),
        "mean": (lambda: ad.mean(ad.mul(ad.mean(a, axis=0), bias)), [a, bias]),
        "max": (lambda: ad.sum_(ad.mul(ad.max_(a, axis=1), wk)), [a]),
        "min": (lambda: ad.sum_(ad.mul(ad.min_(a, axis=0), bias)), [a, bias]),
        "sqdist": (lambda: ad.sum_(ad.mul(ad.sqdist(a, b), ad.const(np.ones((4, 4))))), [a, b]),
        "l1_rows": (lambda: ad.sum_(ad.mul(ad.l1_rows(a, b), wk)), [a, b]),
        "chamfer": (lambda: ad.chamfer(a, b), [a, b]),
        "ucd": (lambda: ad.unilateral_chamfer(a, b), [a, b]),
    }


@pytest.mark.parametrize("seed", range(20))
def test_every_op_grad_check(seed):
    rng = np.random.default_rng(seed)
    for name, (f, params) in _op_cases(rng).items():
        err = ad.grad_check(f, params, eps=1e-5, seed=seed)
        assert err < 1e-6, f"{name}: {err}"


# ---- Adam

def _store(value):
    s = ad.ParamStore(np.float64)
    s.add("x", value)
    return s


def test_adam_zero_gradient():
    s = _store([1.0, -2.0])
    s.zero_grad()
    ad.adam_step(s, 0.1)
    np.testing.assert_array_equal(s["x"].data, [1.0, -2.0])


def test_adam_first_step_is_lr():
    s = _store([1.0, -2.0])
    s["x"].grad = np.array([0.7, -3.0])
    ad.adam_step(s, 0.01)
    np.testing.assert_allclose(s["x"].data, [1.0 - 0.01, -2.0 + 0.01], rtol=1e-6)
    np.testing.assert_array_equal(s["x"].grad, 0)
    assert s.steps["x"] == 1


def test_adam_quadratic_bowl():
    s = _store([3.0, -1.5, 0.5])
    losses = []
    for _ in range(100):
        s.zero_grad()
        x = s["x"]
        loss = ad.sum_(ad.mul(x, x))
        losses.append(float(loss.data))
        ad.backward(loss)
        ad.adam_step(s, 0.05)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_adam_nan_gradient():
    s = _store([1.0])
    s["x"].grad = np.array([np.nan])
    with pytest.raises(ad.GradientError):
        ad.adam_step(s, 0.1)


def test_clip_grad_norm():
    s = _store([0.0, 0.0])
    s["x"].grad = np.array([3.0, 4.0])
    assert ad.clip_grad_norm(s, 1.0) == 5.0
    np.testing.assert_allclose(s["x"].grad, [0.6, 0.8])


def test_glorot_bounds():
    w = ad.glorot(np.random.default_rng(0), 10, 6)
    assert np.abs(w).max() <= np.sqrt(6 / 16) and w.dtype == np.float32
