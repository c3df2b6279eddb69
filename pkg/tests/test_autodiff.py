import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from t1node import autodiff as ad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def grad_of(f, *leaves):
    for leaf in leaves:
        leaf.zero_grad()
    ad.backward(f())
    return [leaf.grad.copy() for leaf in leaves]


def test_square_example():
    x = ad.parameter(3.0)
    ad.backward(ad.square(x))
    assert x.grad == 6.0


def test_sigmoid_at_zero():
    x = ad.parameter(np.zeros(5))
    ad.backward(ad.sum(ad.sigmoid(x)))
    np.testing.assert_array_equal(x.grad, np.full(5, 0.25))


def test_product_example():
    a, b = ad.parameter(2.0), ad.parameter(3.0)
    ad.backward(a * b)
    assert (a.grad, b.grad) == (3.0, 2.0)


def test_unused_leaf_has_zero_grad():
    a, b = ad.parameter(np.ones(3)), ad.parameter(np.ones(3))
    ad.backward(ad.sum(ad.exp(a)))
    np.testing.assert_array_equal(b.grad, np.zeros(3))


def test_non_scalar_root_rejected():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(ad.tanh(x))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ad.add(ad.parameter(np.ones(3)), ad.parameter(np.ones(4)))


def test_backward_accumulates_until_reset():
    x = ad.parameter(2.0)
    ad.backward(ad.square(x))
    ad.backward(ad.square(x))
    assert x.grad == 8.0
    ad.reset_grads([x])
    assert x.grad == 0.0


def test_no_grad_records_nothing():
    x = ad.parameter(np.ones(2))
    with ad.no_grad():
        y = ad.sum(ad.tanh(x))
    assert not y.requires_grad and y.parents == ()


UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "neg": ad.neg,
    "square": ad.square,
    "softplus": ad.softplus,
    "log": lambda a: ad.log(ad.add(ad.square(a), 1.0)),
    "sqrt": lambda a: ad.sqrt(ad.add(ad.square(a), 1.0)),
    "power": lambda a: ad.power(ad.add(ad.square(a), 1.0), -0.2),
    "mean": lambda a: ad.mul(ad.mean(a, axis=1, keepdims=True), a),
    "slice": lambda a: ad.mul(a[:, 1:3], a[:, 0:2]),
    "concat": lambda a: ad.concat([a, ad.exp(a)], axis=-1),
    "reshape": lambda a: ad.reshape(a, (-1,)),
}

BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0)),
    "maximum": ad.maximum,
    "minimum": ad.minimum,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(20))
def test_unary_ops_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.normal(size=(3, 4)))
    w = rng.normal(size=UNARY[name](x).shape)
    f = lambda: ad.sum(ad.mul(UNARY[name](x), w))  # noqa: E731
    (g,) = grad_of(f, x)
    num = ad.numeric_grad(lambda: float(f().value), x)
    assert rel_err(g, num) < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", range(20))
def test_binary_ops_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    a = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=(4,)))  # exercises broadcast reduction
    w = rng.normal(size=(3, 4))
    f = lambda: ad.sum(ad.mul(BINARY[name](a, b), w))  # noqa: E731
    ga, gb = grad_of(f, a, b)
    assert rel_err(ga, ad.numeric_grad(lambda: float(f().value), a)) < 1e-4
    assert rel_err(gb, ad.numeric_grad(lambda: float(f().value), b)) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_linear_map_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.normal(size=(5, 3)))
    W = ad.parameter(rng.normal(size=(4, 3)))
    b = ad.parameter(rng.normal(size=(4,)))
    f = lambda: ad.sum(ad.square(ad.linear_map(x, W, b)))  # noqa: E731
    grads = grad_of(f, x, W, b)
    for leaf, g in zip((x, W, b), grads):
        assert rel_err(g, ad.numeric_grad(lambda: float(f().value), leaf)) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_three_layer_composition(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 4))
    Ws = [ad.parameter(rng.normal(size=s) / 2) for s in ((8, 4), (8, 8), (1, 8))]
    bs = [ad.parameter(rng.normal(size=s[0]) / 2) for s in ((8, 4), (8, 8), (1, 8))]

    def f():
        z = ad.tanh(ad.linear_map(x, Ws[0], bs[0]))
        z = ad.sigmoid(ad.linear_map(z, Ws[1], bs[1]))
        return ad.mean(ad.square(ad.linear_map(z, Ws[2], bs[2])))

    leaves = Ws + bs
    for leaf, g in zip(leaves, grad_of(f, *leaves)):
        assert rel_err(g, ad.numeric_grad(lambda: float(f().value), leaf)) < 1e-4


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_linearity(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.normal(size=(2, 3)))
    f = lambda: ad.sum(ad.tanh(x))  # noqa: E731
    g = lambda: ad.sum(ad.mul(ad.exp(x), x))  # noqa: E731
    (gf,) = grad_of(f, x)
    (gg,) = grad_of(g, x)
    (gc,) = grad_of(lambda: ad.add(ad.mul(f(), alpha), ad.mul(g(), beta)), x)
    np.testing.assert_allclose(gc, alpha * gf + beta * gg, rtol=1e-12, atol=1e-12)


def test_determinism():
    def run():
        rng = np.random.default_rng(4)
        W = ad.parameter(rng.normal(size=(5, 5)))
        z = ad.parameter(rng.normal(size=(7, 5)))
        for _ in range(3):
            z = ad.tanh(ad.linear_map(z, W))
        ad.backward(ad.sum(z))
        return W.grad

    assert np.array_equal(run(), run())


def test_exact_rows_is_batch_independent():
    rng = np.random.default_rng(2)
    x, W, b = rng.normal(size=(37, 9)), rng.normal(size=(6, 9)), rng.normal(size=6)
    with ad.exact_rows():
        full = ad.linear_map(x, W, b).value
        single = np.concatenate([ad.linear_map(x[i:i + 1], W, b).value for i in range(37)])
    assert np.array_equal(full, single)


def test_grad_shape_matches_value():
    x = ad.parameter(np.ones((2, 3)))
    ad.backward(ad.sum(ad.mul(x, np.arange(3.0))))
    assert x.grad.shape == x.value.shape
