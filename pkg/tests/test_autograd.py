import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from vqar import autograd as ag
from vqar.autograd import Tensor
from vqar.errors import ContractError, DomainError, GraphError, NonFiniteError

import gradcheck


def leaf(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def stirling_lgamma(x: float) -> float:
    # shift up so the asymptotic series is accurate, then undo with log-products
    shift = 0.0
    while x < 20:
        shift += math.log(x)
        x += 1
    series = 1 / (12 * x) - 1 / (360 * x ** 3) + 1 / (1260 * x ** 5) - 1 / (1680 * x ** 7)
    return (x - 0.5) * math.log(x) - x + 0.5 * math.log(2 * math.pi) + series - shift


# --- forward values -------------------------------------------------------

def test_softplus_zero():
    assert ag.softplus(0.0).item() == pytest.approx(math.log(2), abs=1e-15)


def test_matmul_identity():
    A = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(ag.matmul(np.eye(3), A).data, A)


def test_lgamma_five_against_series():
    assert ag.lgamma(5.0).item() == pytest.approx(math.log(24), abs=1e-12)
    assert stirling_lgamma(5.0) == pytest.approx(math.log(24), abs=1e-12)
    for x in (0.3, 1.7, 4.2, 33.0):
        assert ag.lgamma(x).item() == pytest.approx(stirling_lgamma(x), abs=1e-11)


def test_lgamma_rejects_nonpositive():
    with pytest.raises(DomainError):
        ag.lgamma(np.array([1.0, 0.0]))
    with pytest.raises(DomainError):
        ag.lgamma(-2.5)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ContractError, match=r"\(2, 3\).*\(4,\)"):
        ag.add(np.zeros((2, 3)), np.zeros(4))
    with pytest.raises(ContractError):
        ag.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_leading_batch_broadcast():
    a = leaf(np.ones((4, 3)))
    b = leaf(np.arange(3.0))
    ag.sum(a * b).backward()
    assert np.array_equal(b.grad, np.full(3, 4.0))
    assert np.array_equal(a.grad, np.tile(np.arange(3.0), (4, 1)))


def test_nonfinite_raises():
    with pytest.raises(NonFiniteError):
        ag.log(np.array([0.0]))
    with pytest.raises(NonFiniteError):
        ag.div(1.0, 0.0)
    with pytest.raises(NonFiniteError):
        ag.exp(1000.0)


# --- backward semantics ---------------------------------------------------

def test_sum_of_squares_gradient():
    x = leaf([1.0, 2.0, 3.0])
    ag.sum(ag.square(x)).backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_sigmoid_slope_at_zero():
    a = leaf(0.0)
    (ag.sigmoid(a) * 1.0).backward()
    assert a.grad == pytest.approx(0.25)


def test_leaf_reused_accumulates():
    x = leaf(3.0)
    (x * x + x).backward()
    assert x.grad == pytest.approx(7.0)


def test_grad_accumulates_across_graphs():
    x = leaf(2.0)
    (x * 3.0).backward()
    (x * 4.0).backward()
    assert x.grad == pytest.approx(7.0)


def test_backward_twice_is_an_error():
    x = leaf([1.0, 2.0])
    y = ag.sum(x * x)
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_nonscalar_root_rejected():
    with pytest.raises(ContractError):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf
    assert ag.grad_enabled()


def test_every_requires_grad_leaf_gets_grad():
    a, b, c = leaf(1.0), leaf(2.0), leaf([1.0, 1.0])
    (a * b + ag.sum(c) * 0.0).backward()
    assert a.grad is not None and b.grad is not None and c.grad is not None


def test_stop_gradient_examples():
    x = leaf([1.5, -2.0])
    y = ag.stop_gradient(x)
    assert np.array_equal(y.data, x.data)
    s = ag.sum(y) + ag.sum(x) * 0.0
    s.backward()
    assert np.array_equal(x.grad, [0.0, 0.0])

    x = leaf([2.0])
    ag.sum(x * ag.stop_gradient(x)).backward()
    assert np.array_equal(x.grad, [2.0])


def test_straight_through_examples():
    h = leaf([1.0, 1.0])
    z = leaf([0.0, 2.0])
    out = ag.straight_through(h, z)
    assert np.array_equal(out.data, z.data)
    ag.sum(out).backward()
    assert np.array_equal(h.grad, [1.0, 1.0])
    assert z.grad is None

    h = leaf([1.0, 0.0])
    z = Tensor([0.0, 2.0])
    ag.sum(ag.square(ag.straight_through(h, z))).backward()
    assert np.array_equal(h.grad, [0.0, 4.0])


def test_straight_through_forward_is_exact_not_rounded():
    h = leaf([1e16, 0.1])
    z = Tensor([1.0, 0.3])
    assert np.array_equal(ag.straight_through(h, z).data, z.data)
    with pytest.raises(ContractError):
        ag.straight_through(leaf([1.0]), Tensor([1.0, 2.0]))


def test_ndarray_on_the_left_defers_to_tensor():
    x = leaf([1.0, 2.0])
    y = np.array([3.0, 4.0]) * x
    assert isinstance(y, Tensor)
    ag.sum(y).backward()
    assert np.array_equal(x.grad, [3.0, 4.0])


# --- finite-difference agreement -----------------------------------------

UNARY = {
    "sigmoid": (ag.sigmoid, lambda r, s: r.normal(size=s)),
    "tanh": (ag.tanh, lambda r, s: r.normal(size=s)),
    "softplus": (ag.softplus, lambda r, s: r.normal(size=s) * 3),
    "log": (ag.log, lambda r, s: r.uniform(0.2, 3.0, s)),
    "exp": (ag.exp, lambda r, s: r.normal(size=s)),
    "lgamma": (ag.lgamma, lambda r, s: r.uniform(0.3, 6.0, s)),
    "square": (ag.square, lambda r, s: r.normal(size=s)),
    "sqrt": (ag.sqrt, lambda r, s: r.uniform(0.2, 3.0, s)),
    "neg": (ag.neg, lambda r, s: r.normal(size=s)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    fn, draw = UNARY[name]
    rng = np.random.default_rng(sorted(UNARY).index(name))
    for trial in range(100):
        x = leaf(draw(rng, (3,)))
        w = rng.normal(size=3)
        assert gradcheck.check(lambda: ag.sum(fn(x) * w), [x]) < gradcheck.RTOL


BINARY = {
    "add": ag.add,
    "sub": ag.sub,
    "mul": ag.mul,
    "div": ag.div,
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name):
    fn = BINARY[name]
    rng = np.random.default_rng(len(name))
    for trial in range(100):
        shape_b = [(2, 3), (3,), ()][trial % 3]
        a = leaf(rng.normal(size=(2, 3)))
        b = leaf(rng.uniform(0.5, 2.0, shape_b) * rng.choice([-1, 1], shape_b))
        w = rng.normal(size=(2, 3))
        assert gradcheck.check(lambda: ag.sum(fn(a, b) * w), [a, b]) < gradcheck.RTOL


def test_structural_ops_match_finite_differences():
    rng = np.random.default_rng(7)
    for trial in range(100):
        A = leaf(rng.normal(size=(3, 4)))
        B = leaf(rng.normal(size=(4, 2)))
        v = leaf(rng.normal(size=4))
        idx = rng.integers(0, 3, size=5)
        w = rng.normal(size=(3, 6))

        def build():
            mm = ag.matmul(A, B)
            mv = ag.matmul(A, v)
            cat = ag.concat([mm, ag.reshape(mv, (3, 1)), A[:, 1:2] * 2.0, ag.take(A, idx)[:3, :2]], axis=1)
            st_ = ag.stack([ag.sum(cat * w, axis=1), ag.mean(cat, axis=1)])
            return ag.sum(st_) + ag.l2norm(A) + ag.sum(ag.l2norm(B, axis=0)) + ag.mean(ag.matmul(v, B))

        assert gradcheck.check(build, [A, B, v]) < gradcheck.RTOL


def test_random_five_layer_composition():
    rng = np.random.default_rng(11)
    for trial in range(100):
        x = leaf(rng.normal(size=(2, 3)))
        Ws = [leaf(rng.normal(size=(3, 3)) * 0.7) for _ in range(5)]
        acts = [ag.tanh, ag.sigmoid, ag.softplus, ag.tanh, ag.square]

        def build():
            h = x
            for W, f in zip(Ws, acts):
                h = f(ag.matmul(h, W))
            return ag.mean(h)

        assert gradcheck.check(build, [x] + Ws) < gradcheck.RTOL


# --- properties -----------------------------------------------------------

finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, 4, elements=finite), st.floats(-2, 2), st.floats(-2, 2))
def test_backward_is_linear(xv, a, b):
    def grad_of(build):
        x = leaf(xv)
        build(x).backward()
        return x.grad

    f = lambda x: ag.sum(ag.tanh(x))
    g = lambda x: ag.sum(ag.square(x))
    combined = grad_of(lambda x: a * f(x) + b * g(x))
    assert np.allclose(combined, a * grad_of(f) + b * grad_of(g), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=finite))
def test_stop_gradient_is_identity_forward_and_annihilator_backward(xv):
    x = leaf(xv)
    y = ag.stop_gradient(x)
    assert np.array_equal(y.data, xv)
    assert not y.requires_grad


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, 3, elements=finite), hnp.arrays(np.float64, 3, elements=finite),
       hnp.arrays(np.float64, 3, elements=finite))
def test_straight_through_copies_downstream_gradient(hv, zv, wv):
    h = leaf(hv)
    out = ag.straight_through(h, Tensor(zv))
    assert np.array_equal(out.data, zv)
    ag.sum(out * wv).backward()
    assert np.array_equal(h.grad, wv)


def test_row_stable_products_ignore_batch_size():
    rng = np.random.default_rng(42)
    W = rng.normal(size=(70, 33))
    X = rng.normal(size=(500, 70))
    with ag.row_stable():
        full = ag.matmul(X, W).data
        assert all(np.array_equal(ag.matmul(X[k:k + 1], W).data[0], full[k]) for k in range(0, 500, 13))
    assert np.allclose(full, X @ W, rtol=1e-13, atol=1e-12)
