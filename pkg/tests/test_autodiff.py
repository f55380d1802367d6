import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqcount import autodiff as ad
from seqcount.autodiff import Graph, Tensor


def grad_of(f, *xs):
    ts = [Tensor(x, requires_grad=True) for x in xs]
    with Graph() as g:
        g.backward(f(*ts))
    return [t.grad for t in ts]


def test_softmax_known_value():
    out = ad.softmax(Tensor([0.0, math.log(2.0)])).value
    np.testing.assert_allclose(out, [1 / 3, 2 / 3], rtol=0, atol=1e-15)


finite = st.floats(-50, 50, allow_nan=False)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-1e3, 1e3))
def test_softmax_is_probability_and_shift_invariant(x, c):
    p = ad.softmax(Tensor(x)).value
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    shifted = ad.softmax(Tensor(x + c)).value
    assert np.max(np.abs(p - shifted)) <= 1e-12


def test_identity_cases():
    assert ad.tanh(Tensor(0.0)).item() == 0.0
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_basic_gradients():
    (g,) = grad_of(ad.tanh, np.array(0.0))
    assert g == pytest.approx(1.0)
    (g,) = grad_of(lambda x: ad.sum(x), np.ones((2, 3)))
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_softmax_cross_entropy_gradient():
    (g,) = grad_of(lambda z: -ad.log_softmax(z)[0], np.zeros(2))
    np.testing.assert_allclose(g, [-0.5, 0.5], atol=1e-15)
    (g,) = grad_of(lambda z: -ad.log(ad.softmax(z)[0]), np.zeros(2))
    np.testing.assert_allclose(g, [-0.5, 0.5], atol=1e-15)


def test_errors():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ValueError, match="non-positive"):
        ad.log(Tensor([1.0, 0.0]))
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = x * 2.0
        with pytest.raises(ad.ShapeError, match="scalar"):
            g.backward(y)


def test_graph_is_topological_and_gradients_match_shapes():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Graph() as g:
        h = ad.tanh(ad.matmul(x, w))
        loss = ad.sum(ad.softmax(h.reshape(-1)) * h.reshape(-1))
        g.backward(loss)
    for idx, node in enumerate(g.nodes):
        for inp in node.inputs:
            if inp.node is not None:
                assert inp.node[1] < idx
    for idx, grad in g.gradients.items():
        assert grad.shape == g.nodes[idx].out.shape
    assert x.grad.shape == x.shape and w.grad.shape == w.shape


def test_graph_must_be_reset_before_reuse():
    x = Tensor(2.0, requires_grad=True)
    g = Graph()
    with g:
        loss = x * x
        g.backward(loss)
        with pytest.raises(RuntimeError):
            x * x
    g.reset()
    with g:
        loss = x * 3.0
        x.grad = None
        g.backward(loss)
    assert x.grad == pytest.approx(3.0)


def test_accumulation_is_linear(rng):
    x0 = rng.normal(size=5)
    a = rng.normal(size=5)
    (both,) = grad_of(lambda x: ad.sum(x * a) + ad.sum(ad.tanh(x)), x0)
    (p1,) = grad_of(lambda x: ad.sum(x * a), x0)
    (p2,) = grad_of(lambda x: ad.sum(ad.tanh(x)), x0)
    np.testing.assert_allclose(both, p1 + p2, rtol=1e-14)


def test_no_grad_records_nothing():
    x = Tensor(1.0, requires_grad=True)
    with Graph() as g, ad.no_grad():
        y = ad.tanh(x)
    assert len(g) == 0 and not y.requires_grad


# ------------------------------------------------ per-primitive JVP vs FD

def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


PRIMITIVES = {
    "matmul": (lambda a, b: ad.matmul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "matvec": (lambda a, b: ad.matmul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=4)]),
    "conv2d": (lambda x, w: ad.conv2d(x, w, stride=2, padding=1),
               lambda r: [r.normal(size=(2, 6, 6, 2)), r.normal(size=(3, 3, 2, 3))]),
    "add": (lambda a, b: a + b, lambda r: [r.normal(size=(3, 4)), r.normal(size=4)]),
    "mul": (lambda a, b: a * b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
    "tanh": (ad.tanh, lambda r: [r.normal(size=6)]),
    "sigmoid": (ad.sigmoid, lambda r: [r.normal(scale=3, size=6)]),
    "exp": (ad.exp, lambda r: [r.normal(size=6)]),
    "log": (ad.log, lambda r: [_pos(r, 6)]),
    "sum": (lambda a: ad.sum(a, axis=1), lambda r: [r.normal(size=(3, 4))]),
    "mean": (lambda a: ad.mean(a, axis=0), lambda r: [r.normal(size=(3, 4))]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), lambda r: [r.normal(size=(3, 4))]),
    "upsample_nearest": (lambda a: ad.upsample_nearest(a, (6, 4)), lambda r: [r.normal(size=(1, 3, 2, 2))]),
    "downsample_nearest": (lambda a: ad.upsample_nearest(a, (2, 2)), lambda r: [r.normal(size=(1, 4, 4, 2))]),
    "softmax": (ad.softmax, lambda r: [r.normal(size=7)]),
    "log_softmax": (ad.log_softmax, lambda r: [r.normal(size=7)]),
    "take": (lambda a: a[1:3, ::2], lambda r: [r.normal(size=(4, 4))]),
    "div": (lambda a, b: a / b, lambda r: [r.normal(size=5), _pos(r, 5)]),
}


@pytest.mark.parametrize("kind", sorted(PRIMITIVES))
def test_primitive_jvp_matches_central_difference(kind):
    fn, make = PRIMITIVES[kind]
    rng = np.random.default_rng(abs(hash(kind)) % 2 ** 32)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        xs = make(rng)
        vs = [rng.normal(size=np.shape(x)) for x in xs]
        w = rng.normal(size=fn(*[Tensor(x) for x in xs]).shape)
        grads = grad_of(lambda *ts: ad.sum(fn(*ts) * w), *xs)
        analytic = sum(float(np.sum(g * v)) for g, v in zip(grads, vs))
        plus = np.sum(fn(*[Tensor(x + h * v) for x, v in zip(xs, vs)]).value * w)
        minus = np.sum(fn(*[Tensor(x - h * v) for x, v in zip(xs, vs)]).value * w)
        numeric = (plus - minus) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    assert worst <= 1e-5, f"{kind}: max relative error {worst:.2e}"


# ------------------------------------------------------------- grad_check

def test_grad_check_square():
    x = Tensor(3.0, requires_grad=True, name="x")
    rep = ad.grad_check(lambda: x * x, [x], step=1e-5, tol=1e-6)
    assert rep.passed
    assert rep.per_param["x"] <= 1e-6


def test_grad_check_constant_function():
    x = Tensor(np.ones(3), requires_grad=True, name="x")
    rep = ad.grad_check(lambda: ad.sum(Tensor(np.ones(3))) + ad.sum(x) * 0.0, [x])
    assert rep.max_rel_err == 0.0 and rep.passed


def test_grad_check_rejects_nondeterministic_f():
    x = Tensor(1.0, requires_grad=True)
    state = {"n": 0}

    def f():
        state["n"] += 1
        return x * float(state["n"])

    with pytest.raises(RuntimeError, match="deterministic"):
        ad.grad_check(f, [x])


def test_grad_check_detects_wrong_gradient():
    x = Tensor(np.array([0.3, -0.2]), requires_grad=True, name="x")

    def broken(a):
        v = np.sin(a.value)
        return ad._make("sin", v, (a,), lambda g: (g * np.sin(a.value),))  # wrong derivative

    rep = ad.grad_check(lambda: ad.sum(broken(x)), {"x": x})
    assert not rep.passed
