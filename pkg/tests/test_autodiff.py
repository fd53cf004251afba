import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mecch import autodiff as ad
from mecch.errors import ContractViolation, NonFiniteError, ShapeError

TOL = 1e-8


def P(data):
    return ad.Tensor(np.array(data, dtype=float), requires_grad=True)


def _projector(rng, shape):
    w = rng.normal(size=shape)
    return lambda t: ad.total(t, w)


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * 0.5, x)


# ---------------------------------------------------------------- examples

def test_linear_examples():
    np.testing.assert_array_equal(ad.linear([[1.0, 2.0]], [[1, 1], [0, 1]], [1, 0]).data, [[4, 2]])
    b = np.array([0.5, -1.0])
    np.testing.assert_array_equal(ad.linear(np.zeros((3, 2)), np.ones((2, 2)), b).data, np.tile(b, (3, 1)))
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(ad.linear(x, np.eye(2), np.zeros(2)).data, x)


def test_linear_shape_errors():
    with pytest.raises(ShapeError):
        ad.linear(np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        ad.linear(np.ones((2, 2)), np.ones((2, 2)), np.ones(3))


def test_segment_mean_examples():
    out = ad.segment_mean(np.array([[1.0, 0], [0, 2], [2, 4]]), [0, 3])
    np.testing.assert_array_equal(out.data, [[1, 2]])
    x = np.arange(8.0).reshape(4, 2)
    np.testing.assert_array_equal(ad.segment_mean(x, [0, 1, 2, 3, 4]).data, x)


def test_segment_mean_gradient_spreads_evenly():
    x = P(np.random.default_rng(0).normal(size=(4, 3)))
    g = np.array([1.0, -2.0, 4.0])
    with ad.Tape() as tape:
        loss = ad.total(ad.segment_mean(x, [0, 4]), g[None, :])
    grads = ad.backward(tape, loss)
    np.testing.assert_allclose(grads[x], np.tile(g / 4, (4, 1)), rtol=0, atol=1e-15)


def test_segment_mean_with_index():
    x = np.array([[1.0, 1.0], [3.0, 5.0], [10.0, 0.0]])
    out = ad.segment_mean(x, [0, 2, 3], index=[0, 1, 2])
    np.testing.assert_allclose(out.data, [[2, 3], [10, 0]])
    out = ad.segment_mean(x, [0, 3], index=[2, 2, 0])
    np.testing.assert_allclose(out.data, [[7, 1 / 3]])


def test_segment_mean_rejects_empty_segment():
    with pytest.raises(ContractViolation):
        ad.segment_mean(np.ones((2, 2)), [0, 0, 2])


@settings(max_examples=200, deadline=None)
@given(row=arrays(np.float64, 5, elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)),
       k=st.integers(1, 40))
def test_segment_mean_of_identical_rows_is_exact(row, k):
    out = ad.segment_mean(np.tile(row, (k, 1)), [0, k])
    assert np.array_equal(out.data[0], row)


def test_scaled_sum_examples():
    out = ad.scaled_sum([np.array([[3.0, 5.0]]), np.array([[7.0, 9.0]])], [np.array([1.0, 0]), np.array([0, 1.0])])
    np.testing.assert_array_equal(out.data, [[3, 9]])
    h = [np.random.default_rng(1).normal(size=(4, 3)) for _ in range(3)]
    mean = ad.scaled_sum(h, [np.full(3, 1 / 3)] * 3).data
    np.testing.assert_allclose(mean, sum(h) / 3, rtol=1e-15, atol=1e-15)
    np.testing.assert_array_equal(ad.scaled_sum(h[:1], [np.ones(3)]).data, h[0])


def test_scaled_sum_errors():
    with pytest.raises(ShapeError):
        ad.scaled_sum([], [])
    with pytest.raises(ShapeError):
        ad.scaled_sum([np.ones((2, 3))], [np.ones(2)])


def test_activation_examples():
    np.testing.assert_array_equal(ad.relu(np.array([-1.0, 2.0])).data, [0, 2])
    assert ad.sigmoid(np.array([0.0])).data[0] == 0.5
    np.testing.assert_allclose(ad.leaky_relu(np.array([-1.0, 3.0]), 0.2).data, [-0.2, 3])
    x = np.array([[1.0, -2.0]])
    rng = np.random.default_rng(0)
    for training in (True, False):
        assert np.array_equal(ad.dropout(x, 0.0, training, rng).data, x)
    assert np.array_equal(ad.dropout(x, 0.5, False).data, x)


def test_dropout_inverted_scaling():
    x = np.ones((200, 50))
    out = ad.dropout(x, 0.5, True, np.random.default_rng(3)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05
    again = ad.dropout(x, 0.5, True, np.random.default_rng(3)).data
    assert np.array_equal(out, again)


def test_dropout_contract():
    with pytest.raises(ContractViolation):
        ad.dropout(np.ones(3), 1.0, True, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        ad.dropout(np.ones(3), 0.5, True)


def test_cross_entropy_examples():
    assert ad.softmax_cross_entropy(np.zeros((3, 4)), [0, 1, 3]).data == pytest.approx(math.log(4), abs=1e-15)
    assert float(ad.softmax_cross_entropy(np.array([[2.0, 0.0]]), [0]).data) == pytest.approx(0.126928, abs=1e-6)
    big = ad.softmax_cross_entropy(np.array([[800.0, 0.0, 0.0]]), [0]).data
    assert float(big) == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(ContractViolation):
        ad.softmax_cross_entropy(np.zeros((1, 2)), [2])


@settings(max_examples=200, deadline=None)
@given(logits=arrays(np.float64, (6, 4), elements=st.floats(-10, 10)),
       labels=arrays(np.int64, 6, elements=st.integers(0, 3)))
def test_cross_entropy_matches_naive_formula(logits, labels):
    naive = -np.mean(np.log(np.exp(logits[np.arange(6), labels]) / np.exp(logits).sum(axis=1)))
    stable = float(ad.softmax_cross_entropy(logits, labels).data)
    assert abs(stable - naive) <= 1e-10


def test_bce_examples():
    assert float(ad.bce_with_logits(np.zeros(3), np.zeros(5)).data) == pytest.approx(2 * math.log(2), abs=1e-15)
    v = float(ad.bce_with_logits(np.array([2.0]), np.array([-2.0])).data)
    assert v == pytest.approx(2 * math.log1p(math.exp(-2)), abs=1e-15)
    assert v == pytest.approx(0.253856, abs=1e-6)
    assert float(ad.bce_with_logits(np.array([40.0]), np.array([-40.0])).data) < 1e-16
    with pytest.raises(ContractViolation):
        ad.bce_with_logits(np.zeros(0), np.zeros(1))


def test_distmult_example():
    assert float(ad.distmult(np.array([1.0, 2]), np.array([3.0, 4]), np.array([2, 0.5])).data) == 10
    assert float(ad.distmult(np.array([1.0, 0]), np.array([0.0, 1]), np.ones(2)).data) == 0


def test_non_finite_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        ad.linear(np.array([[1e308, 1e308]]), np.array([[1e308, 1e308]]))


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = P(np.random.default_rng(0).normal(size=(3, 2)))
    with ad.Tape() as tape:
        loss = ad.total(x)
    np.testing.assert_array_equal(ad.backward(tape, loss)[x], np.ones((3, 2)))


def test_backward_unused_leaf_gets_zero():
    x, w = P([1.0, 2.0]), P([[3.0, 4.0]])
    with ad.Tape() as tape:
        loss = ad.total(x)
    grads = ad.backward(tape, loss, [x, w])
    np.testing.assert_array_equal(grads[w], np.zeros((1, 2)))
    np.testing.assert_array_equal(w.grad, np.zeros((1, 2)))


def test_backward_needs_scalar():
    x = P([1.0, 2.0])
    with ad.Tape() as tape:
        y = ad.relu(x)
    with pytest.raises(ShapeError):
        ad.backward(tape, y)


def test_no_recording_outside_tape():
    x = P([1.0, 2.0])
    out = ad.relu(x)
    assert not out.requires_grad


def test_tape_is_topologically_ordered():
    rng = np.random.default_rng(0)
    x, W = P(rng.normal(size=(3, 2))), P(rng.normal(size=(2, 2)))
    with ad.Tape() as tape:
        ad.total(ad.relu(ad.linear(x, W)))
    produced = set()
    for op in tape.ops:
        for t in op.inputs:
            assert t.requires_grad is False or t in (x, W) or t in produced
        produced.add(op.output)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_backward_is_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x, W = P(rng.normal(size=(4, 3))), P(rng.normal(size=(2, 3)))
    w1 = rng.normal(size=(4, 2))

    def grads(a, b):
        with ad.Tape() as tape:
            h = ad.linear(x, W)
            l1 = ad.total(ad.sigmoid(h), w1)
            l2 = ad.softmax_cross_entropy(h, [0, 1, 1, 0])
            loss = ad.total(ad.add(ad.scale(l1, a), ad.scale(l2, b)))
        g = ad.backward(tape, loss, [x, W])
        return g[x], g[W]

    gx, gW = grads(alpha, beta)
    gx1, gW1 = grads(1.0, 0.0)
    gx2, gW2 = grads(0.0, 1.0)
    np.testing.assert_allclose(gx, alpha * gx1 + beta * gx2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gW, alpha * gW1 + beta * gW2, rtol=1e-12, atol=1e-12)


# ------------------------------------------------------------- grad checks

def primitive_cases(seed=0):
    """(name, loss builder, leaves) for every primitive, each reduced to a
    scalar through a random fixed projection."""
    rng = np.random.default_rng(seed)
    cases = []

    x, W, b = P(rng.normal(size=(5, 3))), P(rng.normal(size=(4, 3))), P(rng.normal(size=4))
    proj = _projector(rng, (5, 4))
    cases.append(("linear", lambda: proj(ad.linear(x, W, b)), [x, W, b]))

    v = P(rng.normal(size=(6, 3)))
    offsets, index = np.array([0, 2, 3, 7]), np.array([0, 5, 2, 1, 1, 4, 3])
    proj_s = _projector(rng, (3, 3))
    cases.append(("segment_mean", lambda: proj_s(ad.segment_mean(v, offsets, index)), [v]))

    wts = P(rng.uniform(0.1, 1.0, size=7))
    cases.append(("segment_mean_weighted",
                  lambda: proj_s(ad.segment_mean(v, offsets, index, weights=wts)), [v, wts]))

    s = P(rng.normal(size=7))
    proj_sm = _projector(rng, 7)
    cases.append(("segment_softmax", lambda: proj_sm(ad.segment_softmax(s, offsets)), [s]))

    h = [P(rng.normal(size=(4, 3))) for _ in range(3)]
    a = [P(rng.normal(size=3)) for _ in range(3)]
    proj_ss = _projector(rng, (4, 3))
    cases.append(("scaled_sum", lambda: proj_ss(ad.scaled_sum(h, a)), h + a))

    z = P(_away_from_zero(rng, (4, 3)))
    cases.append(("relu", lambda: proj_ss(ad.relu(z)), [z]))
    cases.append(("leaky_relu", lambda: proj_ss(ad.leaky_relu(z, 0.2)), [z]))
    cases.append(("sigmoid", lambda: proj_ss(ad.sigmoid(z)), [z]))

    mask_rng_seed = int(rng.integers(1 << 30))
    cases.append(("dropout",
                  lambda: proj_ss(ad.dropout(z, 0.3, True, np.random.default_rng(mask_rng_seed))), [z]))

    g_idx = np.array([0, 3, 3, 1])
    cases.append(("gather", lambda: proj_ss(ad.gather(z, g_idx)), [z]))

    p1, p2 = P(rng.normal(size=(2, 3))), P(rng.normal(size=(2, 3)))
    cases.append(("concat_rows", lambda: proj_ss(ad.concat_rows([p1, p2])), [p1, p2]))

    q = P(rng.normal(size=3))
    proj_v = _projector(rng, 4)
    cases.append(("matvec", lambda: proj_v(ad.matvec(z, q)), [z, q]))
    cases.append(("add", lambda: proj_ss(ad.add(h[0], h[1])), [h[0], h[1]]))

    q6 = P(rng.normal(size=6))
    proj_3 = _projector(rng, 3)
    cases.append(("slice_vector", lambda: proj_3(ad.slice_vector(q6, 2, 5)), [q6]))

    hu, hv, wl = P(rng.normal(size=(5, 3))), P(rng.normal(size=(5, 3))), P(rng.normal(size=3))
    proj_5 = _projector(rng, 5)
    cases.append(("distmult", lambda: proj_5(ad.distmult(hu, hv, wl)), [hu, hv, wl]))

    cases.append(("total", lambda: ad.total(z, np.arange(12.0).reshape(4, 3)), [z]))
    cases.append(("scale", lambda: proj_ss(ad.scale(z, -1.7)), [z]))

    logits = P(rng.normal(size=(5, 4)) * 3)
    labels = rng.integers(0, 4, size=5)
    cases.append(("softmax_cross_entropy", lambda: ad.softmax_cross_entropy(logits, labels), [logits]))

    sp_, sn_ = P(rng.normal(size=6) * 2), P(rng.normal(size=9) * 2)
    cases.append(("bce_with_logits", lambda: ad.bce_with_logits(sp_, sn_), [sp_, sn_]))
    return cases


@pytest.mark.parametrize("name,f,leaves", primitive_cases(), ids=[c[0] for c in primitive_cases()])
def test_primitive_gradients(name, f, leaves):
    assert ad.grad_check(f, leaves) < TOL


def test_grad_check_detects_wrong_gradient():
    x = P([0.7, -0.3, 1.1])

    def doubled_square():
        # records x**2 but claims the derivative is 4x instead of 2x
        return ad.total(ad._result("bad_square", x.data ** 2, (x,), lambda g: (4 * g * x.data,)))

    assert ad.grad_check(doubled_square, [x]) > 0.4
