import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import afdmil.autograd as ag
from afdmil.autograd import ParamStore, Tensor, backward, grad_check
from afdmil.errors import DimensionError, EmptyBagError, GradCheckError, StateError
from oracles import matmul_triple_loop


# -- affine -------------------------------------------------------------------


def test_affine_identity_weight():
    out = ag.affine([[1.0, 2.0]], [[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0]])
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_affine_hand_sum():
    out = ag.affine([[1.0, 1.0]], [[2.0], [3.0]], [[1.0]])
    assert out.item() == 6.0


def test_affine_matches_triple_loop_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=(1, 2))
    out = ag.affine(x, w, b)
    expected = matmul_triple_loop(x, w) + b
    np.testing.assert_allclose(out.data, expected, atol=1e-12, rtol=0)


def test_affine_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        ag.affine(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros((1, 2)))


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 8), inner=st.integers(1, 8), cols=st.integers(1, 8),
    seed=st.integers(0, 10_000),
)
def test_matmul_matches_triple_loop_on_random_shapes(rows, inner, cols, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rows, inner))
    b = rng.normal(size=(inner, cols))
    np.testing.assert_allclose(
        ag.matmul(a, b).data, matmul_triple_loop(a, b), atol=1e-12, rtol=0
    )


# -- softmax ------------------------------------------------------------------


def test_softmax_symmetry():
    np.testing.assert_allclose(ag.softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)


def test_softmax_exponent_cancellation():
    out = ag.softmax([math.log(1), math.log(2), math.log(3)])
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_singleton():
    np.testing.assert_array_equal(ag.softmax([5.0]), [1.0])


def test_softmax_empty_is_rejected():
    with pytest.raises(EmptyBagError):
        ag.softmax([])


def test_softmax_overflow_safe():
    out = ag.softmax([1000.0, 1000.0])
    np.testing.assert_allclose(out, [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(-30, 30))
def test_softmax_sums_to_one_and_is_shift_invariant(values, shift):
    out = ag.softmax(values)
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out > 0)
    shifted = ag.softmax([v + shift for v in values])
    np.testing.assert_allclose(out, shifted, atol=1e-9, rtol=0)


# -- bce ----------------------------------------------------------------------


def test_bce_half():
    assert ag.bce(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_clamps_perfect_prediction():
    assert ag.bce(1.0, 1) == pytest.approx(-math.log(1 - 1e-7), abs=1e-15)


def test_bce_hand_value():
    assert ag.bce(0.9, 0) == pytest.approx(-math.log(0.1), abs=1e-12)


@settings(max_examples=50)
@given(st.floats(0, 1), st.integers(0, 1))
def test_bce_nonnegative(p, y):
    assert ag.bce(p, y) >= 0.0


@settings(max_examples=50)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
def test_bce_strictly_decreasing_in_p_for_positive_label(p1, p2):
    lo, hi = sorted([p1, p2])
    if lo != hi:
        assert ag.bce(hi, 1) < ag.bce(lo, 1)


# -- backward -----------------------------------------------------------------


def test_backward_square():
    w = Tensor(3.0, requires_grad=True)
    f = w * w
    backward(f)
    assert w.grad == pytest.approx(6.0)


def test_backward_sigmoid_bce_identity():
    # d/dz bce(sigmoid(z), y) = sigmoid(z) - y; at z=0, y=1 that is -0.5
    z = Tensor(0.0, requires_grad=True)
    loss = ag.bce(ag.sigmoid(z), 1)
    backward(loss)
    assert z.grad == pytest.approx(-0.5, abs=1e-12)


def test_backward_accumulates_through_shared_nodes():
    x = Tensor(2.0, requires_grad=True)
    y = x * x + x * 3.0
    backward(y)
    assert x.grad == pytest.approx(7.0)


def test_backward_before_forward_is_state_error():
    with pytest.raises(StateError):
        backward(Tensor(1.0, requires_grad=True))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    with pytest.raises(StateError):
        backward(y)


def test_gather_routes_zero_gradient_to_unselected():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]), requires_grad=True)
    picked = ag.gather(x, [1, 3])
    backward(ag.tsum(picked))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0, 1.0])


# -- ParamStore ---------------------------------------------------------------


def test_param_store_rejects_duplicate_names():
    store = ParamStore()
    store.add("w", np.zeros((1, 1)))
    with pytest.raises(Exception, match="duplicate"):
        store.add("w", np.zeros((1, 1)))


def test_param_store_snapshot_round_trip():
    store = ParamStore()
    w = store.add("w", np.arange(6.0).reshape(2, 3))
    snap = store.snapshot()
    w.data *= 10
    store.load_state(snap)
    np.testing.assert_array_equal(w.data, np.arange(6.0).reshape(2, 3))


# -- grad_check ---------------------------------------------------------------


def test_grad_check_linear_is_nearly_exact():
    store = ParamStore()
    store.add("w", np.array([[0.5, -1.25, 2.0]]))
    coeffs = np.array([[1.0], [2.0], [-3.0]])

    def forward(params):
        return ag.tsum(ag.matmul(params["w"], Tensor(coeffs)))

    report = grad_check(forward, store, eps=1e-5)
    assert report.max_rel_error < 1e-10


def test_grad_check_sigmoid_neuron():
    rng = np.random.default_rng(3)
    store = ParamStore()
    store.add("w", rng.normal(size=(1, 4)))
    store.add("b", rng.normal(size=(1, 1)))
    x = rng.normal(size=(4, 1))

    def forward(params):
        z = ag.add(ag.matmul(params["w"], Tensor(x)), params["b"])
        return ag.bce(ag.sigmoid(z), 1)

    report = grad_check(forward, store, eps=1e-5)
    assert report.max_rel_error < 1e-6


def test_grad_check_rejects_nondeterministic_forward():
    store = ParamStore()
    store.add("w", np.ones((1, 1)))
    state = {"calls": 0}

    def forward(params):
        state["calls"] += 1
        return params["w"] * float(state["calls"])

    with pytest.raises(GradCheckError):
        grad_check(forward, store)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_grad_check_composed_smooth_graph(seed):
    # tanh/sigmoid/exp/softmax composition (no kinks, no selection):
    # analytic gradients must track central differences on any draw
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("w1", rng.normal(size=(3, 5)))
    store.add("b1", rng.normal(size=(1, 5)))
    store.add("w2", rng.normal(size=(5, 1)))
    x = rng.normal(size=(4, 3))

    anchors = Tensor(np.array([0.5, -1.0, 2.0, 0.25]))

    def forward(params):
        hidden = ag.tanh(ag.affine(Tensor(x), params["w1"], params["b1"]))
        scores = ag.reshape(ag.matmul(hidden, params["w2"]), (4,))
        mix = ag.softmax(scores)
        prob = ag.sigmoid(ag.tsum(mix * anchors) * ag.exp(ag.tmean(hidden)))
        return ag.bce(prob, 1)

    report = grad_check(forward, store, eps=1e-5)
    assert report.max_rel_error < 1e-4
