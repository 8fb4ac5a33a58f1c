import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrirob.consistency import (
    ActivationTrace, activation_consistency, orthant_consistency, prop1_montecarlo, record_activation_trace,
    relative_variance, single_layer_net,
)
from attrirob.ndcore import MlpModel, ShapeError, forward_cache, make_rng
from conftest import random_net


def test_single_unit_patterns():
    model = MlpModel([np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
    tr = record_activation_trace(model, [[1.0], [-1.0]])
    assert tr.layers[0][:, 0].tolist() == [True, False]


def test_zero_net_is_all_inactive():
    model = MlpModel([np.zeros((3, 2)), np.zeros((2, 3))], [np.zeros(3), np.zeros(2)])
    tr = record_activation_trace(model, np.ones((4, 2)))
    assert not tr.pooled().any()


def test_trace_matches_independent_forward(rng):
    model = random_net(5, sizes=(4, 7, 6, 3))
    X = rng.uniform(-1, 1, size=(10, 4))
    tr = record_activation_trace(model, X)
    h = X
    for layer, (w, b) in enumerate(zip(model.weights[:-1], model.biases[:-1])):
        z = np.einsum("ij,nj->ni", w, h) + b
        assert np.array_equal(tr.layers[layer], z > 0)
        h = np.where(z > 0, z, 0.0)


def test_trace_errors():
    model = random_net(0)
    with pytest.raises(ValueError):
        record_activation_trace(model, np.zeros((0, 4)))
    with pytest.raises(ShapeError):
        record_activation_trace(model, np.zeros((2, 3)))


def test_consistency_examples():
    a = ActivationTrace([np.array([[True, False, True]])])
    assert activation_consistency(a, a) == 1.0
    b = ActivationTrace([np.array([[False, True, False]])])
    assert activation_consistency(a, b) == 0.0
    zero = ActivationTrace([np.zeros((1, 3), bool)])
    res = activation_consistency(a, zero, detail=True)
    assert math.isnan(res.value) and res.degenerate
    with pytest.raises(ShapeError):
        activation_consistency(a, ActivationTrace([np.zeros((1, 4), bool)]))


def test_consistency_hand_value():
    a = ActivationTrace([np.array([[True, True, False, False]])])
    b = ActivationTrace([np.array([[True, False, True, True]])])
    # P(A and B) = 1/4, P(A) = 1/2, P(B) = 3/4
    assert activation_consistency(a, b) == pytest.approx(0.25 / math.sqrt(0.5 * 0.75))


def test_per_layer_breakdown():
    a = ActivationTrace([np.array([[True, False]]), np.array([[True, True, True]])])
    b = ActivationTrace([np.array([[False, True]]), np.array([[True, True, True]])])
    res = activation_consistency(a, b, detail=True)
    assert res.per_layer == [0.0, 1.0]
    assert res.value == pytest.approx(3 / 5 / math.sqrt(4 / 5 * 4 / 5))


traces = st.integers(1, 6).flatmap(lambda n: st.integers(1, 12).flatmap(lambda w: st.tuples(
    st.lists(st.booleans(), min_size=n * w, max_size=n * w),
    st.lists(st.booleans(), min_size=n * w, max_size=n * w),
    st.just((n, w)),
)))


@settings(max_examples=300, deadline=None)
@given(traces)
def test_consistency_bounded_and_equality_case(data):
    a, b, shape = data
    ta = ActivationTrace([np.array(a).reshape(shape)])
    tb = ActivationTrace([np.array(b).reshape(shape)])
    v = activation_consistency(ta, tb)
    if math.isnan(v):
        assert not any(a) or not any(b)
        return
    assert 0.0 <= v <= 1.0 + 1e-12
    assert (v == pytest.approx(1.0, abs=1e-12)) == (a == b)


def test_orthant_closed_form():
    assert orthant_consistency(0.0) == 1.0
    assert orthant_consistency(math.pi / 2) == 0.5


def _low_variance_pair(d, rng, spread=0.03):
    """Two near-constant vectors; their angle is of order ``spread``."""
    return 1.0 + spread * rng.normal(size=d), 1.0 + spread * rng.normal(size=d)


def _angle(a, b):
    return math.acos(min(1.0, a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))


def test_prop1_identical_inputs():
    x = np.full(20, 1.0) + 1e-4 * make_rng(0).normal(size=20)
    est = prop1_montecarlo(20, 2000, 1.0, 1.0, x, x, seed=0)
    assert est.cos_estimate == pytest.approx(1.0)
    assert est.consistency_estimate == pytest.approx(1.0)
    assert est.gap == pytest.approx(0.0, abs=1e-12)


def test_prop1_orthogonal_inputs_match_orthant():
    rng = make_rng(1)
    x = rng.normal(size=100)
    y = rng.normal(size=100)
    y -= (y @ x) / (x @ x) * x
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = prop1_montecarlo(100, 10_000, 1.0, 1.0, x, y, seed=2)
    assert abs(est.consistency_estimate - 0.5) <= 0.03


def test_prop1_small_angle_gap():
    x, xa = _low_variance_pair(100, make_rng(3))
    est = prop1_montecarlo(100, 10_000, 1.0, 1.0, x, xa, seed=4)
    assert not est.warnings
    assert est.gap <= 0.05
    assert abs(est.consistency_estimate - orthant_consistency(_angle(x, xa))) <= 0.01


def test_prop1_warnings():
    x = np.linspace(0.1, 2.0, 10)
    with pytest.warns(UserWarning):
        est = prop1_montecarlo(10, 100, 1.0, 1.0, x, x, seed=0)
    assert len(est.warnings) == 3
    assert relative_variance(np.ones(5)) == 0.0


def test_prop1_gap_shrinks_with_width():
    x, xa = _low_variance_pair(50, make_rng(9), spread=0.02)
    small, large = [], []
    for s in range(20):
        small.append(prop1_montecarlo(50, 1000, 1.0, 1.0, x, xa, seed=(s, 0)).gap)
        large.append(prop1_montecarlo(50, 10_000, 1.0, 1.0, x, xa, seed=(s, 1)).gap)
    assert np.median(large) <= np.median(small)


def test_consistency_non_increasing_in_angle():
    rng = make_rng(11)
    u = np.full(30, 1.0) + 1e-3 * rng.normal(size=30)
    w = rng.normal(size=30)
    w -= (w @ u) / (u @ u) * u
    w *= np.linalg.norm(u) / np.linalg.norm(w)
    model = single_layer_net(30, 20_000, 1.0, 1.0, seed=5)
    tn = record_activation_trace(model, u)
    vals = []
    for ang in np.linspace(0, math.pi / 2, 8):
        xa = math.cos(ang) * u + math.sin(ang) * w
        vals.append(activation_consistency(tn, record_activation_trace(model, xa)))
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_single_layer_net_shape():
    model = single_layer_net(7, 11, 0.5, 2.0, seed=0)
    assert model.input_dim == 7 and model.hidden_widths == [11] and model.n_classes == 1
    assert not any(b.any() for b in model.biases)
    _, pre = forward_cache(model, np.ones((1, 7)))
    assert pre[0].shape == (1, 11)
