import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrirob.attribution import (
    AttributionResult, completeness_gap, integrated_gradients, integrated_gradients_batch, norm_bound_check,
)
from attrirob.metrics import cosine_similarity
from attrirob.ndcore import MlpModel, ShapeError, init_mlp, make_rng, mlp_forward
from conftest import random_net


def test_linear_model_is_exact_for_any_m():
    model = MlpModel([np.array([[1.0, -2.0]])], [np.array([0.3])])
    for m in (1, 2, 7, 50):
        res = integrated_gradients(model, [0.5, 0.5], 0, m=m)
        assert np.allclose(res.values, [0.5, -1.0])
        assert res.completeness_gap <= 1e-12


def test_baseline_equal_to_input_gives_zero():
    model = random_net(0)
    x = np.array([0.1, 0.7, 0.3, 0.9])
    res = integrated_gradients(model, x, 1, baseline=x, m=20)
    assert np.array_equal(res.values, np.zeros(4))
    assert res.completeness_gap == 0.0


def test_single_relu_analytic_integral():
    model = MlpModel([np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
    for m in (1, 3, 100):
        res = integrated_gradients(model, [1.0], 0, m=m)
        assert res.values[0] == pytest.approx(1.0)
        assert res.values[0] == pytest.approx(mlp_forward(model, [1.0])[0] - mlp_forward(model, [0.0])[0])


def test_right_endpoint_rule_by_hand():
    # f(x) = relu(x - 0.5): gradient 1 on (0.5, 1], 0 below; m=4 -> points .25 .5 .75 1
    model = MlpModel([np.ones((1, 1)), np.ones((1, 1))], [np.array([-0.5]), np.zeros(1)])
    res = integrated_gradients(model, [1.0], 0, m=4)
    assert res.values[0] == pytest.approx(0.5)  # (1/4) * (0 + 0 + 1 + 1)
    res = integrated_gradients(model, [1.0], 0, m=3)
    assert res.values[0] == pytest.approx(2 / 3)  # points 1/3, 2/3, 1


def test_errors():
    model = random_net(0)
    with pytest.raises(ValueError):
        integrated_gradients(model, np.zeros(4), 0, m=0)
    with pytest.raises(ShapeError):
        integrated_gradients(model, np.zeros(3), 0)
    with pytest.raises(ShapeError):
        integrated_gradients(model, np.zeros(4), 0, baseline=np.zeros(2))


def test_gap_recomputable_and_serializable():
    model = random_net(1)
    x = make_rng(0).uniform(size=4)
    res = integrated_gradients(model, x, 2, m=17)
    assert res.recompute_gap(model, x) == pytest.approx(res.completeness_gap, abs=1e-15)
    doc = json.loads(res.to_json())
    assert doc["m"] == 17 and doc["class"] == 2 and len(doc["values"]) == 4
    lines = res.to_csv().splitlines()
    assert lines[0] == "index,value" and len(lines) == 5


def test_batch_matches_single():
    model = random_net(2)
    X = make_rng(1).uniform(size=(6, 4))
    cls = [0, 1, 2, 0, 1, 2]
    batch = integrated_gradients_batch(model, X, cls, m=13)
    for i in range(6):
        assert np.allclose(batch[i], integrated_gradients(model, X[i], cls[i], m=13).values, atol=1e-14)


def test_gap_shrinks_with_more_steps():
    gaps10, gaps300 = [], []
    for s in range(50):
        model = init_mlp([5, 16, 16, 3], seed=(s, 0), zero_bias=False)
        x = make_rng((s, 1)).uniform(size=5)
        gaps10.append(completeness_gap(model, x, 0, m=10))
        gaps300.append(completeness_gap(model, x, 0, m=300))
    assert np.median(gaps300) <= np.median(gaps10)


def test_norm_bound_examples():
    assert norm_bound_check(np.array([3.0, 4.0]))
    assert norm_bound_check(np.array([0.0, 0.0, 0.0, 5.0]))
    with pytest.raises(ValueError):
        norm_bound_check(np.array([1.0, -1.0]))
    rng = make_rng(0)
    assert all(norm_bound_check(rng.uniform(0, 10, size=rng.integers(1, 50))) for _ in range(100))


def test_norm_bound_with_model():
    # nonnegative weights, zero biases: IG is nonnegative on positive inputs
    model = MlpModel([np.abs(make_rng(0).normal(size=(6, 4))), np.abs(make_rng(1).normal(size=(2, 6)))],
                     [np.zeros(6), np.zeros(2)])
    x = make_rng(2).uniform(size=4)
    res = integrated_gradients(model, x, 0, m=10)
    assert np.all(res.values >= 0)
    assert norm_bound_check(res, model, x)
    assert np.linalg.norm(res.values) <= mlp_forward(model, x)[0] - mlp_forward(model, np.zeros(4))[0] + 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(0.1, 10.0))
def test_positive_homogeneity_zero_bias(seed, c):
    model = init_mlp([4, 8, 8, 3], seed=seed)
    x = make_rng(seed).uniform(0.1, 1.0, size=4)
    a = integrated_gradients(model, x, 0, m=5).values
    b = integrated_gradients(model, c * x, 0, m=5).values
    if np.linalg.norm(a) > 1e-9:
        assert cosine_similarity(a, b) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 40))
def test_affine_models_complete_for_any_m(seed, m):
    rng = make_rng(seed)
    model = MlpModel([rng.normal(size=(3, 6))], [rng.normal(size=3)])
    x = rng.uniform(size=6)
    base = rng.uniform(size=6)
    assert completeness_gap(model, x, 1, base, m) <= 1e-12
