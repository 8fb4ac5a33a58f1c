import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrirob.attacks import AttackConfig
from attrirob.data import generate_synthetic
from attrirob.ndcore import MlpModel, forward_cache, init_mlp, make_rng
from attrirob.training import (
    LOSS_KINDS, DivergenceError, TrainConfig, TrainLog, compute_loss, igr_term, loss_expression, train,
)
from conftest import central_diff, margin_to_boundary, rel_err


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=16, hidden=(8,), learning_rate=0.1, monitor=16,
                attack=AttackConfig(epsilon=0.1, steps=3, restarts=1), m_train=4)
    base.update(kw)
    return TrainConfig(**base)


# -- config ------------------------------------------------------------------

def test_config_validation():
    for bad in (dict(loss_kind="XX"), dict(lam=-1), dict(beta=-1), dict(learning_rate=0), dict(m_train=0),
                dict(momentum=1.0), dict(batch_size=0), dict(eps_warmup=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(attack={"epsilon": 0.2, "steps": 2, "restarts": 1})
    assert cfg.attack.epsilon == 0.2 and cfg.to_dict()["attack"]["clip_range"] == [0.0, 1.0]


# -- IGR term ----------------------------------------------------------------

def test_igr_term_examples():
    model = MlpModel([np.array([[1.0, -2.0, 0.5], [0.3, 0.3, 0.3]])], [np.zeros(2)])
    x = np.array([0.4, 0.2, 0.9])
    assert igr_term(model, x, x, 0) == pytest.approx(0.0, abs=1e-12)
    # IG of a linear model is x * w, so negating x flips the attribution
    assert igr_term(model, x, -x, 0) == pytest.approx(2.0)
    deep = init_mlp([3, 10, 10, 2], seed=0)
    assert igr_term(deep, x, 2.5 * x, 1) == pytest.approx(0.0, abs=1e-12)


def test_igr_term_degenerate_flag():
    model = MlpModel([np.zeros((2, 3))], [np.ones(2)])
    val, flag = igr_term(model, np.ones(3), np.ones(3), 0, return_flag=True)
    assert val == 0.0 and flag


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_igr_term_range(seed):
    rng = make_rng(seed)
    model = init_mlp([4, 8, 3], seed=seed, zero_bias=False)
    v = igr_term(model, rng.uniform(size=4), rng.uniform(-1, 1, size=4), int(rng.integers(3)))
    assert 0.0 <= v <= 2.0


# -- losses ------------------------------------------------------------------

def test_lambda_zero_matches_baseline():
    model = init_mlp([4, 6, 2], seed=1, zero_bias=False)
    rng = make_rng(0)
    X, Xa, y = rng.uniform(size=(5, 4)), rng.uniform(size=(5, 4)), rng.integers(0, 2, size=5)
    for kind in LOSS_KINDS:
        a, _, ga = compute_loss(kind, True, model, X, Xa, y, lam=0.0, with_grad=True)
        b, _, gb = compute_loss(kind, False, model, X, Xa, y, lam=0.0, with_grad=True)
        assert a == b and np.array_equal(ga.flat(), gb.flat())


def test_trades_without_perturbation_is_ce():
    model = init_mlp([4, 6, 3], seed=2, zero_bias=False)
    X = make_rng(1).uniform(size=(3, 4))
    y = np.array([0, 1, 2])
    trades, parts = compute_loss("TRADES", False, model, X, X, y)
    at, _ = compute_loss("AT", False, model, X, X, y)
    assert parts["kl"] == pytest.approx(0.0, abs=1e-15)
    assert trades == pytest.approx(at)


def test_loss_formulas_by_hand():
    # identity logits: z(x) = x
    model = MlpModel([np.eye(2)], [np.zeros(2)])
    x = np.array([[0.0, 0.0]])
    xa = np.array([[0.0, math.log(3.0)]])
    y = np.array([0])
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    kl = float(np.sum(p * np.log(p / q)))
    val, parts = compute_loss("MART", False, model, x, xa, y, beta=6.0)
    assert parts["bce_adv"] == pytest.approx(-math.log(0.25) - math.log(1 - 0.75))
    assert parts["kl_weighted"] == pytest.approx(6.0 * kl * (1 - 0.5))
    assert val == pytest.approx(2 * math.log(4) + 3 * kl)
    val, parts = compute_loss("TRADES", False, model, x, xa, y, beta=2.0)
    assert val == pytest.approx(-math.log(0.25) + 2 * kl)
    val, _ = compute_loss("AT", False, model, x, xa, y)
    assert val == pytest.approx(math.log(4))
    # class-0 logit x0 + x1 has IG equal to x itself
    summed = MlpModel([np.array([[1.0, 1.0], [0.0, 0.0]])], [np.zeros(2)])
    xn, xp = np.array([[1.0, 1.0]]), np.array([[0.0, math.log(3.0)]])
    val, parts = compute_loss("IG_NORM", False, summed, xn, xp, y, lam=0.5)
    assert parts["ce_natural"] == pytest.approx(-math.log(math.exp(2) / (math.exp(2) + 1)))
    assert parts["ig_l1"] == pytest.approx(0.5 * (1 + abs(1 - math.log(3))))
    val, parts = compute_loss("IG_SUM_NORM", False, summed, xn, xp, y, lam=0.5)
    assert parts["ce_adv"] == pytest.approx(-math.log(3 / 4))
    val, parts = compute_loss("ADVAAT", False, summed, np.array([[1.0, 2.0]]), np.array([[2.0, 1.0]]), y, lam=1.0)
    assert parts["pcl"] == pytest.approx(1.0)  # Pearson -1 -> PCL 1
    val, parts = compute_loss("AT", True, summed, np.array([[1.0, 2.0]]), np.array([[2.0, 4.0]]), y, lam=3.0)
    assert parts["igr"] == pytest.approx(0.0, abs=1e-12)
    val, parts = compute_loss("AT", True, summed, np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), y, lam=3.0)
    assert parts["igr"] == pytest.approx(3.0)


def test_unknown_kind():
    with pytest.raises(ValueError):
        loss_expression("SSR")


@pytest.mark.parametrize("kind", LOSS_KINDS)
@pytest.mark.parametrize("use_igr", [False, True])
def test_loss_parameter_gradients_match_finite_differences(kind, use_igr):
    m = 5
    checked = 0
    for s in range(30):
        model = init_mlp([3, 5, 4, 2], seed=(s, 7), zero_bias=False)
        rng = make_rng((s, 8))
        X = rng.uniform(0.2, 0.8, size=(4, 3))
        Xa = np.clip(X + rng.uniform(-0.1, 0.1, size=X.shape), 0, 1)
        y = rng.integers(0, 2, size=4)
        path = np.concatenate([X * k / m for k in range(1, m + 1)] + [Xa * k / m for k in range(1, m + 1)])
        if margin_to_boundary(model, path) < 1e-3:
            continue
        _, _, g = compute_loss(kind, use_igr, model, X, Xa, y, lam=0.8, m=m, with_grad=True)
        fd = central_diff(lambda th: compute_loss(kind, use_igr, model.with_flat(th), X, Xa, y, lam=0.8, m=m)[0],
                          model.flat())
        tol = 1e-3 if use_igr else 1e-4
        assert rel_err(g.flat(), fd) <= tol
        checked += 1
        if checked == 4:
            break
    assert checked >= 2


# -- training loop -----------------------------------------------------------

def blobs(n=200, seed=0):
    return generate_synthetic("blobs", n, noise=0.3, seed=seed)


def test_zero_epochs_returns_initial_model():
    ds = blobs()
    model = init_mlp([2, 8, 2], seed=5)
    out, log = train(small_cfg(epochs=0), ds, model)
    assert np.array_equal(out.flat(), model.flat()) and len(log) == 0


def test_train_is_deterministic():
    ds = blobs()
    a, la = train(small_cfg(use_igr=True), ds)
    b, lb = train(small_cfg(use_igr=True), ds)
    assert np.array_equal(a.flat(), b.flat())
    assert [r.components for r in la.records] == [r.components for r in lb.records]


def test_lambda_zero_trajectory_equals_plain_training():
    ds = blobs()
    a, _ = train(small_cfg(use_igr=True, lam=0.0, loss_kind="AT"), ds)
    b, _ = train(small_cfg(use_igr=False, lam=0.0, loss_kind="AT"), ds)
    assert np.array_equal(a.flat(), b.flat())


def test_blobs_adversarial_training_reaches_high_accuracy():
    ds = generate_synthetic("blobs", 400, noise=0.2, seed=1)
    cfg = TrainConfig(epochs=30, hidden=(16,), batch_size=32, learning_rate=0.1,
                      attack=AttackConfig(epsilon=0.05, steps=5, restarts=1), m_train=5, monitor=32)
    model, log = train(cfg, ds)
    assert len(log) == 30
    assert log.records[-1].natural_accuracy >= 0.95


@pytest.mark.parametrize("kind", LOSS_KINDS)
def test_every_kind_trains(kind, tmp_path):
    model, log = train(small_cfg(loss_kind=kind, use_igr=True, epochs=1), blobs(64))
    assert len(log) == 1 and np.all(np.isfinite(model.flat()))
    log.write_csv(tmp_path / "log.csv")
    header = (tmp_path / "log.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "epoch" and "loss" in header and "mean_consistency" in header


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    ds = blobs()
    with pytest.raises(DivergenceError):
        train(small_cfg(learning_rate=1e200, epochs=3), ds)


def test_eps_warmup_ramps_radius():
    ds = blobs()
    a, _ = train(small_cfg(eps_warmup=1), ds)
    b, _ = train(small_cfg(eps_warmup=0), ds)
    assert not np.array_equal(a.flat(), b.flat())


def test_train_accepts_array_tuple():
    ds = blobs(64)
    a, _ = train(small_cfg(epochs=1), ds)
    b, _ = train(small_cfg(epochs=1), (ds.inputs, ds.labels))
    assert np.array_equal(a.flat(), b.flat())
    with pytest.raises(ValueError):
        train(small_cfg(), (np.zeros((0, 2)), np.zeros(0, int)))


def test_trainlog_empty_csv(tmp_path):
    TrainLog().write_csv(tmp_path / "x.csv")
    assert (tmp_path / "x.csv").read_text().startswith("epoch")
