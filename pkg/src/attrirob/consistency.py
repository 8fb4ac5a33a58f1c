"""Activation-state traces and the activation-consistency estimator.

Activation consistency between natural and perturbed inputs is
``P(A and B) / sqrt(P(A) P(B))`` where ``A`` (``B``) is the event that a
hidden unit's pre-activation is positive for the natural (perturbed)
input.  Probabilities are frequencies over (sample, unit) pairs.
Exactly-zero pre-activations count as inactive, matching ReLU'(0) = 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .metrics import cosine_similarity
from .ndcore import MlpModel, ShapeError, batched_ig, forward_cache, make_rng


@dataclass
class ActivationTrace:
    layers: list[np.ndarray]    # (n_samples, width) booleans per hidden layer

    @property
    def n_samples(self) -> int:
        return self.layers[0].shape[0] if self.layers else 0

    def pooled(self) -> np.ndarray:
        return np.concatenate([l.ravel() for l in self.layers]) if self.layers else np.zeros(0, bool)


@dataclass
class ConsistencyResult:
    value: float                # NaN when degenerate
    per_layer: list[float]
    degenerate: bool


def record_activation_trace(model: MlpModel, X) -> ActivationTrace:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"input dim {X.shape[1]} != model input dim {model.input_dim}")
    _, pre = forward_cache(model, X)
    return ActivationTrace([z > 0 for z in pre])


def _consistency(a: np.ndarray, b: np.ndarray) -> float:
    pa, pb = a.mean(), b.mean()
    if pa == 0 or pb == 0:
        return math.nan
    return float(np.logical_and(a, b).mean() / math.sqrt(pa * pb))


def activation_consistency(trace_nat: ActivationTrace, trace_adv: ActivationTrace,
                           detail: bool = False):
    """Pooled consistency over every layer and unit; ``detail`` adds per-layer values.

    Returns NaN (flagged as degenerate) if either marginal frequency is zero.
    """
    if len(trace_nat.layers) != len(trace_adv.layers) or any(
        a.shape != b.shape for a, b in zip(trace_nat.layers, trace_adv.layers)
    ):
        raise ShapeError("activation traces have different shapes")
    value = _consistency(trace_nat.pooled(), trace_adv.pooled())
    if not detail:
        return value
    per_layer = [_consistency(a, b) for a, b in zip(trace_nat.layers, trace_adv.layers)]
    return ConsistencyResult(value, per_layer, math.isnan(value))


def relative_variance(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    mean_sq = x.mean() ** 2
    return float(x.var() / mean_sq) if mean_sq > 0 else math.inf


@dataclass
class Prop1Estimate:
    cos_estimate: float
    consistency_estimate: float
    gap: float
    warnings: list[str]


def single_layer_net(d: int, width: int, sigma_w: float, sigma_u: float, seed) -> MlpModel:
    """``f(x) = u^T ReLU(W^T x)`` with Gaussian ``W`` columns and ``u``; no biases."""
    rng = make_rng(seed)
    W = rng.normal(0.0, sigma_w, size=(width, d))   # rows are the columns W_i
    u = rng.normal(0.0, sigma_u, size=(1, width))
    return MlpModel([W, u], [np.zeros(width), np.zeros(1)], {"kind": "single_layer"})


def prop1_montecarlo(d: int, hidden_width: int, sigma_w: float, sigma_u: float, x, x_adv, seed,
                     variance_tol: float = 1e-3) -> Prop1Estimate:
    """Compare cos(IG(x), IG(x_adv)) with the activation consistency of a random
    single-hidden-layer ReLU network.

    Without biases the activation pattern is constant along the ray from the
    zero baseline, so a single Riemann step gives the exact IG.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != (d,) or x_adv.shape != (d,):
        raise ShapeError(f"inputs must have shape ({d},)")
    notes = []
    if hidden_width < 1000:
        notes.append(f"hidden_width={hidden_width} < 1000: estimate has low power")
    for name, v in (("x", x), ("x_adv", x_adv)):
        rv = relative_variance(v)
        if rv > variance_tol:
            notes.append(f"{name} relative variance {rv:.3g} exceeds {variance_tol:g}")
    for n in notes:
        warnings.warn(n, stacklevel=2)
    model = single_layer_net(d, hidden_width, sigma_w, sigma_u, seed)
    ig = batched_ig(model, np.stack([x, x_adv]), 0, None, m=1).values
    cos = cosine_similarity(ig[0], ig[1])
    trace_nat = record_activation_trace(model, x)
    trace_adv = record_activation_trace(model, x_adv)
    cons = activation_consistency(trace_nat, trace_adv)
    return Prop1Estimate(cos, cons, abs(cos - cons), notes)


def orthant_consistency(angle: float) -> float:
    """Closed form for Gaussian weights: P(A and B) = (pi - angle) / (2 pi), P(A) = P(B) = 1/2."""
    return (math.pi - angle) / math.pi
