"""Integrated gradients, completeness and the attribution-norm bound."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .ndcore import MlpModel, ShapeError, batched_ig, mlp_forward

DEFAULT_M_EVAL = 50
DEFAULT_M_TRAIN = 10


@dataclass
class AttributionResult:
    values: np.ndarray
    baseline: np.ndarray
    cls: int
    m: int
    completeness_gap: float

    def to_json(self) -> str:
        return json.dumps({
            "values": self.values.tolist(),
            "baseline": self.baseline.tolist(),
            "class": self.cls,
            "m": self.m,
            "completeness_gap": self.completeness_gap,
        })

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "value"])
        for i, v in enumerate(self.values):
            w.writerow([i, repr(float(v))])
        return buf.getvalue()

    def recompute_gap(self, model: MlpModel, x) -> float:
        f_x = mlp_forward(model, x)[self.cls]
        f_a = mlp_forward(model, self.baseline)[self.cls]
        return abs(float(self.values.sum()) - (f_x - f_a))


def _check(model: MlpModel, x, baseline, m: int) -> tuple[np.ndarray, np.ndarray]:
    if m < 1:
        raise ValueError("m must be a positive integer")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != model.input_dim:
        raise ShapeError(f"x shape {x.shape} does not match input dim {model.input_dim}")
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if base.shape != x.shape:
        raise ShapeError(f"baseline shape {base.shape} != x shape {x.shape}")
    return x, base


def integrated_gradients(model: MlpModel, x, cls: int, baseline=None, m: int = DEFAULT_M_EVAL) -> AttributionResult:
    """``(x - a) * mean_k grad f_cls(a + k/m (x - a))`` for k = 1..m."""
    x, base = _check(model, x, baseline, m)
    cache = batched_ig(model, x[None, :], cls, base, m)
    values = cache.values[0]
    gap = abs(float(values.sum()) - float(mlp_forward(model, x)[cls] - mlp_forward(model, base)[cls]))
    return AttributionResult(values, base, int(cls), m, gap)


def integrated_gradients_batch(model: MlpModel, X, classes, baseline=None, m: int = DEFAULT_M_EVAL) -> np.ndarray:
    """IG values for every row of ``X``; no completeness bookkeeping."""
    return batched_ig(model, X, classes, baseline, m).values


def completeness_gap(model: MlpModel, x, cls: int, baseline=None, m: int = DEFAULT_M_EVAL) -> float:
    return integrated_gradients(model, x, cls, baseline, m).completeness_gap


def norm_bound_check(attr: AttributionResult | np.ndarray, model: MlpModel | None = None, x=None) -> bool:
    """``||g||_2 <= sum(g)`` for a nonnegative attribution.

    When ``model`` and ``x`` are given the completeness identity is also
    required to hold up to the stored gap, so the bound reads
    ``||g||_2 <= f(x) - f(a)`` as in the geometric argument.
    """
    values = attr.values if isinstance(attr, AttributionResult) else np.asarray(attr, dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("norm bound requires nonnegative attributions")
    ok = bool(np.linalg.norm(values) <= values.sum() * (1 + 1e-12))
    if model is not None and x is not None and isinstance(attr, AttributionResult):
        ok = ok and attr.recompute_gap(model, x) <= attr.completeness_gap + 1e-9
    return ok
