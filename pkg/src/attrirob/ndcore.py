"""Dense evaluation engine for fully-connected ReLU networks.

Tensors are plain float64 numpy arrays.  Every routine accepts either a
single sample of shape ``(d,)`` or a batch of shape ``(n, d)``.

Besides the usual forward/backward passes the module can differentiate,
with respect to the parameters, losses that contain input gradients or
integrated-gradients attributions.  For a ReLU network the input gradient
at a point is ``J(theta)^T e_c`` where ``J`` is the product of weight
matrices interleaved with the (locally constant) activation masks.  Holding
the masks fixed, ``<v, grad_x f_c>`` is a linear network applied to ``v``,
so its parameter gradient is an outer product of a forward "tangent" pass
and the usual backward pass.  Bias gradients of such terms vanish.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions do not chain."""


class CapabilityError(ValueError):
    """Raised when a loss asks for a term the engine cannot differentiate."""


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Counter-based (Philox-4x64) generator; equal seeds give equal streams.

    A (possibly nested) sequence of ints is accepted so that per-trial or
    per-restart streams can be derived as ``make_rng((seed, trial))``
    without coordination.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_flatten_seed(seed))))


def _flatten_seed(seed):
    if isinstance(seed, (int, np.integer)):
        if seed < 0:
            raise ValueError("seeds must be nonnegative")
        return int(seed)
    out = []
    for s in seed:
        f = _flatten_seed(s)
        out.extend(f if isinstance(f, list) else [f])
    return out


def as_tensor(x, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


@dataclass
class MlpModel:
    """Layers ``(W, b)`` with ``W`` of shape (out, in); ReLU between layers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need at least one layer and one bias per weight")
        self.weights = [np.array(w, dtype=np.float64, ndmin=2) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64, ndmin=1) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight rows {w.shape[0]} != bias length {b.shape[0]}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i}: input width {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], dict(self.meta))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def with_flat(self, theta: np.ndarray) -> "MlpModel":
        theta = np.asarray(theta, dtype=np.float64)
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            bs.append(theta[pos:pos + b.size].copy())
            pos += b.size
        return MlpModel(ws, bs, dict(self.meta))

    def to_dict(self) -> dict:
        return {
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(self.weights, self.biases)],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpModel":
        layers = doc["layers"]
        return cls([l["w"] for l in layers], [l["b"] for l in layers], dict(doc.get("meta", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MlpModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_mlp(sizes: Sequence[int], seed, sigma_w: float | None = None, zero_bias: bool = True) -> MlpModel:
    """Gaussian initialisation with variance ``2 / fan_in`` unless ``sigma_w`` is given."""
    rng = make_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = sigma_w if sigma_w is not None else np.sqrt(2.0 / fan_in)
        ws.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out) if zero_bias else rng.normal(0.0, 0.1, size=fan_out))
    return MlpModel(ws, bs, {"sizes": list(sizes)})


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "Grads":
        return cls([np.zeros_like(w) for w in model.weights], [np.zeros_like(b) for b in model.biases])

    def add_(self, other: "Grads", scale: float = 1.0) -> "Grads":
        for a, b in zip(self.weights, other.weights):
            a += scale * b
        for a, b in zip(self.biases, other.biases):
            a += scale * b
        return self

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b.ravel()]
        return np.concatenate(parts)


def _batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != model.input_dim:
        raise ShapeError(f"input shape {np.shape(x)} does not match model input dim {model.input_dim}")
    return arr, single


def forward_cache(model: MlpModel, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits and the list of hidden pre-activations for a 2-d batch."""
    pre = []
    h = X
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
    logits = h @ model.weights[-1].T + model.biases[-1]
    return logits, pre


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    X, single = _batch(model, x)
    logits, _ = forward_cache(model, X)
    return logits[0] if single else logits


def predict(model: MlpModel, x):
    """Argmax of the logits; ``np.argmax`` already breaks ties toward the lowest index."""
    logits = mlp_forward(model, x)
    out = np.argmax(logits, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def _classes(cls, n: int, k: int) -> np.ndarray:
    c = np.broadcast_to(np.asarray(cls, dtype=np.int64), (n,)).copy()
    if np.any(c < 0) or np.any(c >= k):
        raise ShapeError(f"class index out of range [0, {k})")
    return c


def _one_hot(c: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(c), k))
    out[np.arange(len(c)), c] = 1.0
    return out


def backward(model: MlpModel, X: np.ndarray, pre: list[np.ndarray], g_logits: np.ndarray,
             need_params: bool = True) -> tuple[np.ndarray, Grads | None]:
    """Reverse pass from logit cotangents; returns (input cotangent, summed parameter grads)."""
    n_layers = len(model.weights)
    delta = g_logits
    grads = Grads.zeros_like(model) if need_params else None
    for l in range(n_layers - 1, -1, -1):
        if need_params:
            h_in = X if l == 0 else np.maximum(pre[l - 1], 0.0)
            grads.weights[l] = delta.T @ h_in
            grads.biases[l] = delta.sum(axis=0)
        delta = delta @ model.weights[l]
        if l > 0:
            delta = delta * (pre[l - 1] > 0)
    return delta, grads


def input_gradient(model: MlpModel, x, cls) -> np.ndarray:
    """d f_cls / d x, with ReLU'(0) = 0."""
    X, single = _batch(model, x)
    c = _classes(cls, len(X), model.n_classes)
    _, pre = forward_cache(model, X)
    g, _ = backward(model, X, pre, _one_hot(c, model.n_classes), need_params=False)
    return g[0] if single else g


def input_vjp(model: MlpModel, X: np.ndarray, g_logits: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``X`` of ``sum(g_logits * f(X))``."""
    _, pre = forward_cache(model, X)
    g, _ = backward(model, X, pre, g_logits, need_params=False)
    return g


@dataclass
class PathGradients:
    """Input gradients of ``f_c`` evaluated at many points, with the caches
    needed to differentiate any linear functional of them w.r.t. the parameters.
    """

    points: np.ndarray           # (P, d)
    classes: np.ndarray          # (P,)
    masks: list[np.ndarray]      # per hidden layer, (P, width) booleans
    deltas: list[np.ndarray]     # per layer, cotangent of that layer's pre-activation, (P, out)
    grads: np.ndarray            # (P, d)


def path_gradients(model: MlpModel, points: np.ndarray, classes: np.ndarray) -> PathGradients:
    _, pre = forward_cache(model, points)
    masks = [z > 0 for z in pre]
    n_layers = len(model.weights)
    deltas: list[np.ndarray] = [None] * n_layers
    delta = _one_hot(classes, model.n_classes)
    for l in range(n_layers - 1, -1, -1):
        deltas[l] = delta
        delta = delta @ model.weights[l]
        if l > 0:
            delta = delta * masks[l - 1]
    return PathGradients(points, classes, masks, deltas, delta)


def tangent_param_grads(model: MlpModel, pg: PathGradients, V: np.ndarray) -> Grads:
    """Parameter gradient of ``sum_p <V[p], grad_x f_c(points[p])>`` with masks frozen."""
    grads = Grads.zeros_like(model)
    t = V
    for l, w in enumerate(model.weights):
        grads.weights[l] = pg.deltas[l].T @ t
        if l < len(model.weights) - 1:
            t = (t @ w.T) * pg.masks[l]
    return grads


def _path_points(X: np.ndarray, baseline: np.ndarray, m: int) -> np.ndarray:
    # right-endpoint rule: alpha_k = k/m, k = 1..m; point index = sample * m + k - 1
    alphas = np.arange(1, m + 1, dtype=np.float64) / m
    diff = X - baseline
    return (baseline[None, None, :] + alphas[None, :, None] * diff[:, None, :]).reshape(-1, X.shape[1])


@dataclass
class IGCache:
    values: np.ndarray           # (n, d)
    mean_grads: np.ndarray       # (n, d)
    diff: np.ndarray             # x - baseline, (n, d)
    m: int
    path: PathGradients


def batched_ig(model: MlpModel, X: np.ndarray, classes, baseline=None, m: int = 50,
               chunk: int | None = 4_000_000) -> IGCache:
    """Riemann (right endpoint) integrated gradients for a batch.

    ``chunk`` bounds the number of path-point array elements held at once
    (``None`` = unbounded); the cache keeps the path state only when
    everything fits in one chunk.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if d != model.input_dim:
        raise ShapeError(f"input dim {d} != model input dim {model.input_dim}")
    base = np.zeros(d) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if base.shape != (d,):
        raise ShapeError(f"baseline shape {base.shape} != ({d},)")
    c = _classes(classes, n, model.n_classes)
    diff = X - base
    per = n if chunk is None else max(1, chunk // (m * d))
    if per >= n:
        pts = _path_points(X, base, m)
        pg = path_gradients(model, pts, np.repeat(c, m))
        mean_grads = pg.grads.reshape(n, m, d).mean(axis=1)
        return IGCache(diff * mean_grads, mean_grads, diff, m, pg)
    mean_grads = np.empty_like(X)
    for s in range(0, n, per):
        sl = slice(s, min(n, s + per))
        pts = _path_points(X[sl], base, m)
        pg = path_gradients(model, pts, np.repeat(c[sl], m))
        mean_grads[sl] = pg.grads.reshape(-1, m, d).mean(axis=1)
    return IGCache(diff * mean_grads, mean_grads, diff, m, None)


def ig_param_grads(model: MlpModel, cache: IGCache, G: np.ndarray) -> Grads:
    """Parameter gradient of ``sum(G * IG)``."""
    if cache.path is None:
        raise CapabilityError("IG cache was chunked; parameter gradients need the full path state")
    V = np.repeat(cache.diff * G / cache.m, cache.m, axis=0)
    return tangent_param_grads(model, cache.path, V)


# ----------------------------------------------------------------------------
# loss expressions
# ----------------------------------------------------------------------------

TERMS = frozenset({"logits", "logits_adv", "grad", "ig", "ig_adv"})


@dataclass
class LossExpression:
    """A per-sample scalar loss of named network terms.

    ``fn(terms, y)`` receives the requested terms (each an ``(n, .)`` array)
    and returns ``(values, cotangents)``: per-sample losses of shape ``(n,)``
    and, for each requested term, d value_i / d term_i.  ``param_gradient``
    averages over the batch.
    """

    needs: frozenset
    fn: Callable[[dict, np.ndarray], tuple[np.ndarray, dict]]
    name: str = "loss"


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _logit_fn(terms, y):
    z = terms["logits"]
    idx = np.arange(len(y))
    g = np.zeros_like(z)
    g[idx, y] = 1.0
    return z[idx, y], {"logits": g}


def _ce_fn(terms, y):
    z = terms["logits"]
    idx = np.arange(len(y))
    lp = log_softmax(z)
    g = np.exp(lp)
    g[idx, y] -= 1.0
    return -lp[idx, y], {"logits": g}


def _grad_sq_fn(terms, y):
    g = terms["grad"]
    return (g * g).sum(axis=1), {"grad": 2.0 * g}


LOGIT = LossExpression(frozenset({"logits"}), _logit_fn, "logit")
CROSS_ENTROPY = LossExpression(frozenset({"logits"}), _ce_fn, "cross_entropy")
GRAD_SQ_NORM = LossExpression(frozenset({"grad"}), _grad_sq_fn, "grad_sq_norm")


def param_gradient(model: MlpModel, loss: LossExpression, batch, X_adv=None, m: int = 10,
                   baseline=None, terms_out: dict | None = None) -> tuple[float, Grads]:
    """Mean batch loss and its gradient w.r.t. every weight and bias.

    ``batch`` is either a list of ``(x, class)`` pairs or a tuple ``(X, y)``
    of arrays.  ``X_adv`` supplies the perturbed inputs for ``*_adv`` terms;
    they are treated as constants.  IG terms use ``m`` Riemann steps and
    the label as the attributed class.
    """
    unknown = set(loss.needs) - TERMS
    if unknown:
        raise CapabilityError(f"unsupported loss terms: {sorted(unknown)}")
    if isinstance(batch, tuple) and len(batch) == 2 and np.ndim(batch[0]) == 2:
        X, y = batch
    else:
        pairs = list(batch)
        X = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
        y = np.array([p[1] for p in pairs])
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = len(X)
    y = _classes(y, n, model.n_classes)
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"input dim {X.shape[1]} != model input dim {model.input_dim}")
    needs_adv = bool({"logits_adv", "ig_adv"} & loss.needs)
    if needs_adv:
        if X_adv is None:
            raise CapabilityError(f"loss '{loss.name}' needs perturbed inputs")
        X_adv = np.atleast_2d(np.asarray(X_adv, dtype=np.float64))

    terms, caches = {}, {}
    if "logits" in loss.needs:
        terms["logits"], caches["logits"] = forward_cache(model, X)
    if "logits_adv" in loss.needs:
        terms["logits_adv"], caches["logits_adv"] = forward_cache(model, X_adv)
    if "grad" in loss.needs:
        pg = path_gradients(model, X, y)
        terms["grad"], caches["grad"] = pg.grads, pg
    if "ig" in loss.needs:
        c = batched_ig(model, X, y, baseline, m, chunk=None)
        terms["ig"], caches["ig"] = c.values, c
    if "ig_adv" in loss.needs:
        c = batched_ig(model, X_adv, y, baseline, m, chunk=None)
        terms["ig_adv"], caches["ig_adv"] = c.values, c

    values, cot = loss.fn(terms, y)
    if terms_out is not None:
        terms_out.update(terms)
    total = Grads.zeros_like(model)
    for key, g in cot.items():
        if key not in loss.needs:
            raise CapabilityError(f"loss returned cotangent for unrequested term '{key}'")
        if key == "logits":
            _, gr = backward(model, X, caches[key], g)
        elif key == "logits_adv":
            _, gr = backward(model, X_adv, caches[key], g)
        elif key == "grad":
            gr = tangent_param_grads(model, caches[key], g)
        else:
            gr = ig_param_grads(model, caches[key], g)
        total.add_(gr)
    for w in total.weights:
        w /= n
    for b in total.biases:
        b /= n
    return float(np.mean(values)), total


def sgd_step(model: MlpModel, grads: Grads, lr: float, momentum: float = 0.0,
             velocity: Grads | None = None) -> Grads | None:
    """In-place SGD update; returns the updated velocity when momentum is used."""
    if momentum:
        if velocity is None:
            velocity = Grads.zeros_like(model)
        for v, g in zip(velocity.weights + velocity.biases, grads.weights + grads.biases):
            v *= momentum
            v += g
        step = velocity
    else:
        step = grads
    for p, g in zip(model.weights + model.biases, step.weights + step.biases):
        p -= lr * g
    return velocity


def iter_pairs(X: np.ndarray, y: Iterable[int]):
    for x, c in zip(X, y):
        yield x, int(c)
