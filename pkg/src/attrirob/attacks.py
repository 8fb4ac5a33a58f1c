"""White-box l-infinity attacks on labels (FGSM, PGD) and on attributions (IFIA).

All attacks work on batches; a single sample of shape ``(d,)`` is accepted
too.  Random starts draw from per-row Philox streams so that a row's
result does not depend on which other rows share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import MetricReport, metric_report, topk_indices
from .ndcore import (
    MlpModel, ShapeError, batched_ig, forward_cache, input_vjp, log_softmax, make_rng, softmax,
)

OBJECTIVES = ("cross_entropy", "kl_to_natural", "igr_cosine", "ig_l1", "ce_ig_l1", "ce_pcl")


@dataclass
class AttackConfig:
    epsilon: float = 0.3
    alpha: float | None = None      # defaults to epsilon / 10
    steps: int = 200
    restarts: int = 5
    k: int = 100
    clip_range: tuple[float, float] = (0.0, 1.0)
    m: int = 20                     # IG steps used inside the attack
    m_eval: int = 50                # IG steps used to score the result
    absolute: bool = True
    dissimilarity: str = "topk_mass"

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = self.epsilon / 10
        self.clip_range = tuple(self.clip_range)
        self.validate()

    def validate(self) -> None:
        lo, hi = self.clip_range
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and self.epsilon > 0 and not self.alpha > 0:
            raise ValueError("alpha must be > 0 when steps > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not lo < hi:
            raise ValueError("clip_range must satisfy lo < hi")
        if self.dissimilarity != "topk_mass":
            raise ValueError(f"unknown dissimilarity {self.dissimilarity!r}")


@dataclass
class AttackReport:
    perturbed: np.ndarray
    label_preserved: bool
    per_restart_metrics: list[MetricReport]
    steps_taken: int
    skipped: bool = False
    worst_restart: int = 0
    restart_inputs: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def worst(self) -> MetricReport | None:
        return self.per_restart_metrics[self.worst_restart] if self.per_restart_metrics else None

    def mean(self) -> MetricReport | None:
        ms = self.per_restart_metrics
        if not ms:
            return None
        pearson = [r.pearson for r in ms if r.pearson_defined]
        return MetricReport(
            tau=float(np.mean([r.tau for r in ms])),
            cosine=float(np.mean([r.cosine for r in ms])),
            pearson=float(np.mean(pearson)) if pearson else float("nan"),
            topk=float(np.mean([r.topk for r in ms])),
            k=ms[0].k,
            absolute_mode=ms[0].absolute_mode,
            cosine_degenerate=any(r.cosine_degenerate for r in ms),
        )


def _rows(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    return np.atleast_2d(arr), arr.ndim == 1


def project(X_adv: np.ndarray, X: np.ndarray, epsilon: float, clip_range) -> np.ndarray:
    lo, hi = clip_range
    return np.clip(np.clip(X_adv, X - epsilon, X + epsilon), lo, hi)


def uniform_start(X: np.ndarray, epsilon: float, seeds) -> np.ndarray:
    """``X + U[-eps, eps]`` with one stream per row (``seeds`` is a list of
    per-row seeds) or one stream for the whole batch (a scalar/tuple seed)."""
    if isinstance(seeds, list):
        if len(seeds) != len(X):
            raise ValueError("need one seed per row")
        noise = np.stack([make_rng(s).uniform(-epsilon, epsilon, size=X.shape[1]) for s in seeds])
    else:
        noise = make_rng(seeds).uniform(-epsilon, epsilon, size=X.shape)
    return X + noise


def _ce_grad_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    g = softmax(z)
    g[np.arange(len(y)), y] -= 1.0
    return g


def cross_entropy(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -log_softmax(z)[np.arange(len(y)), y]


def kl_divergence(z_nat: np.ndarray, z_adv: np.ndarray) -> np.ndarray:
    """KL(softmax(z_nat) || softmax(z_adv)) per row."""
    lp, lq = log_softmax(z_nat), log_softmax(z_adv)
    return (np.exp(lp) * (lp - lq)).sum(axis=1)


def cos_rows(a: np.ndarray, b: np.ndarray, eps: float = 1e-12):
    """Row-wise cosine and its gradients w.r.t. both arguments (zero where degenerate)."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    bad = (na < eps) | (nb < eps)
    na_s = np.where(bad, 1.0, na)
    nb_s = np.where(bad, 1.0, nb)
    c = np.where(bad, 0.0, (a * b).sum(axis=1) / (na_s * nb_s))
    ga = b / (na_s * nb_s)[:, None] - c[:, None] * a / (na_s ** 2)[:, None]
    gb = a / (na_s * nb_s)[:, None] - c[:, None] * b / (nb_s ** 2)[:, None]
    ga[bad] = 0.0
    gb[bad] = 0.0
    return c, ga, gb, bad


def pearson_rows(a: np.ndarray, b: np.ndarray):
    """Row-wise Pearson correlation (centered cosine) and gradients."""
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    c, ga, gb, bad = cos_rows(ac, bc)
    # centring is a projection; its adjoint removes the row mean
    ga -= ga.mean(axis=1, keepdims=True)
    gb -= gb.mean(axis=1, keepdims=True)
    return c, ga, gb, bad


def objective_grad(model: MlpModel, objective: str, X: np.ndarray, y: np.ndarray, X_adv: np.ndarray,
                   ig_nat: np.ndarray | None = None, m: int = 10, lam: float = 1.0,
                   baseline=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-row objective value and its gradient w.r.t. ``X_adv``.

    IG-based objectives use the fact that, with activation masks frozen,
    d IG(x)_i / d x_j = delta_ij * mean path gradient_i for a ReLU network.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
    value = np.zeros(len(X))
    grad = np.zeros_like(X_adv)
    if objective in ("cross_entropy", "ce_ig_l1", "ce_pcl"):
        z, _ = forward_cache(model, X_adv)
        value += cross_entropy(z, y)
        grad += input_vjp(model, X_adv, _ce_grad_logits(z, y))
    if objective == "kl_to_natural":
        z_nat, _ = forward_cache(model, X)
        z_adv, _ = forward_cache(model, X_adv)
        value += kl_divergence(z_nat, z_adv)
        grad += input_vjp(model, X_adv, softmax(z_adv) - softmax(z_nat))
    if objective in ("igr_cosine", "ig_l1", "ce_ig_l1", "ce_pcl"):
        if ig_nat is None:
            ig_nat = batched_ig(model, X, y, baseline, m).values
        cache = batched_ig(model, X_adv, y, baseline, m)
        ig_adv = cache.values
        if objective == "igr_cosine":
            c, _, gb, _ = cos_rows(ig_nat, ig_adv)
            value += 1.0 - c
            g_ig = -gb
        elif objective == "ce_pcl":
            r, _, gb, _ = pearson_rows(ig_nat, ig_adv)
            value += lam * (1.0 - (r + 1.0) / 2.0)
            g_ig = -0.5 * lam * gb
        else:
            w = 1.0 if objective == "ig_l1" else lam
            diff = ig_adv - ig_nat
            value += w * np.abs(diff).sum(axis=1)
            g_ig = w * np.sign(diff)
        grad += g_ig * cache.mean_grads
    return value, grad


def fgsm(model: MlpModel, x, y, epsilon: float, clip_range=(0.0, 1.0)) -> np.ndarray:
    """One signed step on the cross-entropy, projected to the ball and clip range."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    X, single = _rows(x)
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"input dim {X.shape[1]} != model input dim {model.input_dim}")
    yy = np.broadcast_to(np.asarray(y), (len(X),)).astype(np.int64)
    _, g = objective_grad(model, "cross_entropy", X, yy, X)
    out = project(X + epsilon * np.sign(g), X, epsilon, clip_range)
    return out[0] if single else out


def pgd(model: MlpModel, objective: str, x, y, config: AttackConfig, seed=0, lam: float = 1.0,
        baseline=None, return_trace: bool = False):
    """Random start in the eps-ball, then ``config.steps`` signed ascent steps.

    ``seed`` may be a list with one seed per row.  With ``return_trace`` the
    per-step objective values are returned as well (shape (steps+1, n)).
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
    X, single = _rows(x)
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"input dim {X.shape[1]} != model input dim {model.input_dim}")
    yy = np.broadcast_to(np.asarray(y), (len(X),)).astype(np.int64)
    eps = config.epsilon
    X_adv = project(uniform_start(X, eps, seed), X, eps, config.clip_range)
    ig_nat = None
    if objective in ("igr_cosine", "ig_l1", "ce_ig_l1", "ce_pcl"):
        ig_nat = batched_ig(model, X, yy, baseline, config.m).values
    trace = []
    for _ in range(config.steps):
        val, g = objective_grad(model, objective, X, yy, X_adv, ig_nat, config.m, lam, baseline)
        trace.append(val)
        X_adv = project(X_adv + config.alpha * np.sign(g), X, eps, config.clip_range)
    out = X_adv[0] if single else X_adv
    if return_trace:
        val, _ = objective_grad(model, objective, X, yy, X_adv, ig_nat, config.m, lam, baseline)
        trace.append(val)
        return out, np.array(trace)
    return out


def _topk_mask(ig: np.ndarray, k: int, absolute: bool) -> np.ndarray:
    mask = np.zeros(ig.shape, dtype=bool)
    for i, row in enumerate(ig):
        mask[i, topk_indices(row, k, absolute)] = True
    return mask


def ifia_topk_batch(model: MlpModel, X, y, config: AttackConfig, seed=0,
                    sample_ids: Sequence[int] | None = None, baseline=None) -> list[AttackReport]:
    """Iterative feature-importance attack with the top-k dissimilarity.

    Each iteration ascends ``D = -sum_{i in TopK(|IG(x)|)} |IG(x_adv)_i|``
    with a signed step, projects, and reverts rows whose predicted label
    left ``y``.  The restart with the lowest top-k intersection is reported
    as the worst case; every restart's metrics are kept.  Restart ``r`` of
    sample ``s`` starts from the stream ``(seed, s, r)``.
    """
    X, _ = _rows(X)
    n, d = X.shape
    if d != model.input_dim:
        raise ShapeError(f"input dim {d} != model input dim {model.input_dim}")
    yy = np.broadcast_to(np.asarray(y), (n,)).astype(np.int64)
    ids = list(range(n)) if sample_ids is None else list(sample_ids)
    seed_t = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    k = min(config.k, d)
    R = config.restarts
    logits, _ = forward_cache(model, X)
    correct = np.argmax(logits, axis=1) == yy
    reports: list[AttackReport | None] = [None] * n
    for i in np.flatnonzero(~correct):
        reports[i] = AttackReport(X[i].copy(), False, [], 0, skipped=True)
    live = np.flatnonzero(correct)
    if live.size:
        Xl, yl = X[live], yy[live]
        ig_attack = batched_ig(model, Xl, yl, baseline, config.m).values
        ig_eval = batched_ig(model, Xl, yl, baseline, config.m_eval).values
        S = _topk_mask(ig_attack, k, config.absolute)
        # rows ordered sample-major: row = j * R + r
        Xr = np.repeat(Xl, R, axis=0)
        yr = np.repeat(yl, R)
        Sr = np.repeat(S, R, axis=0)
        seeds = [seed_t + (ids[i], r) for i in live for r in range(R)]
        eps = config.epsilon
        X_adv = project(uniform_start(Xr, eps, seeds), Xr, eps, config.clip_range)
        bad = np.argmax(forward_cache(model, X_adv)[0], axis=1) != yr
        X_adv[bad] = Xr[bad]

        def dissim(Z):
            cache = batched_ig(model, Z, yr, baseline, config.m)
            return -(np.abs(cache.values) * Sr).sum(axis=1), cache

        best_val, cache = dissim(X_adv)
        best = X_adv.copy()
        for _ in range(config.steps):
            g = -np.sign(cache.values) * Sr * cache.mean_grads
            cand = project(X_adv + config.alpha * np.sign(g), Xr, eps, config.clip_range)
            keep = np.argmax(forward_cache(model, cand)[0], axis=1) == yr
            X_adv = np.where(keep[:, None], cand, X_adv)
            val, cache = dissim(X_adv)
            improved = val > best_val
            best[improved] = X_adv[improved]
            best_val = np.where(improved, val, best_val)
        ig_best = batched_ig(model, best, yr, baseline, config.m_eval).values
        for j, i in enumerate(live):
            rows = range(j * R, (j + 1) * R)
            metrics = [metric_report(ig_eval[j], ig_best[r], k, config.absolute) for r in rows]
            worst = int(np.argmin([mr.topk for mr in metrics]))
            reports[i] = AttackReport(
                perturbed=best[j * R + worst].copy(),
                label_preserved=True,
                per_restart_metrics=metrics,
                steps_taken=config.steps,
                worst_restart=worst,
                restart_inputs=[best[r].copy() for r in rows],
            )
    return reports


def ifia_topk(model: MlpModel, x, y: int, config: AttackConfig, seed=0, sample_id: int = 0,
              baseline=None) -> AttackReport:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("ifia_topk attacks one sample; use ifia_topk_batch for batches")
    return ifia_topk_batch(model, x[None, :], [y], config, seed, [sample_id], baseline)[0]
