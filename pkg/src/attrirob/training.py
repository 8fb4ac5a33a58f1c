"""Robust training objectives, the IGR regularizer and the adversarial training loop.

Loss kinds (``x_adv`` is a constant supplied by the inner attack):

* ``AT``          CE(f(x_adv), y)
* ``TRADES``      CE(f(x_adv), y) + beta * KL(p(x) || p(x_adv))
* ``MART``        BCE(f(x_adv), y) + beta * KL(p(x) || p(x_adv)) * (1 - p_y(x)),
                  BCE = -log p_y(x_adv) - log(1 - max_{k != y} p_k(x_adv))
* ``IG_NORM``     CE(f(x), y) + lam * ||IG(x) - IG(x_adv)||_1
* ``IG_SUM_NORM`` CE(f(x_adv), y) + lam * ||IG(x) - IG(x_adv)||_1
* ``ADVAAT``      CE(f(x_adv), y) + lam * (1 - (pearson(IG(x), IG(x_adv)) + 1) / 2)

With ``use_igr`` the term ``lam * (1 - cos(IG(x), IG(x_adv)))`` is added.
IG always attributes the true class, uses the zero baseline and raw
(signed) values.  Parameter gradients flow through both IG(x) and
IG(x_adv) under the frozen-mask rule of ``ndcore``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, cos_rows, pearson_rows, pgd
from .consistency import activation_consistency, record_activation_trace
from .ndcore import (
    LossExpression, MlpModel, batched_ig, forward_cache, init_mlp, log_softmax, make_rng,
    param_gradient, sgd_step, softmax,
)

LOSS_KINDS = ("AT", "TRADES", "MART", "IG_NORM", "IG_SUM_NORM", "ADVAAT")

# inner maximization used to produce x_adv for each kind
ATTACK_OBJECTIVE = {
    "AT": "cross_entropy",
    "TRADES": "kl_to_natural",
    "MART": "cross_entropy",
    "IG_NORM": "ig_l1",
    "IG_SUM_NORM": "ce_ig_l1",
    "ADVAAT": "ce_pcl",
}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class TrainConfig:
    loss_kind: str = "AT"
    use_igr: bool = False
    lam: float = 1.0
    beta: float = 6.0
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.1, steps=10, restarts=1))
    m_train: int = 10
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.0
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0
    monitor: int = 128          # samples used for per-epoch robustness statistics
    eps_warmup: int = 0         # epochs over which the training radius ramps up linearly

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        self.hidden = tuple(self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}; choose from {LOSS_KINDS}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.m_train < 1:
            raise ValueError("m_train must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.eps_warmup < 0:
            raise ValueError("eps_warmup must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["attack"]["clip_range"] = list(self.attack.clip_range)
        return d


@dataclass
class EpochRecord:
    epoch: int
    components: dict[str, float]
    natural_accuracy: float
    adversarial_accuracy: float
    mean_cos: float
    mean_consistency: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def columns(self) -> list[str]:
        comps = sorted({k for r in self.records for k in r.components})
        return ["epoch", *comps, "natural_accuracy", "adversarial_accuracy", "mean_cos", "mean_consistency"]

    def write_csv(self, path) -> None:
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                row = {"epoch": r.epoch, **r.components, "natural_accuracy": r.natural_accuracy,
                       "adversarial_accuracy": r.adversarial_accuracy, "mean_cos": r.mean_cos,
                       "mean_consistency": r.mean_consistency}
                w.writerow([repr(float(row[c])) if c != "epoch" else row[c] for c in cols])


# ----------------------------------------------------------------------------
# loss pieces: per-sample values and cotangents w.r.t. logits / IG
# ----------------------------------------------------------------------------

def _ce(z, y):
    lp = log_softmax(z)
    g = np.exp(lp)
    g[np.arange(len(y)), y] -= 1.0
    return -lp[np.arange(len(y)), y], g


def _kl(z_nat, z_adv):
    """KL(p || q) per row with gradients w.r.t. both logit arrays."""
    lp, lq = log_softmax(z_nat), log_softmax(z_adv)
    p, q = np.exp(lp), np.exp(lq)
    l = lp - lq
    val = (p * l).sum(axis=1)
    g_nat = p * (l - val[:, None])
    return val, g_nat, q - p


def _bce(z, y):
    """-log p_y - log(1 - max_{k != y} p_k) with its logit gradient."""
    idx = np.arange(len(y))
    lq = log_softmax(z)
    q = np.exp(lq)
    other = q.copy()
    other[idx, y] = -np.inf
    j = np.argmax(other, axis=1)
    qj = q[idx, j]
    margin = -np.log1p(-np.minimum(qj, 1.0 - 1e-300))
    g = q.copy()
    g[idx, y] -= 1.0
    # d(-log(1 - q_j)) / dz = q_j (e_j - q) / (1 - q_j)
    gj = -q * qj[:, None]
    gj[idx, j] += qj
    g += gj / (1.0 - qj)[:, None]
    return -lq[idx, y] + margin, g


def _l1(ig, ig_adv):
    s = np.sign(ig - ig_adv)
    return np.abs(ig - ig_adv).sum(axis=1), s, -s


def _pcl(ig, ig_adv):
    r, ga, gb, _ = pearson_rows(ig, ig_adv)
    return 1.0 - (r + 1.0) / 2.0, -0.5 * ga, -0.5 * gb


def _igr(ig, ig_adv):
    c, ga, gb, bad = cos_rows(ig, ig_adv)
    val = np.where(bad, 0.0, 1.0 - c)
    return val, -ga, -gb


def loss_expression(kind: str, use_igr: bool = False, lam: float = 1.0, beta: float = 6.0,
                    breakdown: dict | None = None) -> LossExpression:
    """The configured loss as an ``ndcore.LossExpression``.

    If ``breakdown`` is given, each evaluation stores the batch mean of every
    weighted component in it.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; choose from {LOSS_KINDS}")
    igr = use_igr and lam != 0
    needs = {"logits_adv"}
    if kind in ("TRADES", "MART"):
        needs.add("logits")
    if kind == "IG_NORM":
        needs = {"logits"}
    if kind in ("IG_NORM", "IG_SUM_NORM", "ADVAAT") or igr:
        needs |= {"ig", "ig_adv"}

    def fn(terms, y):
        n = len(y)
        total = np.zeros(n)
        cot = {k: np.zeros_like(terms[k]) for k in needs}
        parts = {}

        def add(name, val, grads):
            nonlocal total
            total = total + val
            parts[name] = float(np.mean(val))
            for key, g in grads.items():
                cot[key] += g

        if kind == "IG_NORM":
            v, g = _ce(terms["logits"], y)
            add("ce_natural", v, {"logits": g})
        elif kind == "MART":
            v, g = _bce(terms["logits_adv"], y)
            add("bce_adv", v, {"logits_adv": g})
        else:
            v, g = _ce(terms["logits_adv"], y)
            add("ce_adv", v, {"logits_adv": g})
        if kind == "TRADES":
            kl, g_nat, g_adv = _kl(terms["logits"], terms["logits_adv"])
            add("kl", beta * kl, {"logits": beta * g_nat, "logits_adv": beta * g_adv})
        elif kind == "MART":
            z = terms["logits"]
            kl, g_nat, g_adv = _kl(z, terms["logits_adv"])
            p = softmax(z)
            py = p[np.arange(n), y]
            w = 1.0 - py
            # d p_y / dz = p_y (e_y - p)
            dpy = -py[:, None] * p
            dpy[np.arange(n), y] += py
            add("kl_weighted", beta * kl * w, {
                "logits": beta * (w[:, None] * g_nat - kl[:, None] * dpy),
                "logits_adv": beta * w[:, None] * g_adv,
            })
        elif kind in ("IG_NORM", "IG_SUM_NORM"):
            v, ga, gb = _l1(terms["ig"], terms["ig_adv"])
            add("ig_l1", lam * v, {"ig": lam * ga, "ig_adv": lam * gb})
        elif kind == "ADVAAT":
            v, ga, gb = _pcl(terms["ig"], terms["ig_adv"])
            add("pcl", lam * v, {"ig": lam * ga, "ig_adv": lam * gb})
        if igr:
            v, ga, gb = _igr(terms["ig"], terms["ig_adv"])
            add("igr", lam * v, {"ig": lam * ga, "ig_adv": lam * gb})
        if breakdown is not None:
            breakdown.clear()
            breakdown.update(parts)
        return total, cot

    name = kind.lower() + ("+igr" if use_igr else "")
    return LossExpression(frozenset(needs), fn, name)


def compute_loss(kind: str, use_igr: bool, model: MlpModel, x, x_adv, y, lam: float = 1.0, beta: float = 6.0,
                 m: int = 10, with_grad: bool = False):
    """Batch-mean loss and its component breakdown; with ``with_grad`` also the
    parameter gradient (``Grads``)."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    X_adv = np.atleast_2d(np.asarray(x_adv, dtype=np.float64))
    yy = np.broadcast_to(np.asarray(y), (len(X),)).astype(np.int64)
    parts: dict = {}
    expr = loss_expression(kind, use_igr, lam, beta, parts)
    value, grads = param_gradient(model, expr, (X, yy), X_adv=X_adv, m=m)
    if with_grad:
        return value, dict(parts), grads
    return value, dict(parts)


def igr_term(model: MlpModel, x, x_adv, cls, m: int = 10, return_flag: bool = False):
    """1 - cos(IG(x), IG(x_adv)) for one sample; 0 (flagged) when an attribution vanishes."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_adv = np.atleast_2d(np.asarray(x_adv, dtype=np.float64))
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_adv.shape}")
    ig = batched_ig(model, np.concatenate([x, x_adv]), cls, None, m).values
    n = len(x)
    val, _, _ = _igr(ig[:n], ig[n:])
    _, _, _, bad = cos_rows(ig[:n], ig[n:])
    out = float(np.clip(val[0], 0.0, 2.0)) if n == 1 else np.clip(val, 0.0, 2.0)
    if return_flag:
        return out, bool(bad[0]) if n == 1 else bad
    return out


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

def _arrays(dataset) -> tuple[np.ndarray, np.ndarray, int]:
    if isinstance(dataset, tuple):
        X, y = dataset
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        return X, y, int(y.max()) + 1 if y.size else 0
    return (np.asarray(dataset.inputs, dtype=np.float64), np.asarray(dataset.labels, dtype=np.int64),
            int(dataset.class_count))


def _finite(model: MlpModel) -> bool:
    return all(np.isfinite(p).all() for p in model.parameters())


def robustness_stats(model: MlpModel, X: np.ndarray, y: np.ndarray, attack: AttackConfig, seed, m: int = 10,
                     objective: str = "cross_entropy") -> dict[str, float]:
    """PGD accuracy, mean cos(IG(x), IG(x_adv)) and activation consistency on ``X``."""
    if len(X) == 0:
        return {"adversarial_accuracy": math.nan, "mean_cos": math.nan, "mean_consistency": math.nan}
    X_adv = pgd(model, objective, X, y, attack, seed=seed)
    acc = float(np.mean(np.argmax(forward_cache(model, X_adv)[0], axis=1) == y))
    ig = batched_ig(model, X, y, None, m).values
    ig_adv = batched_ig(model, X_adv, y, None, m).values
    c, _, _, _ = cos_rows(ig, ig_adv)
    cons = activation_consistency(record_activation_trace(model, X), record_activation_trace(model, X_adv))
    return {"adversarial_accuracy": acc, "mean_cos": float(np.mean(c)), "mean_consistency": float(cons)}


def train(config: TrainConfig, dataset, model: MlpModel | None = None) -> tuple[MlpModel, TrainLog]:
    """Adversarial training with optional IGR.

    Per batch: craft x_adv with the kind's inner attack (random start,
    signed PGD steps), reuse that same x_adv for every IG term, take one SGD
    step on the mean loss.  Everything random derives from ``config.seed``.
    """
    config.validate()
    X, y, k = _arrays(dataset)
    if len(X) == 0:
        raise ValueError("dataset is empty")
    if model is None:
        model = init_mlp([X.shape[1], *config.hidden, k], seed=(config.seed, 0))
    else:
        model = model.copy()
    log = TrainLog()
    velocity = None
    objective = ATTACK_OBJECTIVE[config.loss_kind]
    mon = make_rng((config.seed, 1)).permutation(len(X))[: config.monitor]
    for epoch in range(config.epochs):
        attack = config.attack
        if epoch < config.eps_warmup:
            frac = (epoch + 1) / (config.eps_warmup + 1)
            attack = replace(attack, epsilon=attack.epsilon * frac, alpha=attack.alpha * frac)
        order = make_rng((config.seed, 2, epoch)).permutation(len(X))
        sums: dict[str, float] = {}
        count = 0
        for b, start in enumerate(range(0, len(X), config.batch_size)):
            idx = order[start:start + config.batch_size]
            Xb, yb = X[idx], y[idx]
            X_adv = pgd(model, objective, Xb, yb, attack, seed=(config.seed, 3, epoch, b),
                        lam=config.lam)
            value, parts, grads = compute_loss(config.loss_kind, config.use_igr, model, Xb, X_adv, yb,
                                               config.lam, config.beta, config.m_train, with_grad=True)
            if not math.isfinite(value) or not all(np.isfinite(g).all() for g in grads.weights + grads.biases):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b} (loss={value})")
            velocity = sgd_step(model, grads, config.learning_rate, config.momentum, velocity)
            if not _finite(model):
                raise DivergenceError(f"non-finite parameters after epoch {epoch}, batch {b}")
            for key, v in {"loss": value, **parts}.items():
                sums[key] = sums.get(key, 0.0) + v * len(idx)
            count += len(idx)
        nat = float(np.mean(np.argmax(forward_cache(model, X)[0], axis=1) == y))
        stats = robustness_stats(model, X[mon], y[mon], config.attack, (config.seed, 4, epoch), config.m_train)
        log.records.append(EpochRecord(
            epoch=epoch,
            components={key: v / count for key, v in sums.items()},
            natural_accuracy=nat,
            adversarial_accuracy=stats["adversarial_accuracy"],
            mean_cos=stats["mean_cos"],
            mean_consistency=stats["mean_consistency"],
        ))
    return model, log
