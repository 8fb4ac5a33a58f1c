"""Numerical experiments on the cosine / Kendall-tau relationship.

* ``simulate_tau_cos``: cosine and tau of many random vectors against a
  fixed reference, and the association between the two columns.
* ``find_monotone_sequence``: search for a chain of entry exchanges and
  entry down-scalings from X to X' along which cos(., Y) never increases.
* ``conditional_tau_ordering``: Monte Carlo estimate of
  E[tau(X, Y) - tau(X', Y) | cos(X, Y) >= cos(X', Y)] for one operation.
* ``pearson_instability_demo``: a low-variance vector whose Pearson
  correlation with x + eta and x - eta has opposite signs near +-1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .metrics import kendall_tau, pearson_correlation
from .ndcore import make_rng

SCALE_GRID = (0.9, 0.7, 0.5, 0.3, 0.1)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


# ----------------------------------------------------------------------------
# tau vs cosine simulation
# ----------------------------------------------------------------------------

@dataclass
class SimulationSample:
    cosine: float
    tau: float


@dataclass
class SimulationResult:
    samples: list[SimulationSample]
    association: float          # NaN when undefined
    dim: int
    seed: int

    def summary(self) -> dict:
        return {
            "association": None if math.isnan(self.association) else self.association,
            "n": len(self.samples),
            "dim": self.dim,
            "seed": self.seed,
        }


def simulate_tau_cos(dim: int, n_samples: int, seed: int = 0) -> SimulationResult:
    """Entries of the reference and of every sample are i.i.d. uniform(0, 1)."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    rng = make_rng(seed)
    ref = rng.uniform(0.0, 1.0, size=dim)
    samples = []
    for _ in range(n_samples):
        v = rng.uniform(0.0, 1.0, size=dim)
        samples.append(SimulationSample(_cos(ref, v), kendall_tau(ref, v)))
    if n_samples >= 2:
        assoc = pearson_correlation([s.cosine for s in samples], [s.tau for s in samples])
    else:
        assoc = math.nan
    return SimulationResult(samples, assoc, dim, seed)


# ----------------------------------------------------------------------------
# exchange / scale sequences
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceStep:
    kind: str                   # "exchange" or "scale"
    i: int
    j: int = -1                 # second index for exchanges
    alpha: float = 1.0          # factor for scales

    def __post_init__(self):
        if self.kind == "exchange":
            if self.j < 0:
                raise ValueError("exchange needs two indices")
        elif self.kind == "scale":
            if not 0.0 < self.alpha <= 1.0:
                raise ValueError(f"scale factor {self.alpha} outside (0, 1]")
        else:
            raise ValueError(f"unknown step kind {self.kind!r}")

    @classmethod
    def exchange(cls, i: int, j: int) -> "SequenceStep":
        return cls("exchange", i, j)

    @classmethod
    def scale(cls, i: int, alpha: float) -> "SequenceStep":
        return cls("scale", i, alpha=alpha)


def apply_step(X, step: SequenceStep) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if np.any(X < 0):
        raise ValueError("vector entries must be nonnegative")
    d = X.size
    out = X.copy()
    if step.kind == "exchange":
        if not (0 <= step.i < d and 0 <= step.j < d):
            raise IndexError(f"exchange({step.i}, {step.j}) out of range for dimension {d}")
        out[step.i], out[step.j] = X[step.j], X[step.i]
    else:
        if not 0 <= step.i < d:
            raise IndexError(f"scale index {step.i} out of range for dimension {d}")
        out[step.i] = X[step.i] * step.alpha
    return out


def replay(X, steps: list[SequenceStep]) -> list[np.ndarray]:
    """Every intermediate vector, starting with ``X``."""
    path = [np.asarray(X, dtype=np.float64)]
    for s in steps:
        path.append(apply_step(path[-1], s))
    return path


def matches_up_to_scale(V, target, tol: float = 1e-9) -> bool:
    """``V == c * target`` entrywise within ``tol`` for some c > 0."""
    V = np.asarray(V, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not np.any(target > 0):
        return bool(np.all(np.abs(V) <= tol))
    c = float(V @ target / (target @ target))
    return c > 0 and bool(np.all(np.abs(V - c * target) <= tol))


def _greedy_attempt(X, Xp, Y, dest, c, budget, rng, tol=1e-12):
    """One greedy run for a fixed token assignment and final scale.

    ``dest[p]`` is where the entry now at position p must end up; it must be
    scaled to ``c * Xp[dest[p]]``.  Each step takes the admissible move with
    the most progress (an exchange sending a token home counts 1, or 2 if
    it sends both; an exact scale counts 1, a grid scale 0.5), preferring the
    smallest cosine drop.  Returns (steps or None, steps used).
    """
    d = X.size
    V = X.copy()
    dest = dest.copy()
    target = c * Xp
    ny = np.linalg.norm(Y)
    cf = _cos(Xp, Y)
    cur = _cos(V, Y)
    steps: list[SequenceStep] = []
    home = np.arange(d)
    grid = np.array(SCALE_GRID)
    while True:
        if np.array_equal(dest, home) and matches_up_to_scale(V, Xp):
            return steps, len(steps)
        if len(steps) >= budget:
            return None, len(steps)
        # candidate moves as rows (kind, i, j_or_-1, alpha, gain)
        movers = np.flatnonzero(dest != home)
        need = np.ones(d)
        np.divide(target[dest], V, out=need, where=V > 0)
        shrink = np.flatnonzero(need < 1.0 - 1e-15)
        kinds, ii, jj, alphas, gains = [], [], [], [], []
        for i in movers:
            j = dest[i]
            kinds.append(0); ii.append(i); jj.append(j); alphas.append(1.0)
            gains.append(1.0 + (dest[j] == i))
        for p in shrink:
            kinds.append(1); ii.append(p); jj.append(-1); alphas.append(max(need[p], 1e-300)); gains.append(1.0)
            for a in grid[grid > need[p]]:
                kinds.append(1); ii.append(p); jj.append(-1); alphas.append(a); gains.append(0.5)
        if not kinds:
            return None, len(steps)
        kinds = np.array(kinds); ii = np.array(ii); jj = np.array(jj)
        alphas = np.array(alphas); gains = np.array(gains)
        W = np.repeat(V[None, :], kinds.size, axis=0)
        rows = np.arange(kinds.size)
        ex = kinds == 0
        W[rows[ex], ii[ex]] = V[jj[ex]]
        W[rows[ex], jj[ex]] = V[ii[ex]]
        W[rows[~ex], ii[~ex]] *= alphas[~ex]
        nw = np.linalg.norm(W, axis=1)
        cw = np.where(nw > 0, W @ Y / np.where(nw > 0, nw, 1.0) / ny, 0.0)
        ok = (cw <= cur + tol) & (cw >= cf - tol)
        if not ok.any():
            return None, len(steps)
        best = gains[ok].max()
        idx = np.flatnonzero(ok & (gains == best))
        idx = idx[np.argsort(-cw[idx], kind="stable")]
        k = idx[0] if rng.random() < 0.7 else idx[rng.integers(idx.size)]
        if kinds[k] == 0:
            i, j = int(ii[k]), int(jj[k])
            step = SequenceStep.exchange(i, j)
            dest[i], dest[j] = dest[j], dest[i]
        else:
            step = SequenceStep.scale(int(ii[k]), float(alphas[k]))
        V = W[k]
        cur = float(cw[k])
        steps.append(step)


def find_monotone_sequence(X, Xp, Y, budget: int | None = None, seed=0) -> list[SequenceStep] | None:
    """Greedy search for exchanges/down-scalings taking X to (a multiple of) Xp
    with cos(., Y) non-increasing at every step.

    The first attempt keeps positions, the second matches entries by rank
    (largest X entry goes where Xp is largest), later ones use random
    assignments and smaller final scales.  ``budget`` (default 10 d^2) caps
    the total number of steps taken across all attempts.
    """
    X = np.asarray(X, dtype=np.float64)
    Xp = np.asarray(Xp, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if not (X.shape == Xp.shape == Y.shape) or X.ndim != 1:
        raise ValueError(f"dimension mismatch: {X.shape}, {Xp.shape}, {Y.shape}")
    if np.any(X < 0) or np.any(Xp < 0):
        raise ValueError("X and Xp must be nonnegative")
    if np.any(Y <= 0):
        raise ValueError("Y must be positive")
    d = X.size
    if matches_up_to_scale(X, Xp):
        return []
    if _cos(X, Y) < _cos(Xp, Y) - 1e-12 or not np.any(Xp > 0):
        return None
    budget = 10 * d * d if budget is None else int(budget)
    rng = make_rng(seed)
    used = 0
    attempt = 0
    while used < budget:
        if attempt == 0:
            dest = np.arange(d)
        elif attempt == 1:
            dest = np.empty(d, dtype=np.int64)
            dest[np.argsort(X, kind="stable")] = np.argsort(Xp, kind="stable")
        else:
            dest = rng.permutation(d)
        tgt = Xp[dest]
        ratio = np.full(d, np.inf)
        np.divide(X, tgt, out=ratio, where=tgt > 0)
        c = float(ratio.min())
        attempt += 1
        if c <= 0:
            # a zero entry of X would have to grow; this assignment cannot work
            used += 1
            continue
        if attempt > 2:
            c *= rng.uniform(0.3, 1.0)
        steps, n = _greedy_attempt(X, Xp, Y, dest, c, budget - used, rng)
        used += max(n, 1)
        if steps is not None:
            return steps
    return None


def random_triple(rng: np.random.Generator, dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """X, X' i.i.d. uniform(0,1), Y exponential(1); X and X' are swapped if
    needed so that cos(X, Y) >= cos(X', Y)."""
    X = rng.uniform(0.0, 1.0, size=dim)
    Xp = rng.uniform(0.0, 1.0, size=dim)
    Y = rng.exponential(1.0, size=dim)
    if _cos(X, Y) < _cos(Xp, Y):
        X, Xp = Xp, X
    return X, Xp, Y


def sequence_success_rate(dims, trials: int, seed=0, budget: int | None = None) -> dict[int, float]:
    """Fraction of ``random_triple`` draws for which a sequence is found, per dimension."""
    out = {}
    for d in dims:
        hits = 0
        for t in range(trials):
            X, Xp, Y = random_triple(make_rng((seed, d, t)), d)
            hits += find_monotone_sequence(X, Xp, Y, budget, seed=(seed, d, t)) is not None
        out[int(d)] = hits / trials if trials else math.nan
    return out


# ----------------------------------------------------------------------------
# conditional tau ordering
# ----------------------------------------------------------------------------

@dataclass
class OrderingEstimate:
    mean_diff: float
    std_error: float
    n_accepted: int
    n_drawn: int
    low_power: bool

    @property
    def z(self) -> float:
        if self.std_error == 0:
            return math.inf if self.mean_diff > 0 else (0.0 if self.mean_diff == 0 else -math.inf)
        return self.mean_diff / self.std_error


def _random_op(rng: np.random.Generator, d: int, op_kind: str) -> SequenceStep:
    if op_kind == "exchange":
        p, q = rng.choice(d, size=2, replace=False)
        return SequenceStep.exchange(int(p), int(q))
    if op_kind == "scale":
        # uniform on (0, 1]
        return SequenceStep.scale(int(rng.integers(d)), float(1.0 - rng.random()))
    raise ValueError(f"unknown op kind {op_kind!r}")


def conditional_tau_ordering(dim: int, trials: int, op_kind: str, seed: int = 0,
                             y_sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None,
                             op: SequenceStep | None = None, max_draws: int | None = None) -> OrderingEstimate:
    """Estimate E[tau(X,Y) - tau(X',Y)] over draws with cos(X,Y) >= cos(X',Y).

    Each draw takes X ~ U(0,1)^dim, Y from ``y_sampler`` (exponential(1) by
    default) and X' = one ``op_kind`` operation applied to X (or the fixed
    ``op``).  Draws continue until ``trials`` satisfy the condition.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if y_sampler is None:
        y_sampler = lambda r, d: r.exponential(1.0, size=d)  # noqa: E731
    rng = make_rng(seed)
    max_draws = max_draws or 50 * max(trials, 1)
    diffs = []
    drawn = 0
    while len(diffs) < trials and drawn < max_draws:
        drawn += 1
        X = rng.uniform(0.0, 1.0, size=dim)
        step = op if op is not None else _random_op(rng, dim, op_kind)
        Xp = apply_step(X, step)
        Y = y_sampler(rng, dim)
        if _cos(X, Y) >= _cos(Xp, Y):
            diffs.append(kendall_tau(X, Y, "naive") - kendall_tau(Xp, Y, "naive"))
    diffs = np.asarray(diffs)
    n = diffs.size
    mean = float(diffs.mean()) if n else math.nan
    se = float(diffs.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return OrderingEstimate(mean, se, n, drawn, trials < 100)


# ----------------------------------------------------------------------------
# Pearson instability
# ----------------------------------------------------------------------------

@dataclass
class PearsonDemo:
    rho_plus: float
    rho_minus: float
    x: np.ndarray
    eta: np.ndarray
    attempts: int


def pearson_pair(x, eta) -> tuple[float, float]:
    """(rho(x, x + eta), rho(x, x - eta)); a zero perturbation is rejected."""
    x = np.asarray(x, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if not np.any(eta):
        raise ValueError("eta must be nonzero")
    return pearson_correlation(x, x + eta), pearson_correlation(x, x - eta)


def pearson_instability_demo(dim: int, seed: int = 0, eta_norm: float = 1e-2,
                             budget: int = 1000) -> PearsonDemo | None:
    """Find x with sample variance <= 1e-6 * mean^2 and ||eta|| <= eta_norm such that
    rho(x, x + eta) > 0.9 and rho(x, x - eta) < -0.9.

    Candidates put x = mean + s * e and eta = t * e + noise with t > s, so the
    centred parts of x + eta and x - eta point in opposite directions; the
    noise keeps the construction away from the exact +-1 case.
    """
    if dim < 3:
        raise ValueError("dim must be >= 3")
    rng = make_rng(seed)
    for attempt in range(1, budget + 1):
        mean = rng.uniform(0.5, 2.0)
        e = rng.normal(size=dim)
        e -= e.mean()
        e /= np.linalg.norm(e)
        # sample variance of s*e is s^2 / dim; keep it under 1e-6 * mean^2
        s = mean * 1e-3 * math.sqrt(dim) * rng.uniform(0.1, 1.0)
        x = mean + s * e
        t = rng.uniform(1.5, 4.0) * s
        noise = rng.normal(size=dim) * rng.uniform(0.0, 0.3) * t / math.sqrt(dim)
        eta = t * e + noise
        norm = np.linalg.norm(eta)
        if norm > eta_norm:
            eta *= eta_norm / norm
        if x.var() > 1e-6 * x.mean() ** 2:
            continue
        rp, rm = pearson_pair(x, eta)
        if rp > 0.9 and rm < -0.9:
            return PearsonDemo(rp, rm, x, eta, attempt)
    return None
