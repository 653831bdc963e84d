"""Strictly proper score improvements of predictions over design baselines.

Sums use :func:`math.fsum`, which is correctly rounded and therefore
independent of summation order. A statistic is ``L - L0`` with each side
summed separately, so predictions equal to the baseline give exactly 0.
Log scores are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_EPS = 1e-6
SCORE_KINDS = ("log", "brier")


@dataclass(frozen=True)
class ScoreResult:
    """``statistic = model_score - baseline_score``; positive means the model beats the baseline.

    For ``kind == "log"`` the scores are log-likelihoods. For ``"brier"`` they
    are negated squared errors, so the sign convention is the same.
    """

    statistic: float
    model_score: float
    baseline_score: float
    kind: str = "log"
    per_fold: tuple[float, ...] = field(default=())
    scored_units: int = 0


def clip_probabilities(p, eps: float = DEFAULT_EPS) -> np.ndarray:
    if not 0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    return np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)


def _check(labels, probs, q):
    a = np.asarray(labels, dtype=float)
    p = np.asarray(probs, dtype=float)
    q = np.broadcast_to(np.asarray(q, dtype=float), a.shape) if np.ndim(q) == 0 else np.asarray(q, dtype=float)
    if not a.shape == p.shape == q.shape:
        raise ValueError(f"length mismatch: labels {a.shape}, probs {p.shape}, baseline {q.shape}")
    return a, p, q


def informative_mask(q) -> np.ndarray:
    """Units whose baseline probability is strictly inside (0, 1)."""
    q = np.asarray(q, dtype=float)
    return (q > 0.0) & (q < 1.0)


def log_terms(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    return a * np.log(p) + (1.0 - a) * np.log1p(-p)


def brier_terms(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    return -((a - p) ** 2)


_TERMS = {"log": log_terms, "brier": brier_terms}


def score_improvement(labels, probs, q, kind: str = "log", eps: float = DEFAULT_EPS, folds=None) -> ScoreResult:
    """Improvement of ``probs`` over the baseline ``q`` under the chosen score.

    Units with ``q`` in {0, 1} are left out of both sums (their terms are
    design constants). ``folds`` (per-unit fold index) adds a per-fold breakdown.
    """
    if kind not in _TERMS:
        raise ValueError(f"unknown score kind {kind!r}")
    a, p, q = _check(labels, probs, q)
    keep = informative_mask(q)
    p = clip_probabilities(p, eps)
    qc = clip_probabilities(q, eps)
    terms = _TERMS[kind]
    model = terms(a, p)[keep]
    base = terms(a, qc)[keep]
    L, L0 = math.fsum(model), math.fsum(base)
    per_fold = ()
    if folds is not None:
        f = np.asarray(folds)[keep]
        per_fold = tuple(
            math.fsum(model[f == k]) - math.fsum(base[f == k]) for k in range(int(np.max(folds)) + 1)
        )
    return ScoreResult(L - L0, L, L0, kind, per_fold, int(keep.sum()))


def delta_loglik(labels, probs, a_bar: float, eps: float = DEFAULT_EPS, folds=None) -> ScoreResult:
    """Held-out log-likelihood of ``probs`` minus that of the constant rate ``a_bar``."""
    if not 0 < a_bar < 1:
        raise ValueError(f"a_bar must be in (0, 1), got {a_bar}")
    n = np.asarray(labels).shape
    return score_improvement(labels, probs, np.full(n, float(a_bar)), "log", eps, folds)


def delta_loglik_q(labels, probs, q, eps: float = DEFAULT_EPS, folds=None) -> ScoreResult:
    """Log-likelihood improvement over unit-level baseline probabilities ``q``."""
    return score_improvement(labels, probs, q, "log", eps, folds)


def brier_improvement(labels, probs, q, eps: float = DEFAULT_EPS, folds=None) -> ScoreResult:
    """``sum((A - q)^2) - sum((A - probs)^2)``; positive means ``probs`` is closer."""
    return score_improvement(labels, probs, q, "brier", eps, folds)


def batch_statistics(labels: np.ndarray, probs: np.ndarray, q, kind: str = "log", eps: float = DEFAULT_EPS) -> np.ndarray:
    """:func:`score_improvement` statistic for every row of ``labels``/``probs``."""
    A = np.asarray(labels, dtype=float)
    P = clip_probabilities(probs, eps)
    q = np.asarray(q, dtype=float)
    keep = informative_mask(q)
    qc = clip_probabilities(q, eps)
    terms = _TERMS[kind]
    model = terms(A[:, keep], P[:, keep])
    base = terms(A[:, keep], qc[keep])
    return np.array([math.fsum(m) - math.fsum(b) for m, b in zip(model, base)])
