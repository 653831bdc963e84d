"""Binary-probability learners and the fixed cross-fitting protocol.

Both learners are deterministic. They are fitted in *batches*: one feature
matrix, many label vectors. Every operation is either elementwise or a
reduction along a row, so a row's result does not depend on which other rows
share its batch. That property is what lets the resampling engine chunk work
freely and still reproduce statistics bit for bit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np
from scipy.special import expit, logit

from randaudit._rng import derive_seed, make_rng

# Below this many parameters the Hessian is assembled from row reductions;
# above it, one small matmul per label vector.
_ELEMENTWISE_HESSIAN_MAX_P = 32
_MAX_HALVINGS = 40
_ROUNDING_GAIN = 1e-13
RATE_CLIP = 1e-6


# -- folds ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Fixed partition of units into ``K`` folds (0-based fold indices)."""

    K: int
    assignment: np.ndarray
    seed: int
    stratified_by: str | None = None
    grouped_by: str | None = None

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.intp)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    @property
    def n(self) -> int:
        return self.assignment.size

    def test_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def train_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.K).tolist()

    def __eq__(self, other):
        if not isinstance(other, FoldPlan):
            return NotImplemented
        return (self.K, self.seed, self.stratified_by, self.grouped_by) == (
            other.K,
            other.seed,
            other.stratified_by,
            other.grouped_by,
        ) and np.array_equal(self.assignment, other.assignment)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "seed": self.seed,
            "stratified_by": self.stratified_by,
            "grouped_by": self.grouped_by,
            "assignment": self.assignment.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FoldPlan":
        return cls(doc["K"], doc["assignment"], doc["seed"], doc.get("stratified_by"), doc.get("grouped_by"))


def make_folds(units, K: int, seed: int, stratify: bool = True, group_clusters: bool = True) -> FoldPlan:
    """Balanced K-fold partition, deterministic in ``(n, K, seed, strata)``.

    With ``stratify`` and block ids present, each block is dealt round-robin
    over the folds (continuing where the previous block stopped), so fold sizes
    differ by at most one both within blocks and overall. When units carry
    cluster ids and ``group_clusters`` is set, whole clusters are dealt instead
    of units.
    """
    blocks = getattr(units, "blocks", None) if stratify else None
    clusters = getattr(units, "clusters", None) if group_clusters else None
    if clusters is not None:
        items = sorted(set(clusters))
        position = {c: j for j, c in enumerate(items)}
        unit_item = np.array([position[c] for c in clusters], dtype=np.intp)
        if blocks is not None:
            item_block = dict(zip(clusters, blocks))
            strata = [item_block[c] for c in items]
        else:
            strata = None
    else:
        items = list(range(units.n))
        unit_item = np.arange(units.n)
        strata = list(blocks) if blocks is not None else None
    n_items = len(items)
    if K < 2:
        raise ValueError(f"K={K}: need at least 2 folds")
    if K > n_items:
        raise ValueError(f"K={K} exceeds the number of {'clusters' if clusters is not None else 'units'} ({n_items})")
    rng = make_rng(derive_seed(seed, "folds"))
    fold_of_item = np.empty(n_items, dtype=np.intp)
    groups: dict[str, list[int]] = {}
    for j in range(n_items):
        groups.setdefault(strata[j] if strata is not None else "", []).append(j)
    offset = 0
    for key in sorted(groups):
        members = np.array(groups[key], dtype=np.intp)
        shuffled = members[rng.permutation(members.size)]
        fold_of_item[shuffled] = (offset + np.arange(members.size)) % K
        offset = (offset + members.size) % K
    return FoldPlan(
        K,
        fold_of_item[unit_item],
        seed,
        "block" if strata is not None else None,
        "cluster" if clusters is not None else None,
    )


# -- learner specs ----------------------------------------------------------


@dataclass(frozen=True)
class LogisticSpec:
    """L2-penalized logistic regression (intercept unpenalized), damped Newton."""

    l2_penalty: float = 1.0
    max_iterations: int = 100
    tolerance: float = 1e-8
    train_seed: int = 0
    name: str = ""

    kind = "logistic"

    def __post_init__(self):
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be >= 0")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class BoostedStumpsSpec:
    """Gradient boosting of depth-1 trees on the log-odds scale."""

    rounds: int = 50
    learning_rate: float = 0.1
    min_leaf: int = 5
    train_seed: int = 0
    name: str = ""

    kind = "boosted-stumps"

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")


LearnerSpec = Union[LogisticSpec, BoostedStumpsSpec]


def learner_to_dict(spec: LearnerSpec) -> dict:
    return {"kind": spec.kind, **dataclasses.asdict(spec)}


def learner_from_dict(doc: Mapping) -> LearnerSpec:
    doc = dict(doc)
    kind = doc.pop("kind", None)
    cls = {"logistic": LogisticSpec, "boosted-stumps": BoostedStumpsSpec}.get(kind)
    if cls is None:
        raise ValueError(f"unknown learner kind {kind!r}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown {kind} options: {sorted(unknown)}")
    return cls(**doc)


def learner_label(spec: LearnerSpec, index: int) -> str:
    if spec.name:
        return spec.name
    if isinstance(spec, LogisticSpec):
        return f"m{index}:logistic(l2={spec.l2_penalty:g})"
    return f"m{index}:stumps(rounds={spec.rounds},lr={spec.learning_rate:g},min_leaf={spec.min_leaf})"


# -- fitted models ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConstantModel:
    probability: float

    def predict(self, X) -> np.ndarray:
        return np.full(np.asarray(X).shape[0], self.probability)


@dataclass(frozen=True, eq=False)
class LogisticModel:
    intercept: float
    coef: np.ndarray
    converged: bool
    iterations: int

    def predict(self, X) -> np.ndarray:
        return _logistic_predict(np.array([[self.intercept, *self.coef]]), np.asarray(X, dtype=float))[0]


@dataclass(frozen=True, eq=False)
class StumpsModel:
    """``stumps`` rows are (feature index, threshold, left value, right value); x <= threshold goes left."""

    base_score: float
    stumps: tuple[tuple[int, float, float, float], ...]

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        f = np.full(X.shape[0], self.base_score)
        for j, thr, left, right in self.stumps:
            f = f + np.where(X[:, j] <= thr, left, right)
        return f

    def predict(self, X) -> np.ndarray:
        return expit(self.decision_function(X))


FittedModel = Union[ConstantModel, LogisticModel, StumpsModel]


# -- logistic, batched ------------------------------------------------------


def _with_intercept(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X])


def _linear(W: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Row-wise ``Z @ w`` for every row of W, accumulated column by column."""
    eta = W[:, 0:1] * Z[:, 0]
    for j in range(1, Z.shape[1]):
        eta = eta + W[:, j : j + 1] * Z[:, j]
    return eta


def _logistic_predict(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    return expit(_linear(W, _with_intercept(X)))


def _penalized_loglik(W, Z, Y, pen) -> np.ndarray:
    eta = _linear(W, Z)
    ll = np.sum(Y * eta - np.logaddexp(0.0, eta), axis=1)
    return ll - 0.5 * np.sum(pen * W * W, axis=1)


def _gradient_hessian(W, Z, Y, pen):
    mu = expit(_linear(W, Z))
    resid = Y - mu
    p = Z.shape[1]
    g = np.stack([np.sum(resid * Z[:, j], axis=1) for j in range(p)], axis=1) - pen * W
    h = mu * (1.0 - mu)
    H = np.empty((W.shape[0], p, p))
    if p <= _ELEMENTWISE_HESSIAN_MAX_P:
        for j in range(p):
            for k in range(j, p):
                H[:, j, k] = H[:, k, j] = np.sum(h * (Z[:, j] * Z[:, k]), axis=1)
    else:
        for b in range(W.shape[0]):
            H[b] = (Z * h[b][:, None]).T @ Z
    H[:, np.arange(p), np.arange(p)] += pen
    return g, H


def fit_logistic_batch(X: np.ndarray, Y: np.ndarray, spec: LogisticSpec):
    """Fit one penalized logistic model per row of ``Y``.

    Returns ``(W, converged, iterations)`` where ``W[:, 0]`` is the intercept.
    Rows must contain both classes.
    """
    Z = _with_intercept(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    nb, p = Y.shape[0], Z.shape[1]
    pen = np.full(p, float(spec.l2_penalty))
    pen[0] = 0.0
    W = np.zeros((nb, p))
    W[:, 0] = logit(np.clip(Y.mean(axis=1), 1e-3, 1 - 1e-3))
    converged = np.zeros(nb, dtype=bool)
    iterations = np.zeros(nb, dtype=np.int64)
    active = np.arange(nb)
    for _ in range(spec.max_iterations):
        if active.size == 0:
            break
        Wa, Ya = W[active], Y[active]
        g, H = _gradient_hessian(Wa, Z, Ya, pen)
        done = np.sqrt(np.sum(g * g, axis=1)) < spec.tolerance
        converged[active[done]] = True
        keep = ~done
        active, Wa, Ya, g, H = active[keep], Wa[keep], Ya[keep], g[keep], H[keep]
        if active.size == 0:
            break
        iterations[active] += 1
        try:
            step = np.linalg.solve(H, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(H[b], g[b], rcond=None)[0] for b in range(len(active))])
        base = _penalized_loglik(Wa, Z, Ya, pen)
        t = np.ones(active.size)
        # predicted gain below the objective's rounding error: the comparison
        # would be noise, so the full Newton step is taken unchecked
        decrement = np.sum(g * step, axis=1)
        accepted = decrement <= _ROUNDING_GAIN * (1.0 + np.abs(base))
        Wa[accepted] += step[accepted]
        for _ in range(_MAX_HALVINGS):
            if accepted.all():
                break
            todo = ~accepted
            cand = Wa[todo] + t[todo, None] * step[todo]
            ok = _penalized_loglik(cand, Z, Ya[todo], pen) >= base[todo]
            idx = np.flatnonzero(todo)
            Wa[idx[ok]] = cand[ok]
            accepted[idx[ok]] = True
            t[idx[~ok]] *= 0.5
        W[active] = Wa
        # a row whose step cannot increase the objective has stalled at rounding level
        active = active[accepted]
    return W, converged, iterations


# -- boosted stumps, batched ------------------------------------------------


@dataclass(frozen=True, eq=False)
class StumpsBatch:
    base: np.ndarray  # (nb,)
    feature: np.ndarray  # (nb, R)
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    train_loss: np.ndarray  # (nb, R + 1) mean log loss before each round and at the end

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        f = np.repeat(self.base[:, None], X.shape[0], axis=1)
        for r in range(self.feature.shape[1]):
            xj = X[:, self.feature[:, r]].T
            f = f + np.where(xj <= self.threshold[:, r, None], self.left[:, r, None], self.right[:, r, None])
        return f

    def predict(self, X: np.ndarray) -> np.ndarray:
        return expit(self.decision_function(X))

    def model(self, b: int) -> StumpsModel:
        rows = tuple(
            (int(self.feature[b, r]), float(self.threshold[b, r]), float(self.left[b, r]), float(self.right[b, r]))
            for r in range(self.feature.shape[1])
        )
        return StumpsModel(float(self.base[b]), rows)


def _mean_log_loss(Y, F):
    return np.sum(np.logaddexp(0.0, F) - Y * F, axis=1) / Y.shape[1]


def fit_stumps_batch(X: np.ndarray, Y: np.ndarray, spec: BoostedStumpsSpec) -> StumpsBatch:
    """Stagewise boosting: each round fits a least-squares stump to ``y - p``.

    Leaf values are ``learning_rate`` times the mean residual in the leaf,
    which cannot increase training log loss because its curvature is at most
    1/4. Candidate thresholds are midpoints between consecutive distinct
    values with at least ``min_leaf`` units on each side; exact gain ties go to
    the lowest feature index, then the lowest threshold. If no feature admits a
    split the remaining rounds are dropped.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    nb, n = Y.shape
    rate = np.clip(np.cumsum(Y, axis=1)[:, -1] / n, RATE_CLIP, 1 - RATE_CLIP)
    base = logit(rate)
    F = np.repeat(base[:, None], n, axis=1)

    candidates = []
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        left_n = np.arange(1, n)
        ok = (xs[:-1] < xs[1:]) & (left_n >= spec.min_leaf) & (n - left_n >= spec.min_leaf)
        pos = np.flatnonzero(ok)
        if pos.size:
            thr = 0.5 * (xs[pos] + xs[pos + 1])
            candidates.append((j, order, pos, thr, left_n[pos].astype(float)))

    feats, thrs, lefts, rights, losses = [], [], [], [], [_mean_log_loss(Y, F)]
    rows = np.arange(nb)
    for _ in range(spec.rounds if candidates else 0):
        resid = Y - expit(F)
        best_gain = np.full(nb, -np.inf)
        best_feat = np.zeros(nb, dtype=np.intp)
        best_thr = np.zeros(nb)
        best_sl = np.zeros(nb)
        best_nl = np.ones(nb)
        for j, order, pos, thr, nl in candidates:
            cs = np.cumsum(resid[:, order], axis=1)
            sl = cs[:, pos]
            sr = cs[:, -1:] - sl
            gain = sl * sl / nl + sr * sr / (n - nl)
            arg = np.argmax(gain, axis=1)
            g = gain[rows, arg]
            better = g > best_gain
            best_gain = np.where(better, g, best_gain)
            best_feat = np.where(better, j, best_feat)
            best_thr = np.where(better, thr[arg], best_thr)
            best_sl = np.where(better, sl[rows, arg], best_sl)
            best_nl = np.where(better, nl[arg], best_nl)
        total = np.cumsum(resid, axis=1)[:, -1]
        left = spec.learning_rate * best_sl / best_nl
        right = spec.learning_rate * (total - best_sl) / (n - best_nl)
        xj = X[:, best_feat].T
        F = F + np.where(xj <= best_thr[:, None], left[:, None], right[:, None])
        feats.append(best_feat)
        thrs.append(best_thr)
        lefts.append(left)
        rights.append(right)
        losses.append(_mean_log_loss(Y, F))

    def stack(parts, dtype=float):
        return np.stack(parts, axis=1).astype(dtype) if parts else np.zeros((nb, 0), dtype=dtype)

    return StumpsBatch(base, stack(feats, np.intp), stack(thrs), stack(lefts), stack(rights), np.stack(losses, axis=1))


# -- single fits ------------------------------------------------------------


def fit(spec: LearnerSpec, features, labels) -> FittedModel:
    """Fit one model. One-class labels give a constant model at the clipped class rate."""
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels, dtype=float)
    if y.size == 0:
        raise ValueError("empty training set")
    if X.shape[0] != y.size:
        raise ValueError(f"{X.shape[0]} feature rows for {y.size} labels")
    rate = float(y.mean())
    if rate in (0.0, 1.0):
        return ConstantModel(float(np.clip(rate, RATE_CLIP, 1 - RATE_CLIP)))
    if isinstance(spec, LogisticSpec):
        W, conv, it = fit_logistic_batch(X, y[None, :], spec)
        return LogisticModel(float(W[0, 0]), W[0, 1:].copy(), bool(conv[0]), int(it[0]))
    if isinstance(spec, BoostedStumpsSpec):
        return fit_stumps_batch(X, y[None, :], spec).model(0)
    raise TypeError(f"not a learner spec: {spec!r}")


# -- cross-fitting ----------------------------------------------------------


@dataclass
class CrossFitInfo:
    """Counts over (label vector, fold) pairs."""

    fallback_folds: int = 0
    nonconverged_fits: int = 0

    def add(self, other: "CrossFitInfo") -> None:
        self.fallback_folds += other.fallback_folds
        self.nonconverged_fits += other.nonconverged_fits


def _features_of(units_or_X) -> np.ndarray:
    X = getattr(units_or_X, "features", units_or_X)
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def cross_fit_batch(X, labels: np.ndarray, plan: FoldPlan, spec: LearnerSpec, baseline=None):
    """Out-of-sample probabilities for every row of ``labels`` (shape ``(nb, n)``).

    For each fold the learner is trained on the other folds and predicts the
    held-out units. A training set with fewer than two units of either class
    falls back to predicting ``baseline`` (the design's marginal
    probabilities; the training rate if none is given).
    """
    X = _features_of(X)
    Y = np.atleast_2d(np.asarray(labels)).astype(float)
    nb, n = Y.shape
    if X.shape[0] != n or plan.n != n:
        raise ValueError(f"size mismatch: features {X.shape[0]}, labels {n}, fold plan {plan.n}")
    out = np.empty((nb, n))
    info = CrossFitInfo()
    for k in range(plan.K):
        tr, te = plan.train_index(k), plan.test_index(k)
        Ytr = Y[:, tr]
        ones = np.cumsum(Ytr, axis=1)[:, -1]
        fallback = (ones < 2) | (tr.size - ones < 2)
        info.fallback_folds += int(fallback.sum())
        if fallback.any():
            if baseline is not None:
                out[np.ix_(fallback, te)] = np.asarray(baseline, dtype=float)[te]
            else:
                out[np.ix_(fallback, te)] = np.clip(ones[fallback] / tr.size, RATE_CLIP, 1 - RATE_CLIP)[:, None]
        rows = np.flatnonzero(~fallback)
        if rows.size == 0:
            continue
        if isinstance(spec, LogisticSpec):
            W, conv, _ = fit_logistic_batch(X[tr], Ytr[rows], spec)
            info.nonconverged_fits += int((~conv).sum())
            out[np.ix_(rows, te)] = _logistic_predict(W, X[te])
        elif isinstance(spec, BoostedStumpsSpec):
            out[np.ix_(rows, te)] = fit_stumps_batch(X[tr], Ytr[rows], spec).predict(X[te])
        else:
            raise TypeError(f"not a learner spec: {spec!r}")
    return out, info


def cross_fit_predictions(units, labels, plan: FoldPlan, spec: LearnerSpec, baseline=None) -> np.ndarray:
    """Out-of-sample probability for every unit under the fixed fold plan."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a vector")
    probs, _ = cross_fit_batch(units, labels[None, :], plan, spec, baseline)
    return probs[0]


def describe_folds(plan: FoldPlan) -> dict:
    return {"K": plan.K, "seed": plan.seed, "sizes": plan.sizes(), "stratified_by": plan.stratified_by, "grouped_by": plan.grouped_by}


def check_specs(specs: Sequence[LearnerSpec]) -> list[LearnerSpec]:
    specs = list(specs)
    if not specs:
        raise ValueError("at least one learner spec is required")
    for s in specs:
        if not isinstance(s, (LogisticSpec, BoostedStumpsSpec)):
            raise TypeError(f"not a learner spec: {s!r}")
    return specs
