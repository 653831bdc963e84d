import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.special import expit, logit

from randaudit.features import UnitTable
from randaudit.learners import (
    RATE_CLIP,
    BoostedStumpsSpec,
    ConstantModel,
    FoldPlan,
    LogisticSpec,
    cross_fit_batch,
    cross_fit_predictions,
    fit,
    fit_logistic_batch,
    fit_stumps_batch,
    learner_from_dict,
    learner_to_dict,
    make_folds,
)
from randaudit.scoring import delta_loglik

from conftest import make_units

X6 = np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])
Y6 = np.array([0, 0, 0, 1, 1, 1])
# slope of the penalized fit on X6/Y6, from scipy L-BFGS on the same objective
SCIPY_SLOPE = {0.1: 2.2947553848606037, 1.0: 1.1044042762743032, 10.0: 0.3633581924132279}


# -- folds ------------------------------------------------------------------


def test_folds_even():
    plan = make_folds(make_units(10), 5, seed=0)
    assert plan.sizes() == [2] * 5


def test_folds_uneven():
    plan = make_folds(make_units(11), 5, seed=0)
    assert sorted(plan.sizes()) == [2, 2, 2, 2, 3]


def test_folds_deterministic():
    u = make_units(23)
    assert make_folds(u, 4, 7) == make_folds(u, 4, 7)
    assert make_folds(u, 4, 7) != make_folds(u, 4, 8)


def test_folds_errors():
    with pytest.raises(ValueError):
        make_folds(make_units(4), 5, 0)
    with pytest.raises(ValueError):
        make_folds(make_units(4), 1, 0)


def test_folds_stratified_balance():
    blocks = ["a"] * 7 + ["b"] * 9 + ["c"] * 4
    plan = make_folds(make_units(20, blocks=blocks), 3, 2)
    b = np.array(blocks)
    for key in "abc":
        sizes = np.bincount(plan.assignment[b == key], minlength=3)
        assert sizes.max() - sizes.min() <= 1
    assert max(plan.sizes()) - min(plan.sizes()) <= 1


def test_folds_group_clusters():
    clusters = [f"c{i % 6}" for i in range(24)]
    plan = make_folds(make_units(24, clusters=clusters), 3, 0)
    for c in set(clusters):
        assert len({plan.assignment[i] for i in range(24) if clusters[i] == c}) == 1
    assert plan.grouped_by == "cluster"


def test_foldplan_dict_roundtrip():
    plan = make_folds(make_units(13), 4, 5)
    assert FoldPlan.from_dict(plan.to_dict()) == plan


@settings(max_examples=40, deadline=None)
@given(n=st.integers(4, 60), data=st.data())
def test_property_fold_invariants(n, data):
    K = data.draw(st.integers(2, n))
    plan = make_folds(make_units(n), K, data.draw(st.integers(0, 1000)))
    sizes = plan.sizes()
    assert len(sizes) == K and min(sizes) >= 1 and max(sizes) - min(sizes) <= 1
    assert sum(sizes) == n


# -- logistic ---------------------------------------------------------------


@pytest.mark.parametrize("lam", sorted(SCIPY_SLOPE))
def test_logistic_separable_matches_scipy(lam):
    model = fit(LogisticSpec(l2_penalty=lam), X6, Y6)
    assert model.converged
    assert abs(model.coef[0] - SCIPY_SLOPE[lam]) < 1e-6
    assert abs(model.intercept) < 1e-6


def test_logistic_norm_decreases_with_penalty():
    slopes = [fit(LogisticSpec(l2_penalty=lam), X6, Y6).coef[0] for lam in (0.01, 0.1, 1.0, 10.0, 100.0)]
    assert all(np.isfinite(slopes))
    assert all(a > b for a, b in zip(slopes, slopes[1:]))


def test_logistic_random_matches_scipy():
    rng = np.random.default_rng(11)
    X = rng.standard_normal((80, 3))
    y = (rng.random(80) < expit(X @ [1.0, -0.5, 0.0] + 0.3)).astype(float)
    lam = 0.7

    def objective(w):
        z = w[0] + X @ w[1:]
        return np.sum(np.logaddexp(0, z) - y * z) + lam / 2 * w[1:] @ w[1:]

    ref = minimize(objective, np.zeros(4), method="BFGS", options={"gtol": 1e-10}).x
    model = fit(LogisticSpec(l2_penalty=lam), X, y)
    assert np.allclose([model.intercept, *model.coef], ref, atol=1e-6)


def test_logistic_unpenalized_nonseparable():
    X = np.array([[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]])
    y = np.array([0, 1, 0, 1, 1, 0], dtype=float)
    model = fit(LogisticSpec(l2_penalty=0.0), X, y)
    p = model.predict(X)
    # first-order conditions of the MLE
    assert abs(np.sum(y - p)) < 1e-8 and abs(np.sum((y - p) * X[:, 0])) < 1e-8


def test_one_class_constant():
    m = fit(LogisticSpec(), X6, np.ones(6))
    assert isinstance(m, ConstantModel) and m.probability == 1 - RATE_CLIP
    m0 = fit(BoostedStumpsSpec(), X6, np.zeros(6))
    assert m0.probability == RATE_CLIP


def test_empty_training_set():
    with pytest.raises(ValueError):
        fit(LogisticSpec(), np.zeros((0, 1)), np.zeros(0))


def test_logistic_batch_rows_independent():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((40, 2))
    Y = (rng.random((5, 40)) < 0.5).astype(float)
    W, _, _ = fit_logistic_batch(X, Y, LogisticSpec())
    for b in range(5):
        Wb, _, _ = fit_logistic_batch(X, Y[b : b + 1], LogisticSpec())
        assert np.array_equal(W[b], Wb[0])


# -- stumps -----------------------------------------------------------------


def brute_force_stump(X, y, min_leaf):
    """Best least-squares stump on residuals from the base rate, by exhaustive search."""
    n = y.size
    r = y - y.mean()
    best = None
    for j in range(X.shape[1]):
        values = np.unique(X[:, j])
        for lo, hi in zip(values[:-1], values[1:]):
            thr = (lo + hi) / 2
            left = X[:, j] <= thr
            if left.sum() < min_leaf or n - left.sum() < min_leaf:
                continue
            sse = ((r[left] - r[left].mean()) ** 2).sum() + ((r[~left] - r[~left].mean()) ** 2).sum()
            if best is None or sse < best[0] - 1e-12:
                best = (sse, j, thr, r[left].mean(), r[~left].mean())
    return best


def test_stump_matches_brute_force():
    rng = np.random.default_rng(5)
    for trial in range(20):
        X = np.round(rng.standard_normal((30, 3)), 1)
        y = (rng.random(30) < expit(2 * X[:, trial % 3])).astype(float)
        if y.min() == y.max():
            continue
        _, j, thr, lv, rv = brute_force_stump(X, y, 3)
        model = fit(BoostedStumpsSpec(rounds=1, learning_rate=0.5, min_leaf=3), X, y)
        (fj, fthr, fl, fr) = model.stumps[0]
        assert (fj, fthr) == (j, pytest.approx(thr, abs=1e-12))
        assert fl == pytest.approx(0.5 * lv, abs=1e-12) and fr == pytest.approx(0.5 * rv, abs=1e-12)
        assert model.base_score == pytest.approx(logit(y.mean()), abs=1e-12)


def test_stump_tie_break_lowest_feature():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    y = np.array([0, 0, 1, 1], dtype=float)
    model = fit(BoostedStumpsSpec(rounds=1, min_leaf=1), X, y)
    assert model.stumps[0][:2] == (0, 0.5)


def test_stumps_loss_monotone():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((150, 4))
    Y = (rng.random((6, 150)) < expit(X[:, 0] - X[:, 1] ** 2)).astype(float)
    batch = fit_stumps_batch(X, Y, BoostedStumpsSpec(rounds=50, learning_rate=0.3, min_leaf=5))
    assert batch.train_loss.shape == (6, 51)
    assert np.all(np.diff(batch.train_loss, axis=1) <= 1e-15)


def test_stumps_no_split_possible():
    X = np.ones((6, 1))
    model = fit(BoostedStumpsSpec(rounds=10), X, Y6)
    assert model.stumps == () and np.allclose(model.predict(X), 0.5)


# -- cross-fitting ----------------------------------------------------------


def test_intercept_only_predicts_training_mean():
    u = UnitTable(ids=[str(i) for i in range(12)], features=np.zeros((12, 1)))
    y = np.array([1, 0, 0, 1, 1, 1, 0, 1, 0, 0, 1, 1])
    plan = make_folds(u, 4, 0)
    p = cross_fit_predictions(u, y, plan, LogisticSpec())
    for k in range(4):
        tr = plan.train_index(k)
        assert np.allclose(p[plan.test_index(k)], y[tr].mean(), atol=1e-12)


def test_leave_one_out_excludes_own_label():
    u = make_units(6, d=1, seed=1)
    plan = make_folds(u, 6, 0)
    y = np.array([1, 0, 1, 1, 0, 0])
    p = cross_fit_predictions(u, y, plan, LogisticSpec())
    for i in range(6):
        flipped = y.copy()
        flipped[i] = 1 - flipped[i]
        assert cross_fit_predictions(u, flipped, plan, LogisticSpec())[i] == p[i]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), i=st.integers(0, 29), kind=st.sampled_from(["logistic", "stumps"]))
def test_property_own_label_never_matters(seed, i, kind):
    u = make_units(30, d=2, seed=seed)
    y = (np.random.default_rng(seed).random(30) < 0.5).astype(int)
    spec = LogisticSpec() if kind == "logistic" else BoostedStumpsSpec(rounds=10, min_leaf=2)
    plan = make_folds(u, 5, seed)
    flipped = y.copy()
    flipped[i] = 1 - flipped[i]
    a = cross_fit_predictions(u, y, plan, spec)[i]
    b = cross_fit_predictions(u, flipped, plan, spec)[i]
    assert a == b


def test_training_label_does_matter():
    # flipping a training unit's label moves the held-out prediction
    u = make_units(20, d=1, seed=3)
    y = (u.features[:, 0] > 0).astype(int)
    plan = make_folds(u, 2, 0)
    i = int(plan.test_index(0)[0])
    j = int(plan.train_index(0)[0])
    flipped = y.copy()
    flipped[j] = 1 - flipped[j]
    spec = LogisticSpec()
    assert cross_fit_predictions(u, y, plan, spec)[i] != cross_fit_predictions(u, flipped, plan, spec)[i]


@pytest.mark.parametrize("spec", [LogisticSpec(), LogisticSpec(l2_penalty=0.0), BoostedStumpsSpec(rounds=20)])
def test_cross_fit_batch_invariant(spec):
    u = make_units(50, d=3, seed=4)
    Y = (np.random.default_rng(0).random((17, 50)) < 0.5).astype(np.int8)
    plan = make_folds(u, 5, 1)
    full, _ = cross_fit_batch(u, Y, plan, spec)
    chunks = np.vstack([cross_fit_batch(u, Y[i : i + 7], plan, spec)[0] for i in range(0, 17, 7)])
    single = np.vstack([cross_fit_predictions(u, y, plan, spec) for y in Y])
    assert np.array_equal(full, chunks) and np.array_equal(full, single)


def test_cross_fit_bit_identical_repeat():
    u = make_units(40, d=2, seed=9)
    y = np.arange(40) % 2
    plan = make_folds(u, 5, 3)
    a = cross_fit_predictions(u, y, plan, BoostedStumpsSpec())
    b = cross_fit_predictions(u, y, plan, BoostedStumpsSpec())
    assert a.tobytes() == b.tobytes()


def test_small_sample_guard_uses_baseline():
    u = make_units(10, d=1)
    y = np.array([1, 0, 0, 0, 0, 0, 0, 0, 0, 0])
    plan = make_folds(u, 2, 0)
    q = np.full(10, 0.3)
    p, info = cross_fit_batch(u, y[None, :], plan, LogisticSpec(), q)
    assert np.all(p == 0.3) and info.fallback_folds == 2


def test_null_delta_l_negative_on_average():
    stats = []
    for seed in range(100):
        u = make_units(200, d=5, seed=seed)
        y = np.zeros(200, int)
        y[np.random.default_rng(seed + 10_000).permutation(200)[:100]] = 1
        p = cross_fit_predictions(u, y, make_folds(u, 5, seed), LogisticSpec())
        stats.append(delta_loglik(y, p, 0.5).statistic)
    stats = np.array(stats)
    assert stats.mean() <= 3 * stats.std(ddof=1) / np.sqrt(stats.size)


# -- specs ------------------------------------------------------------------


@pytest.mark.parametrize("spec", [LogisticSpec(0.5, 20, 1e-6, 3, "a"), BoostedStumpsSpec(10, 0.2, 2, 1)])
def test_spec_roundtrip(spec):
    assert learner_from_dict(learner_to_dict(spec)) == spec


def test_spec_validation():
    with pytest.raises(ValueError):
        LogisticSpec(tolerance=0)
    with pytest.raises(ValueError):
        BoostedStumpsSpec(rounds=0)
    with pytest.raises(ValueError):
        BoostedStumpsSpec(min_leaf=0)
    with pytest.raises(ValueError):
        BoostedStumpsSpec(learning_rate=1.5)
    with pytest.raises(ValueError):
        learner_from_dict({"kind": "forest"})
