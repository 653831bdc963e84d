import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from randaudit import design as dz
from randaudit.crt import (
    AuditError,
    AuditReport,
    AuditSettings,
    analysis_view,
    bh_adjust,
    bonferroni_adjust,
    draw_resamples,
    enumerated_crt,
    enumerated_statistics,
    histogram,
    max_t_adjust,
    p_value,
    resample_statistics,
    run_crt,
    simulate_power,
)
from randaudit.design import ClusterRandomized, CompleteFixedCount, StratifiedFixedCounts
from randaudit.features import DataError, Signal, SyntheticScenario, UnitTable, generate_synthetic
from randaudit.learners import BoostedStumpsSpec, LogisticSpec, make_folds

from conftest import make_units


# -- p-values and multiplicity ----------------------------------------------


def test_p_value_examples():
    nulls = np.array([0.1, 0.2, 0.3])
    assert p_value(0.25, nulls) == 0.5
    assert p_value(nulls.max() + 1, nulls) == 0.25
    assert p_value(nulls.min() - 1, nulls) == 1.0


def test_p_value_ties_count():
    assert p_value(1.0, np.ones(99)) == 1.0


def test_p_value_all_below():
    assert p_value(5.0, np.zeros(99)) == 0.01


def test_p_value_four_exceedances_in_1000():
    nulls = np.r_[np.full(4, 2.0), np.zeros(996)]
    assert p_value(1.0, nulls) == 5 / 1001


def test_max_t_single_model_equals_raw():
    rng = np.random.default_rng(0)
    nulls = rng.standard_normal((50, 1))
    assert max_t_adjust([0.5], nulls)[0] == p_value(0.5, nulls[:, 0])


def test_max_t_duplicate_columns():
    col = np.random.default_rng(1).standard_normal(60)
    adj = max_t_adjust([0.7, 0.7], np.column_stack([col, col]))
    assert list(adj) == [p_value(0.7, col)] * 2


def test_max_t_shape_mismatch():
    with pytest.raises(ValueError):
        max_t_adjust([1.0, 2.0], np.zeros((10, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(19, 80), st.integers(1, 6), st.integers(0, 2**31))
def test_property_max_t_dominates_raw(B, M, seed):
    rng = np.random.default_rng(seed)
    nulls = rng.standard_normal((B, M))
    obs = rng.standard_normal(M) * 2
    raw = np.array([p_value(obs[m], nulls[:, m]) for m in range(M)])
    adj = max_t_adjust(obs, nulls)
    assert np.all(adj >= raw)
    assert np.all(bonferroni_adjust(raw) >= raw)
    # p-values live on the k/(B+1) grid
    assert np.allclose(raw * (B + 1), np.round(raw * (B + 1)))


def test_bonferroni_examples():
    assert list(bonferroni_adjust([0.01, 0.04])) == [0.02, 0.08]
    assert list(bonferroni_adjust([0.7, 0.9])) == [1.0, 1.0]
    assert list(bonferroni_adjust([0.3])) == [0.3]


def test_bh_examples():
    assert np.allclose(bh_adjust([0.01, 0.02, 0.03]), [0.03, 0.03, 0.03])
    assert list(bh_adjust([0.3])) == [0.3]
    # ranks 1..4 give .04, .06, .0533, .5; step-up minima from the top
    assert np.allclose(bh_adjust([0.01, 0.04, 0.03, 0.5]), [0.04, 0.16 / 3, 0.16 / 3, 0.5], atol=1e-12)


# -- resampling -------------------------------------------------------------


def test_resample_seeds_stable():
    units = make_units(10)
    labels, seeds = draw_resamples(CompleteFixedCount(5), units, 30, 42)
    labels2, seeds2 = draw_resamples(CompleteFixedCount(5), units, 30, 42)
    assert np.array_equal(labels, labels2) and seeds == seeds2
    assert len(set(seeds)) == 30


def test_antithetic_closed_and_exact_half():
    units = make_units(12, blocks=["a"] * 6 + ["b"] * 6)
    design = StratifiedFixedCounts({"a": 3, "b": 3})
    labels, _ = draw_resamples(design, units, 200, 3, antithetic=True)
    rows = {r.tobytes() for r in labels}
    assert all((1 - r).astype(np.int8).tobytes() in rows for r in labels)
    assert np.all(labels.mean(axis=0) == 0.5)


def test_antithetic_errors():
    units = make_units(10, blocks=["a"] * 4 + ["b"] * 6)
    with pytest.raises(AuditError, match="'b'"):
        draw_resamples(StratifiedFixedCounts({"a": 2, "b": 2}), units, 20, 0, antithetic=True)
    with pytest.raises(AuditError, match="even"):
        draw_resamples(CompleteFixedCount(5), make_units(10), 21, 0, antithetic=True)


def test_resample_statistics_worker_and_chunk_invariance():
    units = make_units(40, d=3, seed=2)
    labels, _ = draw_resamples(CompleteFixedCount(20), units, 50, 1)
    plan = make_folds(units, 5, 0)
    q = np.full(40, 0.5)
    specs = [LogisticSpec(), BoostedStumpsSpec(rounds=5)]
    a, _ = resample_statistics(units.features, labels, plan, specs, q)
    b, _ = resample_statistics(units.features, labels, plan, specs, q, workers=2, chunk_size=16)
    assert np.array_equal(a, b)


def test_constant_predictor_all_tied():
    units = make_units(30, d=2)
    labels, _ = draw_resamples(CompleteFixedCount(15), units, 40, 0)
    q = np.full(30, 0.5)
    plan = make_folds(units, 5, 0)
    stats, _ = resample_statistics(units.features, labels, plan, [LogisticSpec()], q, fixed_probs=q[None, :])
    assert np.all(stats == 0.0)
    assert p_value(0.0, stats[:, 0]) == 1.0


# -- run_crt ----------------------------------------------------------------


def planted_units(n=60, seed=0):
    base = SyntheticScenario(n, 2, CompleteFixedCount(n // 2), seed=seed)
    cutoff = float(np.median(generate_synthetic(base).features[:, 0]))
    return generate_synthetic(base.replace(signal=Signal("threshold", feature=0, cutoff=cutoff, strength=math.inf)))


def test_run_crt_strong_signal_min_p():
    report = run_crt(planted_units(), CompleteFixedCount(30), [LogisticSpec()], B=99, master_seed=1)
    (m,) = report.models
    assert m.p_raw == 0.01 and m.p_max_t == 0.01
    assert m.observed["statistic"] > max(m.null_statistics)


def test_run_crt_report_contents():
    units = generate_synthetic(SyntheticScenario(40, 3, CompleteFixedCount(20), seed=5))
    specs = [LogisticSpec(), LogisticSpec(l2_penalty=10.0), BoostedStumpsSpec(rounds=10)]
    r = run_crt(units, CompleteFixedCount(20), specs, B=49, master_seed=7)
    assert len(r.models) == 3 and len(r.resample_seeds) == 49
    for m in r.models:
        assert m.p_max_t >= m.p_raw and m.p_bonferroni >= m.p_raw
        assert m.p_raw * 50 == round(m.p_raw * 50)
        assert sum(m.histogram["counts"]) == 49
        assert m.histogram["observed"] == m.observed["statistic"]
        assert len(m.null_statistics) == 49
    assert r.feature_hash and r.engine_version and r.master_seed == 7


def test_run_crt_json_roundtrip_and_determinism():
    units = generate_synthetic(SyntheticScenario(30, 2, CompleteFixedCount(15), seed=2))
    r1 = run_crt(units, CompleteFixedCount(15), [LogisticSpec(), BoostedStumpsSpec(rounds=5)], B=39, master_seed=3)
    r2 = run_crt(units, CompleteFixedCount(15), [LogisticSpec(), BoostedStumpsSpec(rounds=5)], B=39, master_seed=3)
    assert r1.to_json() == r2.to_json()
    assert AuditReport.from_json(r1.to_json()) == r1
    assert AuditReport.from_json(r1.to_json()).to_json() == r1.to_json()


def test_run_crt_workers_identical():
    units = generate_synthetic(SyntheticScenario(30, 2, CompleteFixedCount(15), seed=2))
    r1 = run_crt(units, CompleteFixedCount(15), [LogisticSpec()], B=300, master_seed=3)
    r2 = run_crt(units, CompleteFixedCount(15), [LogisticSpec()], B=300, master_seed=3, workers=2)
    assert r1.to_json() == r2.to_json()


def test_run_crt_validation():
    units = make_units(10)
    with pytest.raises(AuditError, match="treatment"):
        run_crt(units, CompleteFixedCount(5), [LogisticSpec()], B=19)
    units = units.replace(treated=np.arange(10) % 2)
    with pytest.raises(AuditError, match="minimum"):
        run_crt(units, CompleteFixedCount(5), [LogisticSpec()], B=10)
    with pytest.raises(dz.DesignError):
        run_crt(units, CompleteFixedCount(10), [LogisticSpec()], B=19)


def test_run_crt_notes_illegal_observed():
    units = make_units(10).replace(treated=np.r_[np.ones(3), np.zeros(7)].astype(int))
    r = run_crt(units, CompleteFixedCount(5), [LogisticSpec()], B=19, K=2)
    assert any("not a legal draw" in n for n in r.notes)


def test_run_crt_unsafe_flag_recorded():
    units = generate_synthetic(SyntheticScenario(30, 2, CompleteFixedCount(15), seed=1))
    r = run_crt(units, CompleteFixedCount(15), [LogisticSpec()], B=19, unsafe_reuse_observed_model=True)
    assert r.unsafe_reuse_observed_model and any("UNSAFE" in n for n in r.notes)


def test_run_crt_antithetic():
    units = generate_synthetic(SyntheticScenario(20, 2, CompleteFixedCount(10), seed=1))
    r = run_crt(units, CompleteFixedCount(10), [LogisticSpec()], B=40, antithetic=True)
    assert r.antithetic and r.resample_seeds[0] == r.resample_seeds[1]


def test_run_crt_brier():
    units = planted_units()
    r = run_crt(units, CompleteFixedCount(30), [LogisticSpec()], B=19, score="brier")
    assert r.score_kind == "brier" and r.models[0].p_raw == 0.05


def test_cluster_analysis_level():
    s = SyntheticScenario(40, 2, ClusterRandomized(CompleteFixedCount(4)), n_clusters=8, seed=3)
    units = generate_synthetic(s)
    r = run_crt(units, s.design, [LogisticSpec()], B=19, K=4)
    assert r.analysis_level == "cluster" and r.n_rows == 8
    view = analysis_view(units, s.design)
    c0 = [i for i, c in enumerate(units.clusters) if c == view.units.ids[0]]
    assert np.allclose(view.units.features[0], units.features[c0].mean(axis=0))
    r_unit = run_crt(units, s.design, [LogisticSpec()], B=19, analysis_level="unit")
    assert r_unit.n_rows == 40


def test_cluster_mixed_labels_rejected():
    units = make_units(6, clusters=["a", "a", "b", "b", "c", "c"]).replace(treated=[1, 0, 0, 0, 1, 1])
    with pytest.raises(DataError):
        analysis_view(units, ClusterRandomized(CompleteFixedCount(1)))


# -- enumeration oracle -----------------------------------------------------


def test_enumerated_symmetric_degenerate():
    units = UnitTable(ids="abcd", features=np.zeros((4, 1)), treated=[1, 1, 0, 0])
    plan = make_folds(units, 2, 0)
    _, weights, stats = enumerated_statistics(units, CompleteFixedCount(2), LogisticSpec(), plan)
    assert len(stats) == 6 and np.all(stats == stats[0])
    assert math.fsum(weights) == 1.0
    assert enumerated_crt(units, CompleteFixedCount(2), LogisticSpec(), plan) == 1.0


def test_enumerated_argmax_half_design_ties_with_complement():
    # with m = n/2 and q = 1/2 the statistic is invariant to flipping every label,
    # so the top statistic is shared by an assignment and its complement: 2/70
    units = make_units(8, d=1, seed=6)
    plan = make_folds(units, 4, 0)
    design = CompleteFixedCount(4)
    labels, _, stats = enumerated_statistics(units.replace(treated=[1, 1, 1, 1, 0, 0, 0, 0]), design, LogisticSpec(), plan)
    best = labels[int(np.argmax(stats))]
    top = labels[np.isclose(stats, stats.max(), rtol=0, atol=1e-9)]
    assert sorted(map(tuple, top)) == sorted([tuple(best), tuple(1 - best)])
    p = enumerated_crt(units.replace(treated=best), design, LogisticSpec(), plan)
    assert p == pytest.approx(np.sum(stats >= stats[int(np.argmax(stats))]) / 70, abs=1e-15)
    assert p in (pytest.approx(1 / 70), pytest.approx(2 / 70))


def test_enumerated_unique_argmax_exact_tail():
    units = make_units(8, d=1, seed=6)
    plan = make_folds(units, 4, 0)
    design = CompleteFixedCount(3)
    labels, _, stats = enumerated_statistics(units.replace(treated=[1, 1, 1, 0, 0, 0, 0, 0]), design, LogisticSpec(), plan)
    assert len(stats) == 56 and np.sum(stats == stats.max()) == 1
    best = labels[int(np.argmax(stats))]
    assert enumerated_crt(units.replace(treated=best), design, LogisticSpec(), plan) == pytest.approx(1 / 56, abs=1e-15)


def test_enumerated_too_large():
    units = make_units(20).replace(treated=np.arange(20) % 2)
    with pytest.raises(dz.EnumerationTooLarge):
        enumerated_crt(units, CompleteFixedCount(10), LogisticSpec(), make_folds(units, 5, 0), cap=1000)


# -- reports and power ------------------------------------------------------


def test_histogram_counts():
    nulls = np.random.default_rng(0).standard_normal(500)
    h = histogram(nulls, 1.5)
    assert sum(h["counts"]) == 500 and h["observed"] == 1.5
    assert len(h["edges"]) == len(h["counts"]) + 1 <= 201


def test_power_requires_replications():
    s = SyntheticScenario(20, 2, CompleteFixedCount(10))
    with pytest.raises(ValueError):
        simulate_power(s, AuditSettings(specs=(LogisticSpec(),), B=19), replications=19)


def test_power_all_tied_rate_zero():
    # n=4, K=2: every training fold has < 2 of a class, so predictions fall back to q and T = 0
    s = SyntheticScenario(4, 1, CompleteFixedCount(2))
    curve = simulate_power(s, AuditSettings(specs=(LogisticSpec(),), B=19, K=2), effect_sizes=(0.0,), replications=20)
    (pt,) = curve.points
    assert pt.rejection_rate == 0.0 and pt.mc_se == 0.0 and set(pt.p_values) == {1.0}


def test_settings_roundtrip():
    s = AuditSettings(specs=(LogisticSpec(), BoostedStumpsSpec(rounds=3)), B=99, antithetic=True)
    assert AuditSettings.from_dict(s.to_dict()) == s
