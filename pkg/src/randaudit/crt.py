"""Conditional randomization test: resample, refit, rescore."""

from __future__ import annotations

import dataclasses
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from randaudit import __version__
from randaudit import design as dz
from randaudit._rng import derive_seed
from randaudit.features import DataError, UnitTable, feature_hash, generate_synthetic, standardize_features
from randaudit.learners import (
    CrossFitInfo,
    FoldPlan,
    LearnerSpec,
    check_specs,
    cross_fit_batch,
    learner_from_dict,
    learner_label,
    learner_to_dict,
    make_folds,
)
from randaudit.scoring import DEFAULT_EPS, SCORE_KINDS, batch_statistics, informative_mask, score_improvement

REPORT_SCHEMA_VERSION = 1
MIN_RESAMPLES = 19
CHUNK_SIZE = 256
MULTIPLICITY_RULES = ("max-t", "bonferroni", "bh", "none")
MAX_HISTOGRAM_BINS = 200


class AuditError(ValueError):
    pass


# -- p-values and multiplicity ----------------------------------------------


def p_value(observed: float, nulls) -> float:
    """``(1 + #{T_b >= T}) / (B + 1)``; ties count against the observed value."""
    nulls = np.asarray(nulls, dtype=float).ravel()
    if nulls.size == 0:
        raise ValueError("need at least one null statistic")
    return (1 + int(np.count_nonzero(nulls >= observed))) / (nulls.size + 1)


def max_t_adjust(observed, nulls) -> np.ndarray:
    """Single-step Westfall-Young adjustment against the per-resample maximum over models."""
    observed = np.atleast_1d(np.asarray(observed, dtype=float))
    nulls = np.asarray(nulls, dtype=float)
    if nulls.ndim == 1:
        nulls = nulls[:, None]
    if nulls.shape[1] != observed.size:
        raise ValueError(f"{nulls.shape[1]} null columns for {observed.size} observed statistics")
    top = nulls.max(axis=1)
    return np.array([p_value(t, top) for t in observed])


def bonferroni_adjust(raw) -> np.ndarray:
    raw = np.atleast_1d(np.asarray(raw, dtype=float))
    return np.minimum(1.0, raw * raw.size)


def bh_adjust(raw) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted values (monotone, capped at 1)."""
    raw = np.atleast_1d(np.asarray(raw, dtype=float))
    m = raw.size
    order = np.argsort(raw, kind="stable")
    scaled = raw[order] * m / np.arange(1, m + 1)
    stepped = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(stepped, 1.0)
    return out


def adjust(rule: str, observed, nulls, raw) -> np.ndarray:
    if rule == "max-t":
        return max_t_adjust(observed, nulls)
    if rule == "bonferroni":
        return bonferroni_adjust(raw)
    if rule == "bh":
        return bh_adjust(raw)
    if rule == "none":
        return np.asarray(raw, dtype=float)
    raise ValueError(f"unknown multiplicity rule {rule!r}")


# -- analysis view ----------------------------------------------------------


@dataclass(frozen=True)
class AnalysisView:
    """Rows the statistic is computed on, with the design that randomizes them."""

    units: UnitTable
    design: dz.Design
    level: str
    unit_rows: np.ndarray | None = None  # analysis row of each original unit (cluster level)


def analysis_view(units: UnitTable, design: dz.Design, level: str = "cluster") -> AnalysisView:
    """Cluster designs analysed at cluster level get one row per cluster (mean features)."""
    if level not in ("cluster", "unit"):
        raise ValueError(f"analysis level must be 'cluster' or 'unit', got {level!r}")
    if not isinstance(design, dz.ClusterRandomized) or level == "unit":
        return AnalysisView(units, design, "unit")
    ids, unit_cluster, cluster_block, problems = dz.cluster_structure(units)
    if problems:
        raise dz.DesignError(problems)
    k = len(ids)
    counts = np.bincount(unit_cluster, minlength=k)
    x = np.zeros((k, units.d))
    np.add.at(x, unit_cluster, units.features)
    x /= counts[:, None]

    def per_cluster(values, name):
        if values is None:
            return None
        total = np.bincount(unit_cluster, weights=values, minlength=k)
        mixed = [ids[j] for j in np.flatnonzero((total != 0) & (total != counts))]
        if mixed:
            raise DataError([f"cluster {c!r} has mixed {name} labels" for c in mixed])
        return (total > 0).astype(np.int8)

    table = UnitTable(
        ids=ids,
        features=x,
        feature_names=units.feature_names,
        blocks=cluster_block,
        treated=per_cluster(units.treated, "treated"),
        transform=units.transform,
    )
    return AnalysisView(table, design.inner, "cluster", unit_cluster)


# -- resampling -------------------------------------------------------------


def draw_resamples(design: dz.Design, units: UnitTable, B: int, master_seed: int, antithetic: bool = False):
    """``B`` assignment vectors and the seed behind each.

    Resample ``b`` (1-based) uses seed ``derive_seed(master_seed, "resample", b)``.
    With ``antithetic`` the seeds are drawn per pair ``j`` and resample
    ``2j`` is the complement of resample ``2j - 1``.
    """
    dz.check_design(design, units)
    labels = np.empty((B, units.n), dtype=np.int8)
    seeds = []
    if antithetic:
        bad = dz.antithetic_violations(design, units)
        if bad:
            raise AuditError("antithetic coupling not applicable: " + "; ".join(bad))
        if B % 2:
            raise AuditError(f"antithetic coupling needs an even number of resamples, got B={B}")
        for j in range(B // 2):
            seed = derive_seed(master_seed, "pair", j + 1)
            a = dz.draw_values(design, units, seed, checked=False)
            labels[2 * j] = a
            labels[2 * j + 1] = 1 - a
            seeds += [seed, seed]
    else:
        for b in range(B):
            seed = derive_seed(master_seed, "resample", b + 1)
            labels[b] = dz.draw_values(design, units, seed, checked=False)
            seeds.append(seed)
    return labels, seeds


def _chunk_statistics(X, labels, plan, specs, q, kind, eps, fixed_probs=None):
    stats = np.empty((labels.shape[0], len(specs)))
    infos = []
    for m, spec in enumerate(specs):
        if fixed_probs is not None:
            probs = np.broadcast_to(fixed_probs[m], labels.shape)
            info = CrossFitInfo()
        else:
            probs, info = cross_fit_batch(X, labels, plan, spec, q)
        stats[:, m] = batch_statistics(labels, probs, q, kind, eps)
        infos.append(info)
    return stats, infos


def resample_statistics(X, labels, plan, specs, q, kind="log", eps=DEFAULT_EPS, workers=1, fixed_probs=None, chunk_size=CHUNK_SIZE):
    """Statistics (``B x M``) for every resampled label vector.

    Work is cut into fixed chunks of ``chunk_size`` rows; results are identical
    for any ``workers``.
    """
    chunks = [labels[i : i + chunk_size] for i in range(0, labels.shape[0], chunk_size)]
    args = (plan, specs, q, kind, eps, fixed_probs)
    if workers > 1 and len(chunks) > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=workers)(delayed(_chunk_statistics)(X, c, *args) for c in chunks)
    else:
        results = [_chunk_statistics(X, c, *args) for c in chunks]
    stats = np.concatenate([r[0] for r in results], axis=0)
    infos = [CrossFitInfo() for _ in specs]
    for _, chunk_infos in results:
        for total, part in zip(infos, chunk_infos):
            total.add(part)
    return stats, infos


# -- reports ----------------------------------------------------------------


def histogram(nulls, observed: float) -> dict:
    """Freedman-Diaconis bins of the null sample, with the observed value marked."""
    nulls = np.asarray(nulls, dtype=float)
    edges = np.histogram_bin_edges(nulls, bins="fd")
    if edges.size - 1 > MAX_HISTOGRAM_BINS:
        edges = np.histogram_bin_edges(nulls, bins=MAX_HISTOGRAM_BINS)
    counts, edges = np.histogram(nulls, bins=edges)
    return {"rule": "freedman-diaconis", "edges": edges.tolist(), "counts": counts.tolist(), "observed": float(observed)}


def null_summary(nulls) -> dict:
    nulls = np.asarray(nulls, dtype=float)
    sd = float(nulls.std(ddof=1)) if nulls.size > 1 else 0.0
    return {
        "mean": float(nulls.mean()),
        "sd": sd,
        "mc_se_mean": sd / math.sqrt(nulls.size),
        "min": float(nulls.min()),
        "q05": float(np.quantile(nulls, 0.05)),
        "median": float(np.median(nulls)),
        "q95": float(np.quantile(nulls, 0.95)),
        "max": float(nulls.max()),
    }


@dataclass
class ModelResult:
    model_id: str
    learner: dict
    observed: dict
    p_raw: float
    p_max_t: float
    p_bonferroni: float
    p_bh: float
    null_statistics: list
    null_summary: dict
    histogram: dict
    fits: dict

    def adjusted(self, rule: str) -> float:
        return {"max-t": self.p_max_t, "bonferroni": self.p_bonferroni, "bh": self.p_bh, "none": self.p_raw}[rule]


@dataclass
class AuditReport:
    """Everything needed to interpret and rerun one audit.

    ``elapsed_seconds`` is kept out of the serialized form so reruns produce
    byte-identical JSON.
    """

    kind: str
    engine_version: str
    design: dict
    analysis_level: str
    n_rows: int
    folds: dict
    B: int
    master_seed: int
    antithetic: bool
    score_kind: str
    epsilon: float
    multiplicity: str
    alpha: float
    resample_seeds: list
    models: list
    feature_hash: str
    unsafe_reuse_observed_model: bool = False
    config_hash: str | None = None
    overrides: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION
    elapsed_seconds: float = field(default=0.0, compare=False, repr=False)

    def headline_p(self) -> list[float]:
        return [m.adjusted(self.multiplicity) for m in self.models]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        del out["elapsed_seconds"]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AuditReport":
        doc = dict(doc)
        doc["models"] = [ModelResult(**m) for m in doc["models"]]
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "AuditReport":
        return cls.from_dict(json.loads(text))


def _observed_dict(result) -> dict:
    return {
        "statistic": result.statistic,
        "model_score": result.model_score,
        "baseline_score": result.baseline_score,
        "per_fold": list(result.per_fold),
        "scored_units": result.scored_units,
    }


# -- the test ---------------------------------------------------------------


def run_crt(
    units: UnitTable,
    design: dz.Design,
    specs: Sequence[LearnerSpec],
    plan: FoldPlan | None = None,
    B: int = 1000,
    master_seed: int = 0,
    *,
    antithetic: bool = False,
    score: str = "log",
    eps: float = DEFAULT_EPS,
    analysis_level: str = "cluster",
    multiplicity: str = "max-t",
    alpha: float = 0.05,
    K: int = 5,
    fold_seed: int = 0,
    stratify: bool = True,
    workers: int = 1,
    unsafe_reuse_observed_model: bool = False,
    provenance: Mapping | None = None,
) -> AuditReport:
    """Audit the observed assignment in ``units.treated`` against ``design``.

    Every learner is refit under the same fold plan for the observed labels
    and for each of ``B`` fresh draws from the design. Raw p-values use
    :func:`p_value`; max-T, Bonferroni and BH adjustments are all reported and
    ``multiplicity`` picks the headline one. ``plan`` must be bound to the
    analysis rows (clusters, for cluster designs analysed at cluster level);
    when omitted it is built from ``K``, ``fold_seed`` and ``stratify``.
    ``unsafe_reuse_observed_model`` scores the observed-label fits against
    each resample instead of refitting; the report flags it, and the p-values
    lose their finite-sample guarantee.
    """
    started = time.perf_counter()
    specs = check_specs(specs)
    if units.treated is None:
        raise AuditError("units carry no observed treatment labels")
    if B < MIN_RESAMPLES:
        raise AuditError(f"B={B} is below the minimum of {MIN_RESAMPLES}")
    if score not in SCORE_KINDS:
        raise AuditError(f"unknown score kind {score!r}")
    if multiplicity not in MULTIPLICITY_RULES:
        raise AuditError(f"unknown multiplicity rule {multiplicity!r}")
    dz.check_design(design, units)
    notes = []
    observed_violations = dz.satisfies(design, units, units.treated)
    if observed_violations:
        notes.append("observed assignment is not a legal draw from the design: " + "; ".join(observed_violations))
    view = analysis_view(units, design, analysis_level)
    rows, rdesign = view.units, view.design
    if view.level == "cluster":
        notes.append(f"cluster design analysed at cluster level: {rows.n} rows, unweighted cluster-mean features")
    if plan is None:
        plan = make_folds(rows, K, fold_seed, stratify)
    if plan.n != rows.n:
        raise AuditError(f"fold plan covers {plan.n} rows but the analysis has {rows.n}")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", dz.DegenerateBaselineWarning)
        q = dz.baseline_probabilities(rdesign, rows)
    n_degenerate = int((~informative_mask(q)).sum())
    if n_degenerate:
        notes.append(f"{n_degenerate} row(s) with baseline probability 0 or 1 excluded from scoring")

    X = rows.features
    observed = rows.treated.astype(np.int8)
    obs_stats, obs_probs, obs_infos = [], [], []
    for spec in specs:
        probs, info = cross_fit_batch(X, observed[None, :], plan, spec, q)
        obs_probs.append(probs[0])
        obs_infos.append(info)
        obs_stats.append(score_improvement(observed, probs[0], q, score, eps, folds=plan.assignment))

    labels, seeds = draw_resamples(rdesign, rows, B, master_seed, antithetic)
    fixed = np.stack(obs_probs) if unsafe_reuse_observed_model else None
    if unsafe_reuse_observed_model:
        notes.append("UNSAFE: observed-label models reused for every resample; p-values are not design-valid")
    nulls, infos = resample_statistics(X, labels, plan, specs, q, score, eps, workers, fixed)

    t_obs = np.array([s.statistic for s in obs_stats])
    raw = np.array([p_value(t_obs[m], nulls[:, m]) for m in range(len(specs))])
    p_max = max_t_adjust(t_obs, nulls)
    p_bonf = bonferroni_adjust(raw)
    p_bh = bh_adjust(raw)
    models = []
    for m, spec in enumerate(specs):
        models.append(
            ModelResult(
                model_id=learner_label(spec, m),
                learner=learner_to_dict(spec),
                observed=_observed_dict(obs_stats[m]),
                p_raw=float(raw[m]),
                p_max_t=float(p_max[m]),
                p_bonferroni=float(p_bonf[m]),
                p_bh=float(p_bh[m]),
                null_statistics=nulls[:, m].tolist(),
                null_summary=null_summary(nulls[:, m]),
                histogram=histogram(nulls[:, m], t_obs[m]),
                fits={
                    "observed_fallback_folds": obs_infos[m].fallback_folds,
                    "observed_nonconverged_fits": obs_infos[m].nonconverged_fits,
                    "null_fallback_folds": infos[m].fallback_folds,
                    "null_nonconverged_fits": infos[m].nonconverged_fits,
                },
            )
        )
    return AuditReport(
        kind="randomization audit (design-based)",
        engine_version=__version__,
        design=dz.design_to_dict(design),
        analysis_level=view.level,
        n_rows=rows.n,
        folds=plan.to_dict(),
        B=B,
        master_seed=master_seed,
        antithetic=antithetic,
        score_kind=score,
        epsilon=eps,
        multiplicity=multiplicity,
        alpha=alpha,
        resample_seeds=seeds,
        models=models,
        feature_hash=feature_hash(X),
        unsafe_reuse_observed_model=unsafe_reuse_observed_model,
        provenance=dict(provenance or {}),
        notes=notes,
        elapsed_seconds=time.perf_counter() - started,
    )


# -- exhaustive oracle ------------------------------------------------------


def enumerated_statistics(units: UnitTable, design: dz.Design, spec: LearnerSpec, plan: FoldPlan, cap: int = 10_000, score: str = "log", eps: float = DEFAULT_EPS):
    """Statistic and probability of every legal assignment (no cluster aggregation)."""
    vectors = dz.enumerate_assignments(design, units, cap)
    labels = np.stack([v.values for v in vectors])
    weights = np.array([dz.assignment_probability(design, units, v) for v in vectors])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", dz.DegenerateBaselineWarning)
        q = dz.baseline_probabilities(design, units)
    stats, _ = resample_statistics(units.features, labels, plan, [spec], q, score, eps)
    return labels, weights, stats[:, 0]


def enumerated_crt(units: UnitTable, design: dz.Design, spec: LearnerSpec, plan: FoldPlan, cap: int = 10_000, score: str = "log", eps: float = DEFAULT_EPS) -> float:
    """Exact ``Pr_{A ~ design}(T(A) >= T(A_obs))`` by enumerating every legal assignment."""
    if units.treated is None:
        raise AuditError("units carry no observed treatment labels")
    labels, weights, stats = enumerated_statistics(units, design, spec, plan, cap, score, eps)
    match = np.flatnonzero((labels == units.treated).all(axis=1))
    if match.size:
        t_obs = stats[match[0]]
    else:
        q = dz.baseline_probabilities(design, units)
        probs, _ = cross_fit_batch(units.features, units.treated[None, :], plan, spec, q)
        t_obs = batch_statistics(units.treated[None, :], probs, q, score, eps)[0]
    return float(math.fsum(weights[stats >= t_obs]))


# -- power ------------------------------------------------------------------


@dataclass(frozen=True)
class AuditSettings:
    """The analysis choices of an audit, separated from data and seeds."""

    specs: tuple
    B: int = 1000
    K: int = 5
    fold_seed: int = 0
    stratify: bool = True
    antithetic: bool = False
    score: str = "log"
    eps: float = DEFAULT_EPS
    analysis_level: str = "cluster"
    multiplicity: str = "max-t"
    standardize: bool = True

    def run(self, units: UnitTable, design: dz.Design, master_seed: int, workers: int = 1, **kw) -> AuditReport:
        if self.standardize:
            units = standardize_features(units)
        return run_crt(
            units,
            design,
            self.specs,
            None,
            self.B,
            master_seed,
            antithetic=self.antithetic,
            score=self.score,
            eps=self.eps,
            analysis_level=self.analysis_level,
            multiplicity=self.multiplicity,
            K=self.K,
            fold_seed=self.fold_seed,
            stratify=self.stratify,
            workers=workers,
            **kw,
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["specs"] = [learner_to_dict(s) for s in self.specs]
        return out

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AuditSettings":
        doc = dict(doc)
        doc["specs"] = tuple(learner_from_dict(s) for s in doc["specs"])
        return cls(**doc)


@dataclass
class PowerPoint:
    effect: float
    rejection_rate: float
    mc_se: float
    replications: int
    p_values: list
    null_means: list
    null_mean_ses: list


@dataclass
class PowerCurve:
    alpha: float
    points: list

    def rows(self) -> list[tuple[float, float, float, int]]:
        return [(p.effect, p.rejection_rate, p.mc_se, p.replications) for p in self.points]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _power_replicate(scenario, settings: AuditSettings, effect_index: int, effect: float, r: int):
    seed = derive_seed(scenario.seed, "power", effect_index, r)
    scen = dataclasses.replace(scenario, signal=scenario.signal.scaled(effect), seed=seed)
    units = generate_synthetic(scen)
    report = settings.run(units, scen.design, derive_seed(seed, "crt"))
    if len(report.models) == 1:
        p = report.models[0].p_raw
    else:
        p = min(report.headline_p())
    summary = report.models[0].null_summary
    return p, summary["mean"], summary["mc_se_mean"]


def simulate_power(
    scenario,
    settings: AuditSettings,
    effect_sizes: Sequence[float] = (0.0, 1.0),
    replications: int = 100,
    alpha: float = 0.05,
    workers: int = 1,
) -> PowerCurve:
    """Rejection rate of the audit on synthetic scenarios at each effect size.

    Effect sizes multiply the scenario's signal strength (0 is a placebo).
    A replication rejects when its p-value is at most ``alpha``: the raw p for
    one learner, the smallest adjusted p under ``settings.multiplicity`` for
    several. Standard errors are binomial.
    """
    if replications < 20:
        raise ValueError(f"replications={replications}: need at least 20")
    tasks = [(i, e, r) for i, e in enumerate(effect_sizes) for r in range(replications)]
    if workers > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=workers)(delayed(_power_replicate)(scenario, settings, i, e, r) for i, e, r in tasks)
    else:
        results = [_power_replicate(scenario, settings, i, e, r) for i, e, r in tasks]
    points = []
    for i, e in enumerate(effect_sizes):
        block = results[i * replications : (i + 1) * replications]
        ps = [b[0] for b in block]
        rate = float(np.mean(np.asarray(ps) <= alpha))
        points.append(
            PowerPoint(
                effect=float(e),
                rejection_rate=rate,
                mc_se=math.sqrt(rate * (1 - rate) / replications),
                replications=replications,
                p_values=ps,
                null_means=[b[1] for b in block],
                null_mean_ses=[b[2] for b in block],
            )
        )
    return PowerCurve(alpha, points)
