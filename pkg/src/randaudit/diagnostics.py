"""Selection and missingness diagnostics, and inverse-probability weights.

There is no registered mechanism for enrollment or response, so the
reference distributions here come from permuting (default) or redrawing the
observed indicators. Every report is labelled as descriptive.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from randaudit import __version__
from randaudit._rng import derive_seed, make_rng
from randaudit.crt import MIN_RESAMPLES, histogram, max_t_adjust, null_summary, p_value, resample_statistics
from randaudit.features import DataError, UnitTable, feature_hash
from randaudit.learners import FoldPlan, LearnerSpec, cross_fit_batch, learner_to_dict
from randaudit.scoring import DEFAULT_EPS, score_improvement

DESCRIPTIVE_LABEL = "descriptive diagnostic (no registered mechanism)"
DEFAULT_WEIGHT_FLOOR = 0.01


@dataclass(frozen=True)
class SelectionFrame:
    """Enrolled units (S=1) stacked with frame units (S=0)."""

    units: UnitTable
    description: str = ""

    def __post_init__(self):
        s = self.units.selected
        if s is None:
            raise DataError("selection frame has no enrollment indicator")
        if s.min() == s.max():
            which = "enrolled" if s.min() == 0 else "frame (non-enrolled)"
            raise DataError(f"selection frame has no {which} units")

    @classmethod
    def from_tables(cls, enrolled: UnitTable, frame: UnitTable, description: str = "") -> "SelectionFrame":
        if enrolled.feature_names != frame.feature_names:
            raise DataError("enrolled and frame tables have different feature columns")
        both = UnitTable(
            ids=enrolled.ids + frame.ids,
            features=np.vstack([enrolled.features, frame.features]),
            feature_names=enrolled.feature_names,
            selected=np.r_[np.ones(enrolled.n, np.int8), np.zeros(frame.n, np.int8)],
        )
        return cls(both, description)


@dataclass(frozen=True, eq=False)
class ResponseMatrix:
    names: tuple[str, ...]
    indicators: np.ndarray

    def __post_init__(self):
        r = np.array(self.indicators, dtype=np.int8)
        if r.ndim != 2 or r.shape[1] != len(self.names):
            raise DataError(f"response matrix shape {r.shape} does not match {len(self.names)} names")
        if len(set(self.names)) != len(self.names):
            raise DataError("response variable names must be unique")
        if not np.isin(r, (0, 1)).all():
            raise DataError("response indicators must be 0/1")
        r.setflags(write=False)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "indicators", r)

    @property
    def rates(self) -> np.ndarray:
        return self.indicators.mean(axis=0)

    def column(self, name: str) -> np.ndarray:
        return self.indicators[:, self.names.index(name)]

    @classmethod
    def from_units(cls, units: UnitTable) -> "ResponseMatrix":
        if not units.responses:
            raise DataError("units carry no response indicators")
        names = tuple(units.responses)
        return cls(names, np.column_stack([units.responses[k] for k in names]))


@dataclass
class VariableResult:
    name: str
    rate: float
    observed: dict
    p_raw: float
    p_adjusted: float
    null_statistics: list
    null_summary: dict
    histogram: dict


@dataclass
class DiagnosticReport:
    kind: str
    label: str
    description: str
    reference: str
    B: int
    seed: int
    learner: dict
    folds: dict
    feature_hash: str
    variables: list
    skipped: list = field(default_factory=list)
    predictions: dict = field(default_factory=dict)
    engine_version: str = __version__
    score_kind: str = "log"
    epsilon: float = DEFAULT_EPS

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DiagnosticReport":
        doc = dict(doc)
        doc["variables"] = [VariableResult(**v) for v in doc["variables"]]
        return cls(**doc)


def _reference_labels(observed: np.ndarray, B: int, seed: int, redraw: bool) -> np.ndarray:
    """``(B, n, J)`` resampled indicator matrices; one shared permutation per resample."""
    n = observed.shape[0]
    out = np.empty((B, *observed.shape), dtype=np.int8)
    rates = observed.mean(axis=0)
    for b in range(B):
        rng = make_rng(derive_seed(seed, "reference", b + 1))
        if redraw:
            out[b] = rng.random(observed.shape) < rates
        else:
            out[b] = observed[rng.permutation(n)]
    return out


def _audit_columns(
    X, observed: np.ndarray, names: Sequence[str], spec, plan, B, seed, redraw, kind, score, eps, description, workers
) -> DiagnosticReport:
    if B < MIN_RESAMPLES:
        raise ValueError(f"B={B} is below the minimum of {MIN_RESAMPLES}")
    if plan.n != observed.shape[0]:
        raise ValueError(f"fold plan covers {plan.n} units but the table has {observed.shape[0]}")
    reference = _reference_labels(observed, B, seed, redraw)
    variables, t_obs, nulls, predictions = [], [], [], {}
    for j, name in enumerate(names):
        y = observed[:, j]
        rate = float(y.mean())
        q = np.full(y.size, rate)
        probs, _ = cross_fit_batch(X, y[None, :], plan, spec, q)
        predictions[name] = probs[0].tolist()
        obs = score_improvement(y, probs[0], q, score, eps, folds=plan.assignment)
        stats, _ = resample_statistics(X, reference[:, :, j], plan, [spec], q, score, eps, workers)
        t_obs.append(obs.statistic)
        nulls.append(stats[:, 0])
        variables.append(
            VariableResult(
                name=name,
                rate=rate,
                observed={
                    "statistic": obs.statistic,
                    "model_score": obs.model_score,
                    "baseline_score": obs.baseline_score,
                    "per_fold": list(obs.per_fold),
                },
                p_raw=p_value(obs.statistic, stats[:, 0]),
                p_adjusted=float("nan"),
                null_statistics=stats[:, 0].tolist(),
                null_summary=null_summary(stats[:, 0]),
                histogram=histogram(stats[:, 0], obs.statistic),
            )
        )
    if variables:
        adjusted = max_t_adjust(np.array(t_obs), np.column_stack(nulls))
        for v, p in zip(variables, adjusted):
            v.p_adjusted = float(p)
    return DiagnosticReport(
        kind=kind,
        label=DESCRIPTIVE_LABEL,
        description=description,
        reference="bernoulli redraw at the observed rate" if redraw else "uniform permutation (rate-preserving)",
        B=B,
        seed=seed,
        learner=learner_to_dict(spec),
        folds=plan.to_dict(),
        feature_hash=feature_hash(X),
        variables=variables,
        predictions=predictions,
        score_kind=score,
        epsilon=eps,
    )


def selection_audit(
    frame: SelectionFrame,
    spec: LearnerSpec,
    plan: FoldPlan,
    B: int,
    seed: int,
    *,
    redraw: bool = False,
    score: str = "log",
    eps: float = DEFAULT_EPS,
    workers: int = 1,
) -> DiagnosticReport:
    """Is enrollment predictable from features, relative to the marginal enrollment rate?"""
    s = frame.units.selected[:, None]
    return _audit_columns(
        frame.units.features, s, ["selected"], spec, plan, B, seed, redraw, "selection", score, eps, frame.description, workers
    )


def missingness_audit(
    units: UnitTable,
    responses: ResponseMatrix,
    spec: LearnerSpec,
    plan: FoldPlan,
    B: int,
    seed: int,
    *,
    redraw: bool = False,
    score: str = "log",
    eps: float = DEFAULT_EPS,
    workers: int = 1,
) -> DiagnosticReport:
    """Per-variable response predictability, max-T adjusted across variables.

    Columns that are entirely observed or entirely missing are skipped and
    listed in ``skipped``.
    """
    if responses.indicators.shape[0] != units.n:
        raise DataError(f"response matrix has {responses.indicators.shape[0]} rows for {units.n} units")
    keep, skipped = [], []
    for j, name in enumerate(responses.names):
        r = responses.indicators[:, j]
        if r.min() == r.max():
            skipped.append(f"{name}: {'always observed' if r.min() == 1 else 'never observed'}; skipped")
        else:
            keep.append(j)
    names = [responses.names[j] for j in keep]
    report = _audit_columns(
        units.features, responses.indicators[:, keep], names, spec, plan, B, seed, redraw, "missingness", score, eps, "", workers
    )
    report.skipped = skipped
    return report


@dataclass(frozen=True, eq=False)
class WeightTable:
    names: tuple[str, ...]
    weights: np.ndarray
    floor: float

    def to_csv(self, path: str | Path, ids: Sequence[str]) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["# rho_floor", repr(self.floor)])
            w.writerow(["id", *self.names])
            for i, uid in enumerate(ids):
                w.writerow([uid, *(repr(float(v)) for v in self.weights[i])])

    def to_dict(self) -> dict:
        return {"names": list(self.names), "floor": self.floor, "weights": self.weights.tolist()}


def ipw_weights(responses: ResponseMatrix, rho_hat, floor: float = DEFAULT_WEIGHT_FLOOR) -> WeightTable:
    """``w_ij = R_ij / max(rho_ij, floor)``; missing entries get weight 0.

    ``rho_hat`` is an ``(n, J)`` array or a mapping from variable name to a
    length-``n`` vector of response probabilities.
    """
    if not 0 < floor < 1:
        raise ValueError(f"floor must be in (0, 1), got {floor}")
    if isinstance(rho_hat, Mapping) and not responses.names:
        rho = np.zeros(responses.indicators.shape)
    elif isinstance(rho_hat, Mapping):
        try:
            rho = np.column_stack([np.asarray(rho_hat[k], dtype=float) for k in responses.names])
        except KeyError as exc:
            raise ValueError(f"no response probabilities for {exc.args[0]!r}") from None
    else:
        rho = np.asarray(rho_hat, dtype=float)
        if rho.ndim == 1:
            rho = rho[:, None]
    R = responses.indicators
    if rho.shape != R.shape:
        raise ValueError(f"rho_hat shape {rho.shape} does not match responses {R.shape}")
    w = np.where(R == 1, 1.0 / np.maximum(rho, floor), 0.0)
    return WeightTable(responses.names, w, floor)
