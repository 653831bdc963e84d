"""Unit tables: ingestion, validation, standardization and synthetic data."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logit

from randaudit import design as dz
from randaudit._rng import derive_seed, make_rng


class DataError(ValueError):
    """Problems found while ingesting a unit table; ``problems`` lists each with its location."""

    def __init__(self, problems: Sequence[str] | str):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


def _binary(a, name: str) -> np.ndarray:
    out = _frozen(a, np.int8)
    if not np.isin(out, (0, 1)).all():
        raise DataError(f"{name} labels must be 0/1")
    return out


@dataclass(frozen=True, eq=False)
class UnitTable:
    """Immutable table of units, their pre-treatment features and optional labels.

    ``responses`` maps variable names to 0/1 response indicators. Absent labels
    are ``None``; they are never imputed.
    """

    ids: tuple[str, ...]
    features: np.ndarray
    feature_names: tuple[str, ...] = ()
    blocks: tuple[str, ...] | None = None
    clusters: tuple[str, ...] | None = None
    locations: np.ndarray | None = None
    treated: np.ndarray | None = None
    selected: np.ndarray | None = None
    responses: Mapping[str, np.ndarray] | None = None
    transform: Mapping | None = field(default=None)

    def __post_init__(self):
        set_ = lambda name, value: object.__setattr__(self, name, value)  # noqa: E731
        ids = tuple(str(i) for i in self.ids)
        set_("ids", ids)
        n = len(ids)
        if len(set(ids)) != n:
            seen, dup = set(), []
            for i in ids:
                if i in seen:
                    dup.append(i)
                seen.add(i)
            raise DataError([f"duplicate unit id {i!r}" for i in dict.fromkeys(dup)])
        x = np.array(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != n:
            raise DataError(f"features must be an (n, d) array with n={n}, got shape {x.shape}")
        if not np.isfinite(x).all():
            rows, cols = np.nonzero(~np.isfinite(x))
            raise DataError([f"non-finite feature at row {r}, column {c}" for r, c in zip(rows, cols)])
        x.setflags(write=False)
        set_("features", x)
        names = tuple(self.feature_names) or tuple(f"f{j}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError(f"{len(names)} feature names for {x.shape[1]} columns")
        set_("feature_names", names)
        for name in ("blocks", "clusters"):
            value = getattr(self, name)
            if value is not None:
                value = tuple(str(v) for v in value)
                if len(value) != n:
                    raise DataError(f"{name} has length {len(value)} != n={n}")
                set_(name, value)
        if self.locations is not None:
            loc = _frozen(self.locations, np.float64)
            if loc.shape != (n, 2):
                raise DataError(f"locations must have shape ({n}, 2)")
            set_("locations", loc)
        for name in ("treated", "selected"):
            value = getattr(self, name)
            if value is not None:
                value = _binary(value, name)
                if value.shape != (n,):
                    raise DataError(f"{name} has length {value.size} != n={n}")
                set_(name, value)
        if self.responses is not None:
            resp = {}
            for k, v in self.responses.items():
                v = _binary(v, f"response {k!r}")
                if v.shape != (n,):
                    raise DataError(f"response {k!r} has length {v.size} != n={n}")
                resp[str(k)] = v
            set_("responses", resp)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def replace(self, **changes) -> "UnitTable":
        return dataclasses.replace(self, **changes)

    def feature_hash(self) -> str:
        return feature_hash(self.features)


def feature_hash(features: np.ndarray) -> str:
    """SHA-256 over the shape and little-endian float64 bytes of the feature block."""
    x = np.ascontiguousarray(features, dtype="<f8")
    h = hashlib.sha256()
    h.update(f"{x.shape[0]}x{x.shape[1]}:".encode())
    h.update(x.tobytes())
    return h.hexdigest()


# -- ingestion --------------------------------------------------------------


@dataclass(frozen=True)
class ColumnMapping:
    """Binds CSV columns to roles. ``features`` may be omitted if ``feature_prefix`` is set."""

    id: str = "id"
    features: tuple[str, ...] = ()
    feature_prefix: str | None = None
    block: str | None = None
    cluster: str | None = None
    treated: str | None = None
    selected: str | None = None
    responses: tuple[str, ...] = ()
    lat: str | None = None
    lon: str | None = None

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ColumnMapping":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown column-mapping keys: {sorted(unknown)}")
        kw = dict(doc)
        for key in ("features", "responses"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["features"] = list(self.features)
        out["responses"] = list(self.responses)
        return {k: v for k, v in out.items() if v not in (None, [])}


def _parse_label(text: str, line: int, column: str, problems: list[str]) -> int:
    if text.strip() in ("0", "1"):
        return int(text)
    problems.append(f"line {line}, column {column!r}: expected 0 or 1, got {text!r}")
    return 0


def load_units(path: str | Path, mapping: ColumnMapping | Mapping | None = None) -> UnitTable:
    """Read a comma-separated unit table and validate it.

    Raises :class:`DataError` listing every malformed cell (by file line and
    column), duplicate ids, and missing or non-finite feature values.
    """
    if mapping is None:
        mapping = ColumnMapping()
    elif not isinstance(mapping, ColumnMapping):
        mapping = ColumnMapping.from_dict(mapping)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = list(reader)
    if header is None:
        raise DataError(f"{path}: no header row")
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    col = {name: j for j, name in enumerate(header)}

    feature_cols = list(mapping.features)
    if not feature_cols and mapping.feature_prefix:
        feature_cols = [h for h in header if h.startswith(mapping.feature_prefix)]
    if not feature_cols:
        raise DataError(f"{path}: column mapping binds no feature columns")
    wanted = {"id": mapping.id}
    for role in ("block", "cluster", "treated", "selected", "lat", "lon"):
        if getattr(mapping, role):
            wanted[role] = getattr(mapping, role)
    missing = [f"{role} -> {name!r}" for role, name in wanted.items() if name not in col]
    missing += [f"feature -> {name!r}" for name in feature_cols if name not in col]
    missing += [f"response -> {name!r}" for name in mapping.responses if name not in col]
    if missing:
        raise DataError(f"{path}: column mapping refers to absent columns: " + ", ".join(missing))

    problems: list[str] = []
    n, d = len(rows), len(feature_cols)
    x = np.empty((n, d))
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            problems.append(f"line {line}: {len(row)} fields, header has {len(header)}")
            continue
        for j, name in enumerate(feature_cols):
            text = row[col[name]].strip()
            try:
                value = float(text)
            except ValueError:
                value = math.nan
                problems.append(f"line {line}, column {name!r}: not a number: {text!r}")
            else:
                if not math.isfinite(value):
                    problems.append(f"line {line}, column {name!r}: non-finite value {text!r}")
            x[i, j] = value
    if problems:
        raise DataError(problems)

    def column(name):
        return [row[col[name]].strip() for row in rows]

    def labels(name):
        vals = [_parse_label(t, i + 2, name, problems) for i, t in enumerate(column(name))]
        return np.array(vals, dtype=np.int8)

    ids = column(mapping.id)
    empty_ids = [i + 2 for i, v in enumerate(ids) if not v]
    problems += [f"line {line}: empty unit id" for line in empty_ids]
    kw: dict = {}
    if mapping.block:
        kw["blocks"] = column(mapping.block)
    if mapping.cluster:
        kw["clusters"] = column(mapping.cluster)
    if mapping.treated:
        kw["treated"] = labels(mapping.treated)
    if mapping.selected:
        kw["selected"] = labels(mapping.selected)
    if mapping.responses:
        kw["responses"] = {name: labels(name) for name in mapping.responses}
    if mapping.lat and mapping.lon:
        try:
            kw["locations"] = np.column_stack([[float(v) for v in column(mapping.lat)], [float(v) for v in column(mapping.lon)]])
        except ValueError as exc:
            problems.append(f"location columns: {exc}")
    if problems:
        raise DataError(problems)
    return UnitTable(ids=ids, features=x, feature_names=tuple(feature_cols), **kw)


def write_units(units: UnitTable, path: str | Path, *, provenance: str = "", diagnostics: Mapping | None = None) -> ColumnMapping:
    """Write ``units`` as CSV plus a ``<path>.json`` sidecar; return the mapping that reloads it."""
    path = Path(path)
    header = ["id"]
    mapping = {"id": "id", "features": list(units.feature_names)}
    if units.blocks is not None:
        header.append("block")
        mapping["block"] = "block"
    if units.clusters is not None:
        header.append("cluster")
        mapping["cluster"] = "cluster"
    if units.locations is not None:
        header += ["lat", "lon"]
        mapping.update(lat="lat", lon="lon")
    header += list(units.feature_names)
    if units.treated is not None:
        header.append("treated")
        mapping["treated"] = "treated"
    if units.selected is not None:
        header.append("selected")
        mapping["selected"] = "selected"
    if units.responses:
        header += list(units.responses)
        mapping["responses"] = list(units.responses)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(units.n):
            row = [units.ids[i]]
            if units.blocks is not None:
                row.append(units.blocks[i])
            if units.clusters is not None:
                row.append(units.clusters[i])
            if units.locations is not None:
                row += [repr(float(v)) for v in units.locations[i]]
            row += [repr(float(v)) for v in units.features[i]]
            if units.treated is not None:
                row.append(int(units.treated[i]))
            if units.selected is not None:
                row.append(int(units.selected[i]))
            if units.responses:
                row += [int(v[i]) for v in units.responses.values()]
            w.writerow(row)
    sidecar = {
        "n": units.n,
        "d": units.d,
        "feature_names": list(units.feature_names),
        "feature_hash": units.feature_hash(),
        "columns": mapping,
        "provenance": provenance,
        "diagnostics": dict(diagnostics or {}),
    }
    if units.transform is not None:
        sidecar["transform"] = units.transform
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ColumnMapping.from_dict(mapping)


def ingestion_diagnostics(units: UnitTable) -> dict:
    out = {"n": units.n, "d": units.d, "feature_hash": units.feature_hash()}
    for name in ("treated", "selected"):
        v = getattr(units, name)
        if v is not None:
            out[f"{name}_count"] = int(v.sum())
    if units.blocks is not None:
        out["blocks"] = len(set(units.blocks))
    if units.clusters is not None:
        out["clusters"] = len(set(units.clusters))
    if units.responses:
        out["response_rates"] = {k: float(v.mean()) for k, v in units.responses.items()}
    return out


# -- standardization --------------------------------------------------------


def standardize_features(units: UnitTable) -> UnitTable:
    """Center and scale every feature column (population SD) on the full table.

    Constant columns become 0 and are listed under
    ``transform["constant_columns"]``. The transform depends on features only,
    so it is identical for every resample of the labels.
    """
    if units.n < 2:
        raise DataError("standardization needs at least 2 units")
    x = units.features
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    constant = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    z = np.where(constant, 0.0, (x - mean) / np.where(constant, 1.0, sd))
    transform = {
        "kind": "standardize",
        "mean": mean.tolist(),
        "sd": sd.tolist(),
        "constant_columns": [units.feature_names[j] for j in np.flatnonzero(constant)],
    }
    return units.replace(features=z, transform=transform)


# -- synthetic scenarios ----------------------------------------------------


class InfeasibleScenario(ValueError):
    pass


SIGNAL_KINDS = ("none", "linear", "threshold", "cluster-boundary")


@dataclass(frozen=True)
class Signal:
    """How treatment depends on features in a synthetic scenario.

    ``strength`` scales the signal: linear logits are ``strength * coefficients·φ``,
    threshold logits ``strength * (φ[feature] - cutoff)``, and cluster-boundary
    logits ``±strength`` by latent group. ``math.inf`` makes assignment
    deterministic wherever the design allows it.
    """

    kind: str = "none"
    coefficients: tuple[float, ...] = ()
    feature: int = 0
    cutoff: float = 0.0
    groups: int = 2
    strength: float = 1.0

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise ValueError(f"unknown signal kind {self.kind!r}")
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))

    def scaled(self, effect: float) -> "Signal":
        return dataclasses.replace(self, strength=self.strength * effect)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["coefficients"] = list(self.coefficients)
        return out


@dataclass(frozen=True)
class SyntheticScenario:
    n: int
    d: int
    design: dz.Design
    signal: Signal = Signal()
    noise_scale: float = 1.0
    spatial_scale: float = 0.0
    bumps: int = 5
    n_blocks: int = 0
    n_clusters: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("scenario needs n >= 4")
        if self.d < 1:
            raise ValueError("scenario needs d >= 1")
        if len(self.signal.coefficients) > self.d:
            raise ValueError("more signal coefficients than features")
        if self.signal.kind == "threshold" and not 0 <= self.signal.feature < self.d:
            raise ValueError("threshold feature index out of range")
        if self.signal.kind == "cluster-boundary" and self.signal.groups < 2:
            raise ValueError("cluster-boundary needs at least 2 groups")

    def replace(self, **changes) -> "SyntheticScenario":
        return dataclasses.replace(self, **changes)


def _spatial_field(rng: np.random.Generator, locations: np.ndarray, d: int, bumps: int, bandwidth: float = 0.2) -> np.ndarray:
    centers = rng.uniform(0.0, 1.0, size=(bumps, 2))
    amplitudes = rng.standard_normal((bumps, d))
    dist2 = ((locations[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-dist2 / (2 * bandwidth**2)) @ amplitudes


def conditional_bernoulli(logits: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw independent Bernoulli(expit(logits)) conditioned on exactly ``count`` ones.

    This is the law that rejection sampling would produce, computed exactly by
    a backward recursion over log elementary symmetric sums. Infinite logits
    force the unit in or out.
    """
    logits = np.asarray(logits, dtype=float)
    out = np.zeros(logits.size, dtype=np.int8)
    forced_in = logits == np.inf
    forced_out = logits == -np.inf
    out[forced_in] = 1
    free = np.flatnonzero(~forced_in & ~forced_out)
    need = count - int(forced_in.sum())
    if need < 0 or need > free.size:
        raise InfeasibleScenario(
            f"cannot place {count} treated units: {int(forced_in.sum())} forced in, {free.size} free"
        )
    if need == 0:
        return out
    w = logits[free]
    k = free.size
    # log_e[i, r]: log of the sum over r-subsets of units i..k-1 of exp(sum of logits)
    log_e = np.full((k + 1, need + 1), -np.inf)
    log_e[k, 0] = 0.0
    for i in range(k - 1, -1, -1):
        log_e[i, 0] = 0.0
        log_e[i, 1:] = np.logaddexp(log_e[i + 1, 1:], w[i] + log_e[i + 1, :-1])
    u = rng.random(k)
    r = need
    for i in range(k):
        if r == 0:
            break
        p_take = math.exp(w[i] + log_e[i + 1, r - 1] - log_e[i, r])
        if u[i] < p_take:
            out[free[i]] = 1
            r -= 1
    return out


def _draw_with_logits(design: dz.Design, units: UnitTable, eta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if isinstance(design, dz.ClusterRandomized):
        _, unit_cluster, _, _ = dz.cluster_structure(units)
        k = int(unit_cluster.max()) + 1
        eta_c = np.bincount(unit_cluster, weights=eta, minlength=k) / np.bincount(unit_cluster, minlength=k)
        view = dz._ClusterView(units)
        return _draw_with_logits(design.inner, view, eta_c, rng)[unit_cluster]
    if isinstance(design, dz.Bernoulli):
        p = expit(logit(design.rate) + eta)
        return (rng.random(units.n) < p).astype(np.int8)
    if isinstance(design, dz.CompleteFixedCount):
        return conditional_bernoulli(eta, design.m, rng)
    if isinstance(design, dz.StratifiedFixedCounts):
        a = np.zeros(units.n, dtype=np.int8)
        for b, idx in dz._block_index(units.blocks).items():
            a[idx] = conditional_bernoulli(eta[idx], design.per_block[b], rng)
        return a
    raise TypeError(f"not a design: {design!r}")


def _expected_treated(design: dz.Design, units) -> float:
    return float(np.sum(dz.baseline_probabilities(design, units)))


def _signal_logits(scenario: SyntheticScenario, units: UnitTable, rng: np.random.Generator) -> np.ndarray:
    sig, x = scenario.signal, units.features
    s = sig.strength
    if sig.kind == "linear":
        c = np.asarray(sig.coefficients)
        lin = x[:, : c.size] @ c
        if math.isinf(s):
            return np.where(lin > 0, np.inf, np.where(lin < 0, -np.inf, 0.0))
        return s * lin
    if sig.kind == "threshold":
        gap = x[:, sig.feature] - sig.cutoff
        if math.isinf(s):
            return np.where(gap > 0, np.inf, np.where(gap < 0, -np.inf, 0.0))
        return s * gap
    # cluster-boundary: equal-size bands along a random direction in feature space
    direction = rng.standard_normal(scenario.d)
    score = x @ direction
    order = np.argsort(score, kind="stable")[::-1]
    groups = np.array_split(order, sig.groups)
    remaining = round(_expected_treated(scenario.design, units))
    eta = np.full(units.n, -s)
    for g in groups:
        if g.size <= remaining:
            eta[g] = s
            remaining -= g.size
        elif remaining > 0:
            eta[g] = 0.0
            remaining = 0
    return eta


def generate_synthetic(scenario: SyntheticScenario) -> UnitTable:
    """Synthetic unit table with an assignment drawn according to ``scenario``.

    With signal ``none`` the assignment is an exact draw from the design (a
    placebo); otherwise per-unit logits from the signal tilt the draw, which is
    conditioned to honour every fixed count in the design.
    """
    rng = make_rng(derive_seed(scenario.seed, "features"))
    n, d = scenario.n, scenario.d
    locations = rng.uniform(0.0, 1.0, size=(n, 2))
    x = scenario.noise_scale * rng.standard_normal((n, d))
    if scenario.spatial_scale:
        x = x + scenario.spatial_scale * _spatial_field(rng, locations, d, scenario.bumps)
    width = len(str(n - 1))
    kw = {}
    if scenario.n_blocks:
        kw["blocks"] = [f"b{i % scenario.n_blocks}" for i in range(n)]
    if scenario.n_clusters:
        kw["clusters"] = [f"c{i % scenario.n_clusters}" for i in range(n)]
    units = UnitTable(
        ids=[f"u{i:0{width}d}" for i in range(n)],
        features=x,
        locations=locations,
        feature_names=tuple(f"f{j}" for j in range(d)),
        **kw,
    )
    violations = dz.validate_design(scenario.design, units)
    if violations:
        raise InfeasibleScenario("; ".join(violations))
    if scenario.signal.kind == "none":
        a = dz.draw_values(scenario.design, units, derive_seed(scenario.seed, "assignment"))
    else:
        arng = make_rng(derive_seed(scenario.seed, "assignment"))
        eta = _signal_logits(scenario, units, arng)
        a = _draw_with_logits(scenario.design, units, eta, arng)
    return units.replace(treated=a)


def synthetic_indicators(features: np.ndarray, coefficients: Sequence[float], base_rate: float, seed: int) -> np.ndarray:
    """Bernoulli indicators with logit ``logit(base_rate) + coefficients·φ`` (e.g. planted missingness)."""
    c = np.asarray(coefficients, dtype=float)
    eta = logit(base_rate) + np.asarray(features)[:, : c.size] @ c
    return (make_rng(seed).random(len(eta)) < expit(eta)).astype(np.int8)


def scenario_from_dict(doc: Mapping) -> SyntheticScenario:
    doc = dict(doc)
    signal = Signal(**{**doc.pop("signal", {})})
    design = dz.design_from_dict(doc.pop("design"))
    return SyntheticScenario(design=design, signal=signal, **doc)


def scenario_to_dict(scenario: SyntheticScenario) -> dict:
    out = dataclasses.asdict(scenario)
    out["design"] = dz.design_to_dict(scenario.design)
    out["signal"] = scenario.signal.to_dict()
    return out
