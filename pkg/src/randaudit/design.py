"""Registered randomization mechanisms.

A design is a small frozen dataclass; the module-level functions bind it to a
:class:`~randaudit.features.UnitTable` (only ``n``, ``blocks`` and ``clusters``
are consulted) to validate, draw, enumerate and compute marginal probabilities.

JSON form (schema version 1)::

    {"variant": "complete",   "m": 26}
    {"variant": "bernoulli",  "rate": 0.5}
    {"variant": "stratified", "per_block": {"B1": 2, "B2": 3}}
    {"variant": "cluster",    "inner": {...any non-cluster design...}}

Each may carry an optional ``"label"``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING, Iterator, Mapping, Sequence, Union

import numpy as np

from randaudit._rng import make_rng

if TYPE_CHECKING:
    from randaudit.features import UnitTable

DESIGN_SCHEMA_VERSION = 1


class DesignError(ValueError):
    """A design does not bind to the unit table it was used with."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class EnumerationTooLarge(ValueError):
    def __init__(self, count: int, cap: int):
        self.count = count
        self.cap = cap
        super().__init__(f"design has {count} assignments, more than cap {cap}")


class DegenerateBaselineWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Bernoulli:
    rate: float
    label: str = ""


@dataclass(frozen=True)
class CompleteFixedCount:
    m: int
    label: str = ""


@dataclass(frozen=True)
class StratifiedFixedCounts:
    per_block: Mapping[str, int]
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "per_block", dict(sorted(self.per_block.items())))

    def __hash__(self):
        return hash((tuple(self.per_block.items()), self.label))


@dataclass(frozen=True)
class ClusterRandomized:
    inner: "Design"
    label: str = ""


Design = Union[Bernoulli, CompleteFixedCount, StratifiedFixedCounts, ClusterRandomized]


@dataclass(frozen=True)
class AssignmentVector:
    values: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int8)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, AssignmentVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


# -- JSON -------------------------------------------------------------------


def design_from_dict(doc: Mapping) -> Design:
    variant = doc.get("variant")
    label = doc.get("label", "")
    if variant == "bernoulli":
        return Bernoulli(float(doc["rate"]), label)
    if variant == "complete":
        return CompleteFixedCount(int(doc["m"]), label)
    if variant == "stratified":
        return StratifiedFixedCounts({str(k): int(v) for k, v in doc["per_block"].items()}, label)
    if variant == "cluster":
        inner = design_from_dict(doc["inner"])
        if isinstance(inner, ClusterRandomized):
            raise ValueError("nested cluster designs are not supported")
        return ClusterRandomized(inner, label)
    raise ValueError(f"unknown design variant {variant!r}")


def design_to_dict(design: Design) -> dict:
    if isinstance(design, Bernoulli):
        out = {"variant": "bernoulli", "rate": design.rate}
    elif isinstance(design, CompleteFixedCount):
        out = {"variant": "complete", "m": design.m}
    elif isinstance(design, StratifiedFixedCounts):
        out = {"variant": "stratified", "per_block": dict(design.per_block)}
    elif isinstance(design, ClusterRandomized):
        out = {"variant": "cluster", "inner": design_to_dict(design.inner)}
    else:
        raise TypeError(f"not a design: {design!r}")
    if design.label:
        out["label"] = design.label
    return out


# -- binding helpers --------------------------------------------------------


def cluster_structure(units) -> tuple[list[str], np.ndarray, list[str] | None, list[str]]:
    """Distinct sorted cluster ids, per-unit cluster index, per-cluster block, problems."""
    problems = []
    if units.clusters is None:
        return [], np.zeros(0, dtype=np.intp), None, ["units carry no cluster ids"]
    ids = sorted(set(units.clusters))
    index = {c: k for k, c in enumerate(ids)}
    unit_cluster = np.array([index[c] for c in units.clusters], dtype=np.intp)
    cluster_block = None
    if units.blocks is not None:
        seen: dict[str, str] = {}
        for c, b in zip(units.clusters, units.blocks):
            if seen.setdefault(c, b) != b:
                problems.append(f"cluster {c!r} spans blocks {seen[c]!r} and {b!r}")
        cluster_block = [seen[c] for c in ids]
    return ids, unit_cluster, cluster_block, problems


def _cluster_binding(units) -> tuple["_ClusterView", np.ndarray, list[str]]:
    _, unit_cluster, _, problems = cluster_structure(units)
    return _ClusterView(units), unit_cluster, problems


def _block_index(blocks: Sequence[str]) -> dict[str, np.ndarray]:
    groups: dict[str, list[int]] = {}
    for i, b in enumerate(blocks):
        groups.setdefault(b, []).append(i)
    return {b: np.array(groups[b], dtype=np.intp) for b in sorted(groups)}


# -- validation -------------------------------------------------------------


def _violations(design: Design, bind) -> list[str]:
    out = []
    n = bind.n
    if isinstance(design, Bernoulli):
        if not 0.0 < design.rate < 1.0:
            out.append(f"rate {design.rate} not in (0, 1)")
    elif isinstance(design, CompleteFixedCount):
        if design.m >= n:
            out.append(f"m ≥ n (m={design.m}, n={n})")
        if design.m <= 0:
            out.append(f"m ≤ 0 (m={design.m})")
    elif isinstance(design, StratifiedFixedCounts):
        if bind.blocks is None:
            return ["stratified design but units carry no block ids"]
        sizes = {b: len(idx) for b, idx in _block_index(bind.blocks).items()}
        for b in sizes:
            if b not in design.per_block:
                out.append(f"block {b!r} has no treated count")
        for b, mb in design.per_block.items():
            if b not in sizes:
                out.append(f"block {b!r} not present in unit table")
            elif not 0 <= mb <= sizes[b]:
                out.append(f"block {b!r}: m_b={mb} outside [0, {sizes[b]}]")
        if not any(0 < design.per_block.get(b, 0) < nb for b, nb in sizes.items()):
            out.append("no block has 0 < m_b < n_b")
    elif isinstance(design, ClusterRandomized):
        raise AssertionError("cluster designs are validated via their inner design")
    else:
        out.append(f"unknown design type {type(design).__name__}")
    return out


def validate_design(design: Design, units: "UnitTable") -> list[str]:
    """Every violated invariant of ``design`` against ``units``; empty means ok."""
    if isinstance(design, ClusterRandomized):
        if units.clusters is None:
            return ["cluster design but units carry no cluster ids"]
        if isinstance(design.inner, ClusterRandomized):
            return ["nested cluster designs are not supported"]
        inner, _, problems = _cluster_binding(units)
        return problems + _violations(design.inner, inner)
    return _violations(design, units)


def check_design(design: Design, units: "UnitTable") -> None:
    violations = validate_design(design, units)
    if violations:
        raise DesignError(violations)


def satisfies(design: Design, units: "UnitTable", values) -> list[str]:
    """Constraint violations of a concrete assignment vector (empty = satisfied)."""
    a = np.asarray(values)
    if a.shape != (units.n,):
        return [f"length {a.size} != n={units.n}"]
    if not np.isin(a, (0, 1)).all():
        return ["labels not in {0, 1}"]
    if isinstance(design, ClusterRandomized):
        _, unit_cluster, _ = _cluster_binding(units)
        k = int(unit_cluster.max()) + 1
        treated = np.zeros(k, dtype=np.int64)
        count = np.bincount(unit_cluster, minlength=k)
        np.add.at(treated, unit_cluster, a)
        bad = np.flatnonzero((treated != 0) & (treated != count))
        if bad.size:
            ids, *_ = cluster_structure(units)
            return [f"cluster {ids[j]!r} is split between arms" for j in bad]
        return satisfies(design.inner, _ClusterView(units), (treated > 0).astype(np.int8))
    if isinstance(design, CompleteFixedCount) and int(a.sum()) != design.m:
        return [f"treated count {int(a.sum())} != m={design.m}"]
    if isinstance(design, StratifiedFixedCounts):
        out = []
        for b, idx in _block_index(units.blocks).items():
            got = int(a[idx].sum())
            if got != design.per_block.get(b):
                out.append(f"block {b!r}: treated {got} != m_b={design.per_block.get(b)}")
        return out
    return []


class _ClusterView:
    """Minimal unit-table stand-in with one row per cluster."""

    def __init__(self, units):
        ids, _, cluster_block, _ = cluster_structure(units)
        self.n = len(ids)
        self.ids = tuple(ids)
        self.blocks = tuple(cluster_block) if cluster_block is not None else None
        self.clusters = None


# -- drawing ----------------------------------------------------------------


def _draw(design: Design, bind, rng: np.random.Generator) -> np.ndarray:
    n = bind.n
    a = np.zeros(n, dtype=np.int8)
    if isinstance(design, Bernoulli):
        a[rng.random(n) < design.rate] = 1
    elif isinstance(design, CompleteFixedCount):
        a[rng.permutation(n)[: design.m]] = 1
    elif isinstance(design, StratifiedFixedCounts):
        for b, idx in _block_index(bind.blocks).items():
            chosen = rng.permutation(idx.size)[: design.per_block[b]]
            a[idx[chosen]] = 1
    else:
        raise TypeError(f"cannot draw from {design!r}")
    return a


def draw_assignment(design: Design, units: "UnitTable", seed: int) -> AssignmentVector:
    """One assignment from ``design``; deterministic in ``(design, units, seed)``."""
    return AssignmentVector(draw_values(design, units, seed), seed)


def draw_values(design: Design, units: "UnitTable", seed: int, *, checked: bool = True) -> np.ndarray:
    if checked:
        check_design(design, units)
    rng = make_rng(seed)
    if isinstance(design, ClusterRandomized):
        inner, unit_cluster, _ = _cluster_binding(units)
        return _draw(design.inner, inner, rng)[unit_cluster]
    return _draw(design, units, rng)


# -- baseline probabilities -------------------------------------------------


def _baseline(design: Design, bind) -> list[Fraction]:
    n = bind.n
    if isinstance(design, Bernoulli):
        return [Fraction(design.rate)] * n
    if isinstance(design, CompleteFixedCount):
        return [Fraction(design.m, n)] * n
    if isinstance(design, StratifiedFixedCounts):
        q = [Fraction(0)] * n
        for b, idx in _block_index(bind.blocks).items():
            for i in idx:
                q[i] = Fraction(design.per_block[b], idx.size)
        return q
    raise TypeError(f"no baseline for {design!r}")


def baseline_probabilities(design: Design, units: "UnitTable", *, exact: bool = False):
    """Marginal treatment probability of every unit under ``design``.

    Units with probability exactly 0 or 1 trigger a
    :class:`DegenerateBaselineWarning`; the scoring functions drop them.
    With ``exact=True`` a list of :class:`fractions.Fraction` is returned.
    """
    check_design(design, units)
    if isinstance(design, ClusterRandomized):
        inner, unit_cluster, _ = _cluster_binding(units)
        per_cluster = _baseline(design.inner, inner)
        q = [per_cluster[j] for j in unit_cluster]
    else:
        q = _baseline(design, units)
    n_degenerate = sum(1 for x in q if x in (0, 1))
    if n_degenerate:
        warnings.warn(
            f"{n_degenerate} unit(s) have baseline probability 0 or 1 and carry no information",
            DegenerateBaselineWarning,
            stacklevel=2,
        )
    if exact:
        return q
    return np.array([float(x) for x in q])


# -- antithetic coupling ----------------------------------------------------


def antithetic_violations(design: Design, units: "UnitTable") -> list[str]:
    """Reasons the complement map fails to preserve ``design`` (empty = applicable)."""
    if isinstance(design, ClusterRandomized):
        return antithetic_violations(design.inner, _ClusterView(units))
    if isinstance(design, Bernoulli):
        return [] if design.rate == 0.5 else [f"Bernoulli rate {design.rate} != 0.5"]
    if isinstance(design, CompleteFixedCount):
        return [] if 2 * design.m == units.n else [f"m={design.m} != n - m={units.n - design.m}"]
    if isinstance(design, StratifiedFixedCounts):
        return [
            f"block {b!r}: m_b={design.per_block[b]} != n_b - m_b={idx.size - design.per_block[b]}"
            for b, idx in _block_index(units.blocks).items()
            if 2 * design.per_block[b] != idx.size
        ]
    raise TypeError(f"not a design: {design!r}")


def antithetic_complement(design: Design, units: "UnitTable", a) -> AssignmentVector | None:
    """Blockwise complement ``1 - a`` if it is again a legal draw, else ``None``."""
    if antithetic_violations(design, units):
        return None
    values = a.values if isinstance(a, AssignmentVector) else np.asarray(a)
    return AssignmentVector(1 - values, getattr(a, "seed", None))


# -- enumeration ------------------------------------------------------------


def assignment_count(design: Design, units: "UnitTable") -> int:
    if isinstance(design, ClusterRandomized):
        return assignment_count(design.inner, _ClusterView(units))
    if isinstance(design, Bernoulli):
        return 2**units.n
    if isinstance(design, CompleteFixedCount):
        return math.comb(units.n, design.m)
    if isinstance(design, StratifiedFixedCounts):
        return math.prod(math.comb(idx.size, design.per_block[b]) for b, idx in _block_index(units.blocks).items())
    raise TypeError(f"not a design: {design!r}")


def _enumerate(design: Design, bind) -> Iterator[np.ndarray]:
    n = bind.n
    if isinstance(design, Bernoulli):
        for bits in itertools.product((0, 1), repeat=n):
            yield np.array(bits, dtype=np.int8)
    elif isinstance(design, CompleteFixedCount):
        for chosen in itertools.combinations(range(n), design.m):
            a = np.zeros(n, dtype=np.int8)
            a[list(chosen)] = 1
            yield a
    elif isinstance(design, StratifiedFixedCounts):
        per_block = [
            list(itertools.combinations(idx.tolist(), design.per_block[b]))
            for b, idx in _block_index(bind.blocks).items()
        ]
        for combo in itertools.product(*per_block):
            a = np.zeros(n, dtype=np.int8)
            for chosen in combo:
                a[list(chosen)] = 1
            yield a


def enumerate_assignments(design: Design, units: "UnitTable", cap: int) -> list[AssignmentVector]:
    """All assignments with positive probability, or raise :class:`EnumerationTooLarge`."""
    check_design(design, units)
    count = assignment_count(design, units)
    if count > cap:
        raise EnumerationTooLarge(count, cap)
    if isinstance(design, ClusterRandomized):
        inner, unit_cluster, _ = _cluster_binding(units)
        return [AssignmentVector(a[unit_cluster]) for a in _enumerate(design.inner, inner)]
    return [AssignmentVector(a) for a in _enumerate(design, units)]


def assignment_probability(design: Design, units: "UnitTable", a) -> float:
    """Probability of the specific vector ``a`` under ``design`` (0 if illegal)."""
    values = a.values if isinstance(a, AssignmentVector) else np.asarray(a)
    if satisfies(design, units, values):
        return 0.0
    if isinstance(design, ClusterRandomized):
        _, unit_cluster, _ = _cluster_binding(units)
        k = int(unit_cluster.max()) + 1
        per_cluster = np.zeros(k, dtype=np.int8)
        per_cluster[unit_cluster] = values
        return assignment_probability(design.inner, _ClusterView(units), per_cluster)
    if isinstance(design, Bernoulli):
        t = int(values.sum())
        return design.rate**t * (1 - design.rate) ** (units.n - t)
    return 1.0 / assignment_count(design, units)
