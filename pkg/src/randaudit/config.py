"""One JSON file per audit: design, learners, resampling, data mapping and provenance.

Relative paths are resolved against the config file's directory. The config
hash is taken over the canonical JSON of the file as written, so command-line
overrides (recorded separately) do not change it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from randaudit import design as dz
from randaudit.crt import MIN_RESAMPLES, MULTIPLICITY_RULES, AuditSettings
from randaudit.features import ColumnMapping, DataError, scenario_from_dict
from randaudit.learners import learner_from_dict
from randaudit.scoring import DEFAULT_EPS, SCORE_KINDS

TOP_LEVEL_KEYS = {
    "design", "learners", "folds", "resampling", "score", "epsilon", "multiplicity", "alpha",
    "analysis_level", "standardize", "data", "frame", "output", "provenance", "auxiliary", "power", "workers",
}

CHECKLIST_ROWS = (
    "Design",
    "Pre-treatment window",
    "Embedding set",
    "Evaluation",
    "Resampling",
    "Multiplicity",
    "Outputs",
    "Auxiliary audits",
    "Ethics & transparency",
)
REQUIRED_ROWS = ("Design", "Embedding set", "Evaluation", "Resampling", "Multiplicity", "Outputs")
MISSING = "MISSING"


class ConfigError(ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(doc: Mapping) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def read_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


# -- checklist --------------------------------------------------------------


def _get(doc, *keys):
    for k in keys:
        if not isinstance(doc, Mapping) or k not in doc:
            return None
        doc = doc[k]
    return doc


def checklist(doc: Mapping) -> list[tuple[str, str]]:
    """Each preregistration row with the config value bound to it, or ``MISSING``."""
    rows = {}
    rows["Design"] = canonical_json(doc["design"]) if doc.get("design") else None
    rows["Pre-treatment window"] = _get(doc, "provenance", "pre_treatment_window")

    columns = _get(doc, "data", "columns") or {}
    feats = columns.get("features") or (f"prefix {columns['feature_prefix']!r}" if columns.get("feature_prefix") else None)
    if isinstance(feats, list):
        feats = f"{len(feats)} columns: " + ", ".join(feats)
    embedding = _get(doc, "provenance", "embedding")
    if feats or embedding:
        rows["Embedding set"] = "; ".join(str(v) for v in (embedding, feats) if v)
    elif doc.get("power"):
        rows["Embedding set"] = "synthetic scenario features"
    else:
        rows["Embedding set"] = None

    learners = doc.get("learners") or []
    K = _get(doc, "folds", "K")
    if learners and K:
        kinds = ", ".join(str(s.get("kind")) for s in learners if isinstance(s, Mapping))
        rows["Evaluation"] = f"{len(learners)} learner(s) [{kinds}], K={K}, score={doc.get('score', 'log')}"
    else:
        rows["Evaluation"] = None

    B = _get(doc, "resampling", "B")
    seed = _get(doc, "resampling", "master_seed")
    rows["Resampling"] = f"B={B}, master_seed={seed}, antithetic={bool(_get(doc, 'resampling', 'antithetic'))}" if B and seed is not None else None

    rule = doc.get("multiplicity")
    if rule:
        rows["Multiplicity"] = f"{rule}, alpha={doc.get('alpha', 0.05)}"
    elif len(learners) == 1:
        rows["Multiplicity"] = f"single model, alpha={doc.get('alpha', 0.05)}"
    else:
        rows["Multiplicity"] = None
    rows["Outputs"] = _get(doc, "output", "dir")

    aux = doc.get("auxiliary")
    if aux:
        parts = [k for k in ("selection", "missingness") if aux.get(k)]
        rows["Auxiliary audits"] = ", ".join(parts) or "none planned"
    else:
        rows["Auxiliary audits"] = None
    rows["Ethics & transparency"] = _get(doc, "provenance", "ethics")
    return [(name, MISSING if rows[name] in (None, "") else str(rows[name])) for name in CHECKLIST_ROWS]


def missing_required(rows) -> list[str]:
    return [name for name, value in rows if value == MISSING and name in REQUIRED_ROWS]


def format_checklist(rows) -> str:
    width = max(len(name) for name, _ in rows)
    lines = []
    for name, value in rows:
        flag = " (required)" if value == MISSING and name in REQUIRED_ROWS else ""
        lines.append(f"  {name:<{width}}  {value}{flag}")
    return "\n".join(lines)


# -- parsed config ----------------------------------------------------------


@dataclass
class DataSource:
    path: Path
    columns: ColumnMapping
    description: str = ""


@dataclass
class AuditConfig:
    design: dz.Design
    specs: tuple
    K: int = 5
    fold_seed: int = 0
    stratify: bool = True
    B: int = 1000
    master_seed: int = 0
    antithetic: bool = False
    score: str = "log"
    eps: float = DEFAULT_EPS
    multiplicity: str = "max-t"
    alpha: float = 0.05
    analysis_level: str = "cluster"
    standardize: bool = True
    data: DataSource | None = None
    frame: DataSource | None = None
    out_dir: Path | None = None
    provenance: dict = field(default_factory=dict)
    auxiliary: dict = field(default_factory=dict)
    power: dict | None = None
    workers: int = 1
    raw: dict = field(default_factory=dict)
    hash: str = ""
    overrides: dict = field(default_factory=dict)

    def settings(self) -> AuditSettings:
        return AuditSettings(
            specs=self.specs,
            B=self.B,
            K=self.K,
            fold_seed=self.fold_seed,
            stratify=self.stratify,
            antithetic=self.antithetic,
            score=self.score,
            eps=self.eps,
            analysis_level=self.analysis_level,
            multiplicity=self.multiplicity,
            standardize=self.standardize,
        )


def _source(doc, base: Path, where: str, problems: list[str]) -> DataSource | None:
    if doc is None:
        return None
    if not isinstance(doc, Mapping) or "path" not in doc:
        problems.append(f"{where}: needs a 'path'")
        return None
    try:
        columns = ColumnMapping.from_dict(doc.get("columns", {}))
    except (DataError, TypeError) as exc:
        problems.append(f"{where}.columns: {exc}")
        return None
    return DataSource(base / doc["path"], columns, str(doc.get("description", "")))


def parse_config(doc: Mapping, base_dir: str | Path = ".", overrides: Mapping | None = None) -> AuditConfig:
    """Validate ``doc`` and apply overrides (``data``, ``frame``, ``out``, ``seed``, ``workers``)."""
    base = Path(base_dir)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    problems = []
    unknown = set(doc) - TOP_LEVEL_KEYS
    if unknown:
        problems.append(f"unknown config keys: {sorted(unknown)}")

    design = None
    if "design" not in doc:
        problems.append("config has no 'design'")
    else:
        try:
            design = dz.design_from_dict(doc["design"])
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"design: {exc}")

    specs = []
    learners = doc.get("learners")
    if not learners:
        problems.append("config needs at least one entry in 'learners'")
    else:
        for i, s in enumerate(learners):
            try:
                specs.append(learner_from_dict(s))
            except (TypeError, ValueError) as exc:
                problems.append(f"learners[{i}]: {exc}")

    folds = doc.get("folds", {})
    resampling = doc.get("resampling", {})
    B = int(resampling.get("B", 1000))
    if B < MIN_RESAMPLES:
        problems.append(f"resampling.B={B} is below the minimum of {MIN_RESAMPLES}")
    score = doc.get("score", "log")
    if score not in SCORE_KINDS:
        problems.append(f"score must be one of {SCORE_KINDS}, got {score!r}")
    rule = doc.get("multiplicity") or ("none" if len(specs) == 1 else None)
    if rule is None:
        problems.append("multiplicity rule is required when more than one learner is declared")
    elif rule not in MULTIPLICITY_RULES:
        problems.append(f"multiplicity must be one of {MULTIPLICITY_RULES}, got {rule!r}")
    alpha = float(doc.get("alpha", 0.05))
    if not 0 < alpha < 1:
        problems.append(f"alpha must be in (0, 1), got {alpha}")

    data = _source(doc.get("data"), base, "data", problems)
    frame = _source(doc.get("frame"), base, "frame", problems)
    power = doc.get("power")
    if power is not None:
        try:
            scenario_from_dict(power["scenario"])
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"power.scenario: {exc}")
        if int(power.get("replications", 100)) < 20:
            problems.append(f"power.replications={power.get('replications')}: need at least 20")
    if problems:
        raise ConfigError(problems)

    out_dir = _get(doc, "output", "dir")
    cfg = AuditConfig(
        design=design,
        specs=tuple(specs),
        K=int(folds.get("K", 5)),
        fold_seed=int(folds.get("seed", 0)),
        stratify=bool(folds.get("stratify", True)),
        B=B,
        master_seed=int(resampling.get("master_seed", 0)),
        antithetic=bool(resampling.get("antithetic", False)),
        score=score,
        eps=float(doc.get("epsilon", DEFAULT_EPS)),
        multiplicity=rule,
        alpha=alpha,
        analysis_level=doc.get("analysis_level", "cluster"),
        standardize=bool(doc.get("standardize", True)),
        data=data,
        frame=frame,
        out_dir=base / out_dir if out_dir else None,
        provenance=dict(doc.get("provenance", {})),
        auxiliary=dict(doc.get("auxiliary", {})),
        power=power,
        workers=int(doc.get("workers", 1)),
        raw=dict(doc),
        hash=config_hash(doc),
    )
    applied = {}
    if "data" in overrides:
        if cfg.data is None:
            raise ConfigError("--data given but the config has no 'data' section to bind columns")
        cfg.data = DataSource(Path(overrides["data"]), cfg.data.columns, cfg.data.description)
        applied["data"] = str(overrides["data"])
    if "frame" in overrides:
        if cfg.frame is None:
            raise ConfigError("--frame given but the config has no 'frame' section to bind columns")
        cfg.frame = DataSource(Path(overrides["frame"]), cfg.frame.columns, cfg.frame.description)
        applied["frame"] = str(overrides["frame"])
    if "out" in overrides:
        cfg.out_dir = Path(overrides["out"])
        applied["out"] = str(overrides["out"])
    if "seed" in overrides:
        cfg.master_seed = int(overrides["seed"])
        applied["seed"] = cfg.master_seed
    if "workers" in overrides:
        cfg.workers = int(overrides["workers"])
        applied["workers"] = cfg.workers
    cfg.overrides = applied
    return cfg


def load_config(path: str | Path, overrides: Mapping | None = None) -> AuditConfig:
    path = Path(path)
    return parse_config(read_config(path), path.parent, overrides)
