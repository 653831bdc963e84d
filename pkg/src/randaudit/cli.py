"""Command-line front end: ``randaudit {audit,selection,missingness,power,validate,synth}``.

Exit status is 0 whenever a command completes, whatever the p-values; 1 when
``validate`` finds required checklist rows unbound; 2 on configuration or
data faults.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from randaudit import __version__
from randaudit import design as dz
from randaudit._rng import derive_seed, make_rng
from randaudit.config import (
    AuditConfig,
    ConfigError,
    checklist,
    format_checklist,
    load_config,
    missing_required,
    read_config,
)
from randaudit.crt import AuditError, simulate_power
from randaudit.diagnostics import (
    DESCRIPTIVE_LABEL,
    DEFAULT_WEIGHT_FLOOR,
    DiagnosticReport,
    ResponseMatrix,
    SelectionFrame,
    ipw_weights,
    missingness_audit,
    selection_audit,
)
from randaudit.features import (
    DataError,
    InfeasibleScenario,
    Signal,
    SyntheticScenario,
    UnitTable,
    generate_synthetic,
    load_units,
    scenario_from_dict,
    scenario_to_dict,
    standardize_features,
    synthetic_indicators,
    write_units,
)
from randaudit.learners import make_folds

FAULTS = (ConfigError, DataError, AuditError, dz.DesignError, InfeasibleScenario)


# -- output helpers ---------------------------------------------------------


def _out_dir(cfg: AuditConfig) -> Path:
    if cfg.out_dir is None:
        raise ConfigError("no output directory: set output.dir in the config or pass --out")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg.out_dir


def _write_nulls(path: Path, names, columns, seeds=None) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["resample", *(["seed"] if seeds else []), *names])
        for b, row in enumerate(zip(*columns)):
            w.writerow([b + 1, *([seeds[b]] if seeds else []), *(repr(float(v)) for v in row)])


def _fmt_p(p: float) -> str:
    return f"{p:.4f}"


def _table(header, rows) -> list[str]:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda r: "  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip()
    return [line(header), *(line(r) for r in rows)]


def _load(source, what: str) -> UnitTable:
    if source is None:
        raise ConfigError(f"config has no '{what}' section")
    try:
        return load_units(source.path, source.columns)
    except FileNotFoundError:
        raise DataError(f"{what}: no such file {source.path}") from None


# -- audit ------------------------------------------------------------------


def audit_summary(report, cfg: AuditConfig) -> str:
    alpha = report.alpha
    rule = report.multiplicity
    head = ["model", "T_obs", "null mean", "p_raw", f"p_{rule}"]
    rows = [
        (m.model_id, f"{m.observed['statistic']:.4f}", f"{m.null_summary['mean']:.4f}", _fmt_p(m.p_raw), _fmt_p(m.adjusted(rule)))
        for m in report.models
    ]
    flagged = [m.model_id for m in report.models if m.adjusted(rule) <= alpha]
    lines = [
        f"Randomization audit (randaudit {report.engine_version})",
        f"config sha256: {report.config_hash}",
        f"feature hash:  {report.feature_hash}",
        f"design: {json.dumps(report.design, sort_keys=True)}  analysis level: {report.analysis_level} ({report.n_rows} rows)",
        f"resampling: B={report.B}, master seed={report.master_seed}, antithetic={report.antithetic}",
        f"score: {report.score_kind} (eps={report.epsilon:g}), K={report.folds['K']} folds",
        f"multiplicity: {rule}, alpha={alpha:g}",
        "",
        *_table(head, rows),
        "",
    ]
    if flagged:
        lines.append(f"Image-aligned deviation detected at α = {alpha:g} for: {', '.join(flagged)}.")
    else:
        lines.append(f"No image-aligned deviation detected at α = {alpha:g}.")
    if report.unsafe_reuse_observed_model:
        lines.append("WARNING: observed-label models were reused across resamples; these p-values carry no finite-sample guarantee.")
    for note in report.notes:
        lines.append(f"note: {note}")
    lines += ["", "Checklist:", format_checklist(checklist(cfg.raw))]
    return "\n".join(lines) + "\n"


def cmd_audit(cfg: AuditConfig) -> int:
    units = _load(cfg.data, "data")
    if units.treated is None:
        raise ConfigError("data.columns has no 'treated' mapping; the audit needs the observed assignment column")
    out = _out_dir(cfg)
    report = cfg.settings().run(
        units, cfg.design, cfg.master_seed, cfg.workers, alpha=cfg.alpha, provenance=cfg.provenance
    )
    report.config_hash = cfg.hash
    report.overrides = dict(cfg.overrides)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    _write_nulls(
        out / "nulls.csv", [m.model_id for m in report.models], [m.null_statistics for m in report.models], report.resample_seeds
    )
    (out / "summary.txt").write_text(audit_summary(report, cfg), encoding="utf-8")
    print(audit_summary(report, cfg), end="")
    print(f"wrote {out / 'report.json'}, {out / 'nulls.csv'}, {out / 'summary.txt'}")
    return 0


# -- auxiliary diagnostics --------------------------------------------------


def diagnostic_summary(report: DiagnosticReport, alpha: float, what: str) -> str:
    head = ["variable", "rate", "T_obs", "p_raw", "p_max-t"]
    rows = [(v.name, f"{v.rate:.3f}", f"{v.observed['statistic']:.4f}", _fmt_p(v.p_raw), _fmt_p(v.p_adjusted)) for v in report.variables]
    flagged = [v.name for v in report.variables if v.p_adjusted <= alpha]
    lines = [f"{what.capitalize()} audit: {report.label}"]
    if report.description:
        lines.append(f"frame: {report.description}")
    lines += [
        f"reference: {report.reference}, B={report.B}, seed={report.seed}",
        f"baseline: marginal rate of each indicator; score: {report.score_kind}",
        "",
        *_table(head, rows),
        "",
    ]
    for s in report.skipped:
        lines.append(f"skipped: {s}")
    if flagged:
        lines.append(f"At α = {alpha:g} the following indicators are predictable from features: {', '.join(flagged)}.")
    else:
        lines.append(f"At α = {alpha:g} no indicator is predictable from features beyond its marginal rate.")
    lines.append(
        "These p-values are descriptive: they compare against permuted or redrawn indicators, "
        "not against a registered mechanism, and are early warnings only."
    )
    return "\n".join(lines) + "\n"


def _diagnostic_outputs(cfg, report: DiagnosticReport, what: str) -> Path:
    out = _out_dir(cfg)
    doc = report.to_dict()
    doc["config_hash"] = cfg.hash
    doc["overrides"] = dict(cfg.overrides)
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    _write_nulls(out / "nulls.csv", [v.name for v in report.variables], [v.null_statistics for v in report.variables])
    text = diagnostic_summary(report, cfg.alpha, what)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return out


def _selection_units(cfg: AuditConfig) -> SelectionFrame:
    if cfg.frame is not None:
        enrolled = _load(cfg.data, "data")
        frame = _load(cfg.frame, "frame")
        return SelectionFrame.from_tables(enrolled, frame, cfg.frame.description)
    if cfg.data is None or not cfg.data.columns.selected:
        raise ConfigError(
            "selection audit needs an enrollment indicator: map data.columns.selected or add a 'frame' file"
        )
    units = _load(cfg.data, "data")
    return SelectionFrame(units, cfg.data.description)


def _single_spec(cfg: AuditConfig, what: str):
    if len(cfg.specs) != 1:
        print(f"note: {what} audit uses the first learner spec only", file=sys.stderr)
    return cfg.specs[0]


def cmd_selection(cfg: AuditConfig) -> int:
    frame = _selection_units(cfg)
    units = standardize_features(frame.units) if cfg.standardize else frame.units
    plan = make_folds(units, cfg.K, cfg.fold_seed, cfg.stratify)
    report = selection_audit(
        SelectionFrame(units, frame.description),
        _single_spec(cfg, "selection"),
        plan,
        cfg.B,
        cfg.master_seed,
        redraw=bool(cfg.auxiliary.get("redraw", False)),
        score=cfg.score,
        eps=cfg.eps,
        workers=cfg.workers,
    )
    out = _diagnostic_outputs(cfg, report, "selection")
    print(f"wrote {out / 'report.json'}, {out / 'nulls.csv'}, {out / 'summary.txt'}")
    return 0


def cmd_missingness(cfg: AuditConfig) -> int:
    units = _load(cfg.data, "data")
    if not units.responses:
        raise ConfigError("data.columns has no 'responses' mapping; list the response-indicator columns")
    responses = ResponseMatrix.from_units(units)
    if cfg.standardize:
        units = standardize_features(units)
    plan = make_folds(units, cfg.K, cfg.fold_seed, cfg.stratify)
    report = missingness_audit(
        units,
        responses,
        _single_spec(cfg, "missingness"),
        plan,
        cfg.B,
        cfg.master_seed,
        redraw=bool(cfg.auxiliary.get("redraw", False)),
        score=cfg.score,
        eps=cfg.eps,
        workers=cfg.workers,
    )
    out = _diagnostic_outputs(cfg, report, "missingness")
    audited = ResponseMatrix(
        tuple(v.name for v in report.variables),
        np.column_stack([responses.column(v.name) for v in report.variables]) if report.variables else np.zeros((units.n, 0)),
    )
    floor = float(cfg.auxiliary.get("weight_floor", DEFAULT_WEIGHT_FLOOR))
    weights = ipw_weights(audited, report.predictions, floor)
    weights.to_csv(out / "weights.csv", units.ids)
    print(f"wrote {out / 'report.json'}, {out / 'nulls.csv'}, {out / 'summary.txt'}, {out / 'weights.csv'}")
    return 0


# -- power ------------------------------------------------------------------


def cmd_power(cfg: AuditConfig) -> int:
    if cfg.power is None:
        raise ConfigError("config has no 'power' section")
    scenario = scenario_from_dict(cfg.power["scenario"])
    if "seed" in cfg.overrides:
        scenario = scenario.replace(seed=cfg.master_seed)
    replications = int(cfg.power.get("replications", 100))
    effects = [float(e) for e in cfg.power.get("effect_sizes", [0.0, 1.0])]
    out = _out_dir(cfg)
    curve = simulate_power(scenario, cfg.settings(), effects, replications, cfg.alpha, cfg.workers)
    with (out / "power.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["effect", "rejection_rate", "mc_se", "replications"])
        for row in curve.rows():
            w.writerow([repr(row[0]), repr(row[1]), repr(row[2]), row[3]])
    doc = {
        "engine_version": __version__,
        "config_hash": cfg.hash,
        "overrides": dict(cfg.overrides),
        "scenario": scenario_to_dict(scenario),
        "settings": cfg.settings().to_dict(),
        "curve": curve.to_dict(),
    }
    (out / "power.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = [f"Power simulation (randaudit {__version__}), alpha={cfg.alpha:g}, {replications} replications per effect", ""]
    lines += _table(
        ["effect", "rejection", "mc_se"], [(f"{e:g}", f"{r:.3f}", f"{s:.3f}") for e, r, s, _ in curve.rows()]
    )
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    print(f"wrote {out / 'power.csv'}, {out / 'power.json'}, {out / 'summary.txt'}")
    return 0


# -- validate ---------------------------------------------------------------


def cmd_validate(path: str) -> int:
    try:
        doc = read_config(path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rows = checklist(doc)
    print(f"Checklist for {path}:")
    print(format_checklist(rows))
    missing = missing_required(rows)
    problems = []
    try:
        load_config(path)
    except ConfigError as exc:
        problems = exc.problems
    for p in problems:
        print(f"problem: {p}")
    if missing:
        print(f"{len(missing)} required row(s) MISSING: {', '.join(missing)}")
    if missing or problems:
        return 1
    print("all required rows bound")
    return 0


# -- builtin synthetic demos ------------------------------------------------


def _base_config(seed: int, B: int = 199) -> dict:
    return {
        "learners": [{"kind": "logistic", "l2_penalty": 1.0}],
        "folds": {"K": 5, "seed": 0, "stratify": True},
        "resampling": {"B": B, "master_seed": seed, "antithetic": False},
        "score": "log",
        "multiplicity": "max-t",
        "alpha": 0.05,
        "output": {"dir": "out"},
        "provenance": {
            "pre_treatment_window": "synthetic: features generated before assignment",
            "embedding": "synthetic Gaussian features",
            "ethics": "synthetic data, no human subjects",
        },
        "auxiliary": {"selection": False, "missingness": False},
    }


def _demo_features(seed: int, name: str, n: int, d: int) -> np.ndarray:
    return make_rng(derive_seed(seed, "demo", name)).standard_normal((n, d))


def _demo_table(x: np.ndarray, **kw) -> UnitTable:
    n, d = x.shape
    width = len(str(n - 1))
    return UnitTable(ids=[f"u{i:0{width}d}" for i in range(n)], features=x, feature_names=tuple(f"f{j}" for j in range(d)), **kw)


def _synth_audit(name, seed, out: Path):
    planted = name == "planted"
    scenario = SyntheticScenario(
        n=200 if planted else 100,
        d=2 if planted else 10,
        design=dz.CompleteFixedCount(100 if planted else 50),
        signal=Signal("linear", (2.0,)) if planted else Signal(),
        seed=seed,
    )
    units = generate_synthetic(scenario)
    mapping = write_units(units, out / "units.csv", provenance=f"builtin {name} demo, seed {seed}")
    cfg = _base_config(seed)
    cfg["design"] = dz.design_to_dict(scenario.design)
    cfg["data"] = {"path": "units.csv", "columns": mapping.to_dict()}
    return cfg


def _synth_selection(name, seed, out: Path):
    n = 200
    x = _demo_features(seed, name, n, 3)
    if name == "selection":
        s = (x[:, 0] > np.median(x[:, 0])).astype(np.int8)
    else:
        s = np.zeros(n, np.int8)
        s[make_rng(derive_seed(seed, "demo", "enrol")).permutation(n)[: n // 2]] = 1
    table = _demo_table(x)
    enrolled = UnitTable(
        ids=[i for i, v in zip(table.ids, s) if v], features=x[s == 1], feature_names=table.feature_names
    )
    frame = UnitTable(
        ids=[i for i, v in zip(table.ids, s) if not v], features=x[s == 0], feature_names=table.feature_names
    )
    m1 = write_units(enrolled, out / "enrolled.csv", provenance=f"builtin {name} demo, seed {seed}")
    m0 = write_units(frame, out / "frame.csv", provenance=f"builtin {name} demo, seed {seed}")
    cfg = _base_config(seed)
    cfg["design"] = dz.design_to_dict(dz.CompleteFixedCount(n // 2))
    cfg["data"] = {"path": "enrolled.csv", "columns": m1.to_dict()}
    cfg["frame"] = {
        "path": "frame.csv",
        "columns": m0.to_dict(),
        "description": "synthetic frame: units drawn from the same Gaussian population, not enrolled",
    }
    cfg["auxiliary"] = {"selection": True, "missingness": False, "redraw": False}
    return cfg


def _synth_missingness(name, seed, out: Path):
    n = 300
    x = _demo_features(seed, name, n, 3)
    rng = make_rng(derive_seed(seed, "demo", "coins"))
    if name == "missingness":
        responses = {
            "income": synthetic_indicators(x, [2.0], 0.7, derive_seed(seed, "demo", "income")),
            "age": (rng.random(n) < 0.8).astype(np.int8),
            "household": np.ones(n, np.int8),
        }
    else:
        responses = {"income": (rng.random(n) < 0.7).astype(np.int8), "age": (rng.random(n) < 0.8).astype(np.int8)}
    units = _demo_table(x, responses=responses)
    mapping = write_units(units, out / "units.csv", provenance=f"builtin {name} demo, seed {seed}")
    cfg = _base_config(seed)
    cfg["design"] = dz.design_to_dict(dz.CompleteFixedCount(n // 2))
    cfg["data"] = {"path": "units.csv", "columns": mapping.to_dict()}
    cfg["auxiliary"] = {"selection": False, "missingness": True, "redraw": False, "weight_floor": DEFAULT_WEIGHT_FLOOR}
    return cfg


def _synth_power(name, seed, out: Path):
    scenario = SyntheticScenario(n=200, d=2, design=dz.CompleteFixedCount(100), signal=Signal("linear", (1.0,)), seed=seed)
    cfg = _base_config(seed, B=99)
    cfg["design"] = dz.design_to_dict(scenario.design)
    cfg["power"] = {"scenario": scenario_to_dict(scenario), "effect_sizes": [0.0, 0.5, 1.0], "replications": 20}
    return cfg


DEMOS = {
    "placebo": _synth_audit,
    "planted": _synth_audit,
    "selection": _synth_selection,
    "selection-placebo": _synth_selection,
    "missingness": _synth_missingness,
    "missingness-placebo": _synth_missingness,
    "power": _synth_power,
}


def cmd_synth(name: str, out: Path, seed: int) -> int:
    out.mkdir(parents=True, exist_ok=True)
    cfg = DEMOS[name](name, seed, out)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote builtin {name!r} demo to {out} (config: {out / 'config.json'})")
    return 0


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="randaudit", description="Design-based audits of randomized assignments.")
    parser.add_argument("--version", action="version", version=f"randaudit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_overrides(p, frame=False):
        p.add_argument("config", help="JSON config file")
        p.add_argument("--data", help="override data.path")
        if frame:
            p.add_argument("--frame", help="override frame.path")
        p.add_argument("--out", help="override output.dir")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--workers", type=int, help="parallel workers (results do not depend on this)")
        return p

    with_overrides(sub.add_parser("audit", help="randomization audit of the observed assignment"))
    with_overrides(sub.add_parser("selection", help="descriptive selection-into-frame diagnostic"), frame=True)
    with_overrides(sub.add_parser("missingness", help="descriptive missingness diagnostic and IPW weights"))
    p = sub.add_parser("power", help="power curve on a synthetic scenario")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--workers", type=int)
    p = sub.add_parser("validate", help="echo the preregistration checklist")
    p.add_argument("config")
    p = sub.add_parser("synth", help="write a builtin synthetic dataset and config")
    p.add_argument("name", choices=sorted(DEMOS))
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {"audit": cmd_audit, "selection": cmd_selection, "missingness": cmd_missingness, "power": cmd_power}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        return cmd_validate(args.config)
    try:
        if args.command == "synth":
            return cmd_synth(args.name, args.out, args.seed)
        overrides = {k: getattr(args, k, None) for k in ("data", "frame", "out", "seed", "workers")}
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except FAULTS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
