"""Design-based randomization audits on pre-treatment feature tables."""

__version__ = "0.1.0"

from randaudit.design import (
    Bernoulli,
    ClusterRandomized,
    CompleteFixedCount,
    StratifiedFixedCounts,
    antithetic_complement,
    baseline_probabilities,
    draw_assignment,
    enumerate_assignments,
    validate_design,
)
from randaudit.features import UnitTable, generate_synthetic, load_units, standardize_features
from randaudit.learners import BoostedStumpsSpec, LogisticSpec, cross_fit_predictions, fit, make_folds
from randaudit.scoring import brier_improvement, clip_probabilities, delta_loglik, delta_loglik_q
from randaudit.crt import (
    bh_adjust,
    bonferroni_adjust,
    enumerated_crt,
    max_t_adjust,
    p_value,
    run_crt,
    simulate_power,
)
from randaudit.diagnostics import (
    ResponseMatrix,
    SelectionFrame,
    ipw_weights,
    missingness_audit,
    selection_audit,
)

__all__ = [
    "selection_audit",
    "missingness_audit",
    "ipw_weights",
    "SelectionFrame",
    "ResponseMatrix",
    "Bernoulli",
    "BoostedStumpsSpec",
    "ClusterRandomized",
    "CompleteFixedCount",
    "LogisticSpec",
    "StratifiedFixedCounts",
    "UnitTable",
    "antithetic_complement",
    "baseline_probabilities",
    "bh_adjust",
    "bonferroni_adjust",
    "brier_improvement",
    "clip_probabilities",
    "cross_fit_predictions",
    "delta_loglik",
    "delta_loglik_q",
    "draw_assignment",
    "enumerate_assignments",
    "enumerated_crt",
    "fit",
    "generate_synthetic",
    "load_units",
    "make_folds",
    "max_t_adjust",
    "p_value",
    "run_crt",
    "simulate_power",
    "standardize_features",
    "validate_design",
]
