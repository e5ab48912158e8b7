"""Explainable prognosis pipeline: python surface over the C++ core."""

from ._pgx import (
    PgxError,
    auc,
    confusion_metrics,
    ddim_step,
    decision_vector,
    extract_features,
    generate_case,
    load_checkpoint,
    make_schedule,
    manipulate,
    measure_factors,
    predicted_contribution_change,
    q_sample,
    score,
    weighted_loss,
    weighted_youden,
    weighted_youden_literature,
)

__all__ = [
    "PgxError",
    "auc",
    "confusion_metrics",
    "ddim_step",
    "decision_vector",
    "extract_features",
    "generate_case",
    "load_checkpoint",
    "make_schedule",
    "manipulate",
    "measure_factors",
    "predicted_contribution_change",
    "q_sample",
    "score",
    "weighted_loss",
    "weighted_youden",
    "weighted_youden_literature",
]
