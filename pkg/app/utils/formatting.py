"""Utility functions for text output of metrics and tables."""

import numpy as np
import pandas as pd

from packages.trainer.metrics import METRIC_NAMES, MetricsReport


def format_table(df: pd.DataFrame, float_digits: int = 4) -> str:
    """Aligned plain-text rendering of a table."""
    if df.empty:
        return "(empty table)"
    return df.to_string(index=False, float_format=lambda v: f"{v:.{float_digits}f}")


def format_metrics_report(report: MetricsReport, title: str = "") -> str:
    rows = pd.DataFrame([{"metric": name.upper(), "value": getattr(report, name)} for name in METRIC_NAMES])
    labels = [f"true {c}" for c in range(report.confusion.shape[0])]
    columns = [f"pred {c}" for c in range(report.confusion.shape[1])]
    confusion = pd.DataFrame(report.confusion, index=labels, columns=columns)
    parts = [title] if title else []
    parts += [format_table(rows), "", "Confusion matrix:", confusion.to_string()]
    if report.auc_skipped:
        parts.append(f"AUC skipped for classes: {', '.join(str(c) for c in report.auc_skipped)}")
    return "\n".join(parts)


def format_class_counts(labels) -> str:
    values, counts = np.unique(np.asarray(labels), return_counts=True)
    return ", ".join(f"class {v}: {c}" for v, c in zip(values, counts))

