"""Classification metrics: macro F1, one-vs-rest AUC, accuracy, MCC and per-class rates."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix, matthews_corrcoef, roc_auc_score

from packages.helpers.errors import ContractError, DimensionError, IndexRangeError

logger = logging.getLogger("Metrics")

METRIC_NAMES = ("f1", "auc", "acc", "mcc", "sens", "spec", "ppv", "npv")


@dataclass
class MetricsReport:
    f1: float
    auc: float
    acc: float
    mcc: float
    sens: float
    spec: float
    ppv: float
    npv: float
    confusion: np.ndarray
    auc_skipped: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in METRIC_NAMES}


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute_metrics(labels: Sequence[int], probs: np.ndarray, n_classes: Optional[int] = None) -> MetricsReport:
    """
    Metrics of argmax predictions against integer labels.

    Per-class binary rates are macro-averaged over the classes that occur in
    the labels or the predictions; a zero denominator counts as 0. AUC is the
    macro mean of one-vs-rest AUCs over classes having both positives and
    negatives; the other classes are listed in ``auc_skipped`` and the AUC is
    NaN when no class qualifies.

    Raises:
        DimensionError: Mismatched or empty inputs
        ContractError: Probability rows that do not sum to 1
        IndexRangeError: Labels outside [0, C)
    """
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],) or labels.size == 0:
        raise DimensionError(f"{labels.shape[0]} labels against probabilities of shape {probs.shape}")
    n_classes = probs.shape[1] if n_classes is None else n_classes
    if probs.shape[1] != n_classes:
        raise DimensionError(f"probabilities have {probs.shape[1]} columns, expected {n_classes}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-5):
        raise ContractError("probability rows must sum to 1")
    bad = labels[(labels < 0) | (labels >= n_classes)]
    if bad.size:
        raise IndexRangeError(f"label {int(bad[0])} outside [0, {n_classes})")

    preds = probs.argmax(axis=1)
    cm = confusion_matrix(labels, preds, labels=np.arange(n_classes))
    total = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = total - tp - fn - fp
    present = np.union1d(labels, preds)

    def macro(values: np.ndarray) -> float:
        return float(values[present].mean())

    auc_values, skipped = [], []
    for c in range(n_classes):
        positives = labels == c
        if positives.all() or not positives.any():
            skipped.append(c)
            continue
        auc_values.append(roc_auc_score(positives, probs[:, c]))
    if skipped:
        logger.warning(f"AUC skipped for classes {skipped}: they lack positives or negatives")

    return MetricsReport(
        f1=macro(_ratio(2 * tp, 2 * tp + fp + fn)),
        auc=float(np.mean(auc_values)) if auc_values else float("nan"),
        acc=float(tp.sum() / total),
        mcc=float(matthews_corrcoef(labels, preds)),
        sens=macro(_ratio(tp, tp + fn)),
        spec=macro(_ratio(tn, tn + fp)),
        ppv=macro(_ratio(tp, tp + fp)),
        npv=macro(_ratio(tn, tn + fn)),
        confusion=cm,
        auc_skipped=skipped,
    )
