"""Evaluation metrics and seed aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


def accuracy(predictions, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label.

    ``predictions`` may be an [N x c] score matrix or a vector of class ids.
    """
    pred = np.asarray(predictions)
    labels = np.asarray(labels).reshape(-1)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)  # numpy argmax returns the first maximum
    if len(pred) != len(labels):
        raise ValueError(f"{len(pred)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    return float((pred == labels).mean())


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if len(scores) != len(labels):
        raise ValueError(f"{len(scores)} scores for {len(labels)} labels")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(scores)  # average ranks resolve ties as 1/2
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mean_std(values) -> tuple[float, float]:
    """Mean and sample (ddof=1) standard deviation; std is 0 for one value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def format_pm(values, scale: float = 100.0) -> str:
    """``"89.15 ± 3.02"`` style summary (percent by default)."""
    m, s = mean_std(values)
    return f"{m * scale:.2f} ± {s * scale:.2f}"


@dataclass
class MetricReport:
    name: str
    values: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.name not in ("accuracy", "roc_auc"):
            raise ValueError(f"unknown metric {self.name!r}")
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ValueError(f"{self.name} values must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return mean_std(self.values)[0]

    @property
    def std(self) -> float:
        return mean_std(self.values)[1]

    def __str__(self):
        return f"{self.name}: {format_pm(self.values)}"


def score(metric: str, logits, labels) -> float:
    logits = np.asarray(logits)
    if metric == "accuracy":
        return accuracy(logits, labels)
    if metric == "roc_auc":
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        return roc_auc(p[:, 1], labels)
    raise ValueError(f"unknown metric {metric!r}")
