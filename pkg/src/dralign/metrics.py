"""Group fairness and ranking metrics.

The ``relaxed_*`` functions work on mean predictions and return tape nodes
when given nodes, so they can be used as training regularizers.  The hard
metrics threshold predicted probabilities and are evaluation-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))


# -- relaxed (differentiable) --------------------------------------------


def relaxed_dp(mean0, mean1):
    """|E[F | a=0] - E[F | a=1]|."""
    return abs(mean0 - mean1)


def relaxed_eo(means):
    """Sum over labels of |E[F | a=0, y] - E[F | a=1, y]|.

    ``means`` maps ``(a, y)`` to the cell mean; a 4-sequence is read in the
    order (0,0), (0,1), (1,0), (1,1).
    """
    means = _as_cells(means)
    return abs(means[0, 0] - means[1, 0]) + abs(means[0, 1] - means[1, 1])


def relaxed_eop(mean01, mean11):
    """|E[F | a=0, y=1] - E[F | a=1, y=1]|."""
    return abs(mean01 - mean11)


def relaxed_pp(means, counts):
    """Magnitude of the difference of count-weighted group means."""
    means, counts = _as_cells(means), _as_cells(counts)
    groups = []
    for a in (0, 1):
        n0, n1 = float(counts[a, 0]), float(counts[a, 1])
        if n0 + n1 <= 0:
            raise ValueError(f"group a={a} has no samples")
        groups.append((means[a, 0] * n0 + means[a, 1] * n1) * (1.0 / (n0 + n1)))
    return abs(groups[0] - groups[1])


def _as_cells(x) -> dict:
    if isinstance(x, dict):
        missing = [c for c in CELLS if c not in x]
        if missing:
            raise ValueError(f"missing (a, y) cells: {missing}")
        return x
    x = list(x)
    if len(x) != 4:
        raise ValueError("expected four cell values")
    return dict(zip(CELLS, x))


# -- hard (thresholded) ----------------------------------------------------


@dataclass(frozen=True)
class SubgroupPredictions:
    """Predicted probabilities with labels and sensitive attribute per sample."""

    probs: np.ndarray
    labels: np.ndarray
    attrs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "labels", np.asarray(self.labels).astype(int).reshape(-1))
        object.__setattr__(self, "attrs", np.asarray(self.attrs).astype(int).reshape(-1))
        if not len(self.probs) == len(self.labels) == len(self.attrs):
            raise ValueError("probs, labels and attrs must have equal length")

    @classmethod
    def from_cells(cls, cells: dict) -> "SubgroupPredictions":
        """Build from ``{(a, y): probs}`` (or ``{a: (probs, labels)}``)."""
        probs, labels, attrs = [], [], []
        for key, val in cells.items():
            if isinstance(key, tuple):
                a, y = key
                p = np.asarray(val, dtype=np.float64)
                lab = np.full(p.size, y)
            else:
                a = key
                p, lab = (np.asarray(v) for v in val)
            probs.append(p)
            labels.append(lab)
            attrs.append(np.full(p.size, a))
        return cls(np.concatenate(probs), np.concatenate(labels), np.concatenate(attrs))

    def cell(self, a: int, y: int | None = None) -> np.ndarray:
        mask = self.attrs == a
        if y is not None:
            mask &= self.labels == y
        if not mask.any():
            name = f"a={a}" if y is None else f"a={a}, y={y}"
            raise ValueError(f"empty subgroup {name}")
        return self.probs[mask]


def _rate(p: np.ndarray, threshold: float) -> float:
    return float(np.mean(p > threshold))


def hard_dp(preds: SubgroupPredictions, threshold: float = 0.5) -> float:
    return abs(_rate(preds.cell(0), threshold) - _rate(preds.cell(1), threshold))


def hard_eo(preds: SubgroupPredictions, threshold: float = 0.5) -> float:
    return sum(
        abs(_rate(preds.cell(0, y), threshold) - _rate(preds.cell(1, y), threshold))
        for y in (0, 1)
    )


def eop_ratio(preds: SubgroupPredictions, threshold: float = 0.5) -> float:
    """TPR(a=0) / TPR(a=1); 1.0 is parity."""
    tpr0 = _rate(preds.cell(0, 1), threshold)
    tpr1 = _rate(preds.cell(1, 1), threshold)
    if tpr1 == 0:
        raise ValueError("true-positive rate of a=1 is zero")
    return tpr0 / tpr1


def pp_diff(preds: SubgroupPredictions, threshold: float = 0.5) -> float:
    """|P(y=1 | a=0, yhat=1) - P(y=1 | a=1, yhat=1)|."""
    prec = []
    for a in (0, 1):
        positive = (preds.attrs == a) & (preds.probs > threshold)
        if not positive.any():
            raise ValueError(f"no predicted positives in group a={a}")
        prec.append(float(np.mean(preds.labels[positive] == 1)))
    return abs(prec[0] - prec[1])


def average_precision(scores, labels) -> float:
    """Ranked-precision average: sum_k precision@k * delta-recall@k.

    Equal scores keep their input order.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(int).reshape(-1)
    if scores.size != labels.size:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] == 1
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / n_pos)
