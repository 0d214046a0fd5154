"""Location metrics and stratified label splits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    classes: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray
    tp_hop: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray
    f1: float
    lar: float
    lar1hop: float
    lar_classwise: float  # mean_i TP_i / N, kept for reference only

    def row(self) -> dict:
        return {"f1": self.f1, "lar": self.lar, "lar1hop": self.lar1hop}


def compute_metrics(y_true, y_pred, adjacency: np.ndarray | None = None) -> MetricsReport:
    """Per-class confusion counts, macro F1, LAR and one-hop LAR.

    LAR is the fraction of exactly located faults. One-hop LAR also credits
    predictions at a class physically adjacent to the truth (``adjacency`` is
    the boolean class adjacency; without it one-hop LAR equals LAR).
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    N = len(y_true)
    classes = np.unique(y_true)
    tp = np.array([np.sum((y_true == c) & (y_pred == c)) for c in classes])
    fp = np.array([np.sum((y_true != c) & (y_pred == c)) for c in classes])
    fn = np.array([np.sum((y_true == c) & (y_pred != c)) for c in classes])
    tn = N - tp - fp - fn
    if adjacency is None:
        near = y_true == y_pred
    else:
        near = (y_true == y_pred) | adjacency[y_true, y_pred]
    tp_hop = np.array([np.sum(near & (y_true == c)) for c in classes])
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
        f = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return MetricsReport(
        classes=classes,
        tp=tp, fp=fp, tn=tn, fn=fn, tp_hop=tp_hop,
        precision=precision, recall=recall, f=f,
        f1=float(f.mean()),
        lar=float(tp.sum() / N),
        lar1hop=float(tp_hop.sum() / N),
        lar_classwise=float(np.mean(tp / N)),
    )


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(y, beta: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Pick round-half-up(beta * count) samples (at least one) per class.

    Returns sorted (labeled, unlabeled) index arrays.
    """
    if not 0 < beta <= 1:
        raise ValueError(f"label rate must be in (0, 1], got {beta}")
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty class: no samples")
    rng = np.random.default_rng(seed)
    picked = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        take = max(1, round_half_up(beta * len(idx)))
        picked.append(rng.choice(idx, size=min(take, len(idx)), replace=False))
    labeled = np.sort(np.concatenate(picked))
    unlabeled = np.setdiff1d(np.arange(len(y)), labeled)
    return labeled, unlabeled
