"""End-point error and threshold accuracies of an estimated flow field."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

STRICT_ABS, STRICT_REL = 0.05, 0.05
RELAX_ABS, RELAX_REL = 0.1, 0.1
OUTLIER_ABS, OUTLIER_REL = 0.3, 0.1


@dataclass(frozen=True)
class FlowMetrics:
    epe: float
    acc_strict: float
    acc_relax: float
    outliers: float

    def to_dict(self):
        return asdict(self)


def point_errors(est, gt):
    """Per-point absolute (meters) and relative end-point errors.

    The relative error of a point whose ground-truth flow is zero is +inf, so
    only the absolute thresholds can admit it; an exact estimate of zero flow
    has relative error 0.
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ValueError(f"estimated flow {est.shape} and ground truth {gt.shape} must both be (N, 3)")
    err = np.linalg.norm(est - gt, axis=1)
    norm = np.linalg.norm(gt, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(norm > 0, err / np.where(norm > 0, norm, 1.0), np.where(err > 0, np.inf, 0.0))
    return err, rel


def evaluate(est, gt):
    err, rel = point_errors(est, gt)
    if err.size == 0:
        raise ValueError("cannot evaluate an empty flow field")
    return FlowMetrics(
        epe=float(err.mean()),
        acc_strict=float(((err < STRICT_ABS) | (rel < STRICT_REL)).mean()),
        acc_relax=float(((err < RELAX_ABS) | (rel < RELAX_REL)).mean()),
        outliers=float(((err > OUTLIER_ABS) | (rel > OUTLIER_REL)).mean()),
    )


def aggregate(metrics, weights=None):
    """Weighted mean of per-scene metrics (weights are usually point counts)."""
    metrics = list(metrics)
    if not metrics:
        raise ValueError("no metrics to aggregate")
    w = np.ones(len(metrics)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(metrics),) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per scene, and not all zero")
    w = w / w.sum()
    fields = ("epe", "acc_strict", "acc_relax", "outliers")
    return FlowMetrics(**{f: float(np.dot(w, [getattr(m, f) for m in metrics])) for f in fields})
