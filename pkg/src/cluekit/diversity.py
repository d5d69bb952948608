"""Diversity metrics over sets of counterfactuals.

Six metrics: DPP kernel determinant, average pairwise distance, coverage
(input or latent space), prediction coverage, distinct labels, and label
entropy. The first three are differentiable and can serve as optimization
terms; the label-based metrics are evaluation-only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import comb, log

import numpy as np
from scipy.linalg import lu_factor

from . import diffcore as dc

DIFFERENTIABLE_METRICS = ("dpp", "apd", "coverage")
LABEL_METRICS = ("prediction_coverage", "distinct_labels", "label_entropy")
ALL_METRICS = DIFFERENTIABLE_METRICS + LABEL_METRICS


@dataclass
class DiversitySpec:
    metric: str = "dpp"
    space: str = "latent"  # "input" | "latent" | "prediction"
    base: str = "l2"  # base distance for dpp/apd

    def __post_init__(self):
        if self.metric not in ALL_METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.metric in LABEL_METRICS and self.metric != "prediction_coverage":
            self.space = "prediction"
        if self.metric == "prediction_coverage":
            self.space = "prediction"
        if self.metric == "coverage" and self.space == "prediction":
            raise ValueError("coverage applies in input or latent space only")


def _base_dist(a, b, base):
    if base == "l2":
        return float(np.linalg.norm(a - b))
    if base == "l1":
        return float(np.sum(np.abs(a - b)))
    raise ValueError(f"unknown base distance {base!r}")


def dpp(points, base="l2"):
    """det of K with K_ij = 1/(1 + d(x_i, x_j)); 0 for k=1 by convention."""
    pts = np.asarray(points, dtype=np.float64)
    k = pts.shape[0]
    if k == 1:
        return 0.0
    with np.errstate(invalid="ignore"):
        dmat = np.array([[_base_dist(pts[i], pts[j], base) for j in range(k)]
                         for i in range(k)])
    if not np.all(np.isfinite(dmat)):
        raise ValueError("dpp: non-finite pairwise distance")
    kern = 1.0 / (1.0 + dmat)
    with warnings.catch_warnings():
        # duplicate points make the kernel singular; a zero LU diagonal then
        # yields determinant 0, which is the intended value
        warnings.simplefilter("ignore")
        lu, piv = lu_factor(kern)
    parity = (-1.0) ** np.count_nonzero(piv != np.arange(k))
    value = parity * float(np.prod(np.diag(lu)))
    # PSD kernel guarantees [0,1]; clamp roundoff (floor at -1e-9)
    return min(1.0, max(0.0, value))


def apd(points, base="l2"):
    """Average pairwise distance; 0 for k=1."""
    pts = np.asarray(points, dtype=np.float64)
    k = pts.shape[0]
    if k == 1:
        return 0.0
    total = 0.0
    for i in range(k - 1):
        for j in range(i + 1, k):
            total += _base_dist(pts[i], pts[j], base)
    return total / comb(k, 2)


def coverage(points, x0):
    """Per-coordinate max positive + max negative deviation from x0, averaged.

    Per-coordinate maxima are kept as-is, including negative values when no
    point in the set moves in that direction.
    """
    pts = np.asarray(points, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if pts.shape[1] != x0.shape[0]:
        raise dc.ShapeError(f"coverage: dimension mismatch {pts.shape[1]} vs {x0.shape[0]}")
    pos = np.max(pts - x0, axis=0)
    neg = np.max(x0 - pts, axis=0)
    return float(np.mean(pos + neg))


def coverage_max(mins, maxs):
    """(S+ - S-)/d' bound on coverage from per-coordinate data ranges."""
    mins = np.asarray(mins, dtype=np.float64)
    maxs = np.asarray(maxs, dtype=np.float64)
    if np.any(maxs < mins):
        raise ValueError("coverage_max: per-coordinate max must be >= min")
    return float((maxs.sum() - mins.sum()) / len(mins))


def prediction_coverage(posteriors):
    """Mean over classes of the best prediction for that class in the set."""
    ps = np.asarray(posteriors, dtype=np.float64)
    return float(np.mean(np.max(ps, axis=0)))


def distinct_labels(labels, c):
    return len(set(int(v) for v in labels)) / c


def label_entropy(labels, c):
    """Entropy of the empirical label distribution, normalized by log c'."""
    labels = np.asarray(labels, dtype=np.int64)
    k = len(labels)
    counts = np.bincount(labels, minlength=c)
    p = counts / k
    h = -sum(pj * log(pj) for pj in p if pj > 0.0)
    return min(1.0, max(0.0, h / log(c)))


def evaluate(spec, *, points=None, x0=None, posteriors=None, labels=None, c=None):
    """Dispatch a DiversitySpec to the right metric and arguments."""
    m = spec.metric
    if m == "dpp":
        return dpp(points, spec.base)
    if m == "apd":
        return apd(points, spec.base)
    if m == "coverage":
        return coverage(points, x0)
    if m == "prediction_coverage":
        return prediction_coverage(posteriors)
    if m == "distinct_labels":
        return distinct_labels(labels, c)
    if m == "label_entropy":
        return label_entropy(labels, c)
    raise ValueError(f"unknown metric {m!r}")


def diversity_node(spec, points_node, x0=None):
    """Graph node for a differentiable metric over a k x dim Tensor."""
    k = points_node.shape[0]
    if spec.metric == "dpp":
        if k == 1:
            return dc.Tensor(0.0)
        dmat = dc.pairwise_dist(points_node, spec.base)
        kern = dc.recip(dc.add(dmat, 1.0))
        return dc.det(kern)
    if spec.metric == "apd":
        if k == 1:
            return dc.Tensor(0.0)
        dmat = dc.pairwise_dist(points_node, spec.base)
        return dc.mul(dc.tsum(dmat), 1.0 / (2.0 * comb(k, 2)))
    if spec.metric == "coverage":
        diff = dc.sub(points_node, dc.Tensor(np.asarray(x0, dtype=np.float64)))
        pos = dc.amax(diff, axis=0)
        neg = dc.amax(dc.mul(diff, -1.0), axis=0)
        return dc.mul(dc.tsum(dc.add(pos, neg)), 1.0 / points_node.shape[1])
    raise ValueError(f"metric {spec.metric!r} is not differentiable; "
                     f"label-based metrics are evaluation-only")


def diversity_grad(spec, points, x0=None):
    """Value and per-point gradients of a differentiable metric."""
    if spec.metric not in DIFFERENTIABLE_METRICS:
        raise ValueError(f"metric {spec.metric!r} is not differentiable; "
                         f"label-based metrics are evaluation-only")
    pts = dc.Tensor(np.asarray(points, dtype=np.float64), requires_grad=True)
    node = diversity_node(spec, pts, x0=x0)
    node.backward()
    grad = pts.grad if pts.grad is not None else np.zeros_like(pts.data)
    return float(node.data), grad


def metric_report_rows(xs, zs, posteriors, labels, x0, z0, c):
    """All six metrics in every applicable space: rows (metric, space, k, value)."""
    k = len(labels)
    rows = []
    for space, pts, origin in (("input", xs, x0), ("latent", zs, z0)):
        rows.append(("dpp", space, k, dpp(pts)))
        rows.append(("apd", space, k, apd(pts)))
        rows.append(("coverage", space, k, coverage(pts, origin)))
    rows.append(("dpp", "prediction", k, dpp(posteriors)))
    rows.append(("apd", "prediction", k, apd(posteriors)))
    rows.append(("prediction_coverage", "prediction", k, prediction_coverage(posteriors)))
    rows.append(("distinct_labels", "prediction", k, distinct_labels(labels, c)))
    rows.append(("label_entropy", "prediction", k, label_entropy(labels, c)))
    return rows


def write_metric_csv(rows, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("metric,space,k,value\n")
        for metric, space, k, value in rows:
            f.write(f"{metric},{space},{k},{repr(float(value))}\n")
