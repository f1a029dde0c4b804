"""Layout quality metrics.

``alignment_metric`` and ``overlap_metric`` are scaled by 100 and normalised
by element count. ``dist_distance`` is a Fréchet distance between Gaussian
fits of hand-picked layout statistics; it is a lightweight stand-in for
feature-network distances and is reported under its own name.
"""
from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .layout import Layout, layouts_to_arrays

BRUTE_FORCE_MAX = 6
RIDGE = 1e-6


@dataclass(frozen=True)
class EvalReport:
    alignment: float
    overlap: float
    max_iou: float
    dist_distance: float
    n_layouts: int

    def to_json(self) -> dict:
        return asdict(self)


def alignment_metric_arrays(boxes: np.ndarray, n_real: np.ndarray) -> float:
    n_real = np.asarray(n_real)
    loss, _ = kernels.local_alignment(boxes, n_real)
    return float(np.mean(loss / np.maximum(n_real, 1)) * 100.0)


def overlap_metric_arrays(boxes: np.ndarray, n_real: np.ndarray) -> float:
    vals = []
    for b, n in zip(boxes, np.asarray(n_real)):
        n = int(n)
        if n < 1:
            vals.append(0.0)
            continue
        iou = kernels.iou_matrix(b[:n], b[:n])
        vals.append(float(np.triu(iou, 1).sum()) / n)
    return float(np.mean(vals) * 100.0)


def alignment_metric(layouts: Sequence[Layout]) -> float:
    _, boxes, n_real = layouts_to_arrays(layouts)
    return alignment_metric_arrays(boxes, n_real)


def overlap_metric(layouts: Sequence[Layout]) -> float:
    _, boxes, n_real = layouts_to_arrays(layouts)
    return overlap_metric_arrays(boxes, n_real)


def _group(layout: Layout) -> dict[int, np.ndarray]:
    groups: dict[int, list] = defaultdict(list)
    for el in layout.real:
        groups[el.label].append(el.box)
    return {k: np.asarray(v, dtype=np.float64) for k, v in groups.items()}


def best_assignment_value(iou: np.ndarray) -> float:
    """Maximum total IoU over one-to-one matchings of a square matrix."""
    n = iou.shape[0]
    if n == 0:
        return 0.0
    if n <= BRUTE_FORCE_MAX:
        return brute_force_assignment_value(iou)
    rows, cols = linear_sum_assignment(iou, maximize=True)
    return float(iou[rows, cols].sum())


def brute_force_assignment_value(iou: np.ndarray) -> float:
    n = iou.shape[0]
    rows = np.arange(n)
    return float(max(iou[rows, list(p)].sum() for p in itertools.permutations(range(n))))


def max_iou_with_flag(generated: Layout, reference: Layout) -> tuple[float, bool]:
    """Returns ``(score, matched)``; ``matched`` is False when category multisets differ."""
    ga, gb = _group(generated), _group(reference)
    if {k: len(v) for k, v in ga.items()} != {k: len(v) for k, v in gb.items()}:
        return 0.0, False
    n = reference.n_real
    if n == 0:
        return 1.0, True
    total = sum(best_assignment_value(kernels.iou_matrix(ga[k], gb[k])) for k in ga)
    return total / n, True


def max_iou(generated: Layout, reference: Layout) -> float:
    return max_iou_with_flag(generated, reference)[0]


def mean_max_iou(generated: Sequence[Layout], reference: Sequence[Layout]) -> float:
    if len(generated) != len(reference):
        raise ValueError("generated and reference sets must pair up")
    return float(np.mean([max_iou(g, r) for g, r in zip(generated, reference)]))


def layout_features(layout: Layout) -> np.ndarray:
    """Element count, mean/std of each box coordinate, mean pairwise IoU."""
    n = layout.n_real
    boxes = layout.boxes()[:n]
    if n == 0:
        return np.zeros(10)
    mean = boxes.mean(axis=0)
    std = boxes.std(axis=0)
    if n > 1:
        iou = kernels.iou_matrix(boxes, boxes)
        pair = float(iou[np.triu_indices(n, 1)].mean())
    else:
        pair = 0.0
    return np.concatenate([[n], mean, std, [pair]])


def frechet_distance(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    mu_a, mu_b = feat_a.mean(axis=0), feat_b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(feat_a, rowvar=False, bias=True))
    cov_b = np.atleast_2d(np.cov(feat_b, rowvar=False, bias=True))
    cov_a, cov_b = _ridge(cov_a), _ridge(cov_b)
    # trace sqrt(A B) via the symmetric similar matrix sqrt(A) B sqrt(A)
    wa, va = np.linalg.eigh(cov_a)
    sa = (va * np.sqrt(np.clip(wa, 0, None))) @ va.T
    mid = sa @ cov_b @ sa
    mid = (mid + mid.T) / 2
    tr_sqrt = float(np.sqrt(np.clip(np.linalg.eigvalsh(mid), 0, None)).sum())
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def _ridge(cov: np.ndarray) -> np.ndarray:
    if np.linalg.eigvalsh(cov).min() <= 1e-12:
        return cov + RIDGE * np.eye(cov.shape[0])
    return cov


def dist_distance(set_a: Sequence[Layout], set_b: Sequence[Layout]) -> float:
    if not set_a or not set_b:
        raise ValueError("both layout sets must be non-empty")
    fa = np.stack([layout_features(x) for x in set_a])
    fb = np.stack([layout_features(x) for x in set_b])
    return frechet_distance(fa, fb)


def evaluate(generated: Sequence[Layout], reference: Sequence[Layout] | None = None) -> EvalReport:
    """Aggregate report; MaxIoU pairs generated[i] with reference[i]."""
    mi = 0.0
    dd = 0.0
    if reference:
        if len(reference) == len(generated):
            mi = mean_max_iou(generated, reference)
        dd = dist_distance(generated, reference)
    return EvalReport(alignment_metric(generated), overlap_metric(generated), mi, dd, len(generated))
