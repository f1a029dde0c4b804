"""Inference-time alignment clean-up.

Coordinate pairs that are already nearly aligned in a generated layout
(closer than ``delta`` on the aspect-scaled canvas) are pulled together by
gradient descent on the masked alignment loss, optionally with the overlap
loss. Labels and element count never change.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .layout import Element, Layout, boxes_to_edges

log = logging.getLogger(__name__)

DEFAULT_DELTA = 1.0 / 64


@dataclass(frozen=True)
class PostConfig:
    delta: float = DEFAULT_DELTA
    max_iters: int = 200
    step_size: float | None = None  # defaults to 0.1 * delta
    use_overlap: bool = False
    tol: float = 1e-7
    trust_region: float | None = None  # per-iteration clip, defaults to delta / 4
    max_displacement: float | None = None  # total clip, defaults to 2 * delta

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @property
    def step(self) -> float:
        return 0.1 * self.delta if self.step_size is None else self.step_size

    @property
    def clip(self) -> float:
        return self.delta / 4 if self.trust_region is None else self.trust_region

    @property
    def bound(self) -> float:
        return 2 * self.delta if self.max_displacement is None else self.max_displacement


@dataclass(frozen=True)
class PostResult:
    layout: Layout
    loss_before: float
    loss_after: float
    iterations: int
    aborted: bool = False


def canvas_scale(canvas: tuple[int, int]) -> tuple[float, float]:
    W, H = canvas
    if W <= 0 or H <= 0:
        raise ValueError(f"canvas must be positive, got {canvas}")
    m = max(W, H)
    return W / m, H / m


def scale_canvas_coords(boxes, canvas: tuple[int, int]) -> np.ndarray:
    """Six edge coordinates with x-types scaled by ``W/max`` and y-types by ``H/max``."""
    sx, sy = canvas_scale(canvas)
    return boxes_to_edges(boxes) * np.array([sx, sx, sx, sy, sy, sy])


def infer_alignment_mask(layout: Layout, delta: float = DEFAULT_DELTA, canvas: tuple[int, int] | None = None) -> np.ndarray:
    """``(6, L, L)`` mask of real pairs whose scaled gap is strictly below ``delta``."""
    canvas = layout.canvas if canvas is None else canvas
    sx, sy = canvas_scale(canvas)
    boxes = layout.boxes()[None]
    return kernels.threshold_alignment_mask(boxes, np.array([layout.n_real]), delta, sx, sy)[0]


def _objective(boxes, mask, n, use_overlap):
    loss, grad = kernels.global_alignment(boxes[None], mask[None])
    loss, grad = float(loss[0]), grad[0]
    if use_overlap:
        ol, og = kernels.overlap(boxes[None], np.array([n]))
        loss += float(ol[0])
        grad = grad + og[0]
    return loss, grad


def optimize_layout(layout: Layout, mask: np.ndarray, config: PostConfig = PostConfig()) -> PostResult:
    """Projected gradient descent on the geometry of the real elements.

    Each iteration moves every coordinate by at most ``config.clip``, keeps
    the total move within ``config.bound`` of the input and inside [0, 1],
    and is only accepted if the objective decreases; a rejected step halves
    the step size.
    """
    n = layout.n_real
    boxes0 = layout.boxes()
    x = boxes0.copy()
    if not np.all(np.isfinite(boxes0)):
        log.warning("non-finite geometry on input; returning it unchanged")
        return PostResult(layout, float("nan"), float("nan"), 0, aborted=True)
    loss, grad = _objective(x, mask, n, config.use_overlap)
    start = loss
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        log.warning("non-finite objective on input; returning it unchanged")
        return PostResult(layout, start, start, 0, aborted=True)
    lo = np.clip(boxes0 - config.bound, 0.0, 1.0)
    hi = np.clip(boxes0 + config.bound, 0.0, 1.0)
    step = config.step
    it = 0
    for it in range(1, config.max_iters + 1):
        if loss == 0.0 or not np.any(grad):
            break
        move = np.clip(-step * grad, -config.clip, config.clip)
        cand = np.clip(x + move, lo, hi)
        cand[n:] = boxes0[n:]
        new_loss, new_grad = _objective(cand, mask, n, config.use_overlap)
        if not np.isfinite(new_loss) or not np.all(np.isfinite(new_grad)):
            log.warning("non-finite gradient during post-processing; returning input unchanged")
            return PostResult(layout, start, start, it, aborted=True)
        if new_loss < loss:
            improvement = loss - new_loss
            x, loss, grad = cand, new_loss, new_grad
            if improvement < config.tol:
                break
        else:
            step *= 0.5
            if step < 1e-12:
                break
    real = [Element(e.label, tuple(float(v) for v in b)) for e, b in zip(layout.real, x[:n])]
    out = Layout(tuple(real) + layout.elements[n:], layout.num_classes, layout.canvas, n)
    return PostResult(out, start, loss, it)


def postprocess(layout: Layout, config: PostConfig = PostConfig(), canvas: tuple[int, int] | None = None) -> PostResult:
    mask = infer_alignment_mask(layout, config.delta, canvas)
    return optimize_layout(layout, mask, config)


def postprocess_many(layouts: Sequence[Layout], config: PostConfig = PostConfig()) -> list[Layout]:
    return [postprocess(lay, config).layout for lay in layouts]
