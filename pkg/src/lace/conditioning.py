"""Generation tasks expressed as binary condition masks over the state."""
from __future__ import annotations

import enum

import numpy as np

from .layout import Element, Layout

REFINE_STD = 0.1  # variance 0.01
COMPLETE_FRAC_MAX = 0.2


class TaskKind(str, enum.Enum):
    UNCOND = "uncond"
    CLASS_TO_SIZE_POS = "c"
    CLASS_SIZE_TO_POS = "csz"
    COMPLETION = "complete"
    REFINEMENT = "refine"


TRAINING_TASKS = (
    TaskKind.UNCOND,
    TaskKind.CLASS_TO_SIZE_POS,
    TaskKind.CLASS_SIZE_TO_POS,
    TaskKind.COMPLETION,
)


def mask_for(
    task: TaskKind | str,
    n_real: int,
    max_len: int,
    num_classes: int,
    rng: np.random.Generator | None = None,
    complete_frac_max: float = COMPLETE_FRAC_MAX,
    frac: float | None = None,
) -> np.ndarray:
    """Build the ``(L, N + 5)`` mask for one layout.

    Padding rows are fully known for every conditional task, so the element
    count is part of the condition. Refinement keeps the labels known, like
    the class-only task. ``frac`` pins the completion fraction instead of
    drawing it from ``U[0, complete_frac_max]``.
    """
    task = TaskKind(task)
    n = num_classes
    m = np.zeros((max_len, n + 5))
    if task is TaskKind.UNCOND:
        return m
    m[n_real:] = 1.0
    if task in (TaskKind.CLASS_TO_SIZE_POS, TaskKind.REFINEMENT):
        m[:, : n + 1] = 1.0
    elif task is TaskKind.CLASS_SIZE_TO_POS:
        m[:, : n + 1] = 1.0
        m[:, n + 3 :] = 1.0
    elif task is TaskKind.COMPLETION:
        if frac is None:
            if rng is None:
                raise ValueError("completion masks need an rng or an explicit frac")
            frac = rng.uniform(0.0, complete_frac_max)
        k = int(np.floor(frac * n_real))
        if k > 0:
            chosen = rng.choice(n_real, size=k, replace=False) if rng is not None else np.arange(k)
            m[chosen] = 1.0
    return m


def make_mask(task: TaskKind | str, layout: Layout, rng: np.random.Generator | None = None, **kwargs) -> np.ndarray:
    if layout.n_real < 1:
        raise ValueError("conditioning needs at least one real element")
    return mask_for(task, layout.n_real, layout.max_len, layout.num_classes, rng, **kwargs)


def apply_mask(mask: np.ndarray, x0: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    """Blend known entries from ``x0`` into ``x_t``.

    Uses a selection rather than ``m * x0 + (1 - m) * x_t`` arithmetic so
    known and unknown entries are copied bit-exactly.
    """
    mask, x0, x_t = np.asarray(mask), np.asarray(x0), np.asarray(x_t)
    if mask.shape != x0.shape or x0.shape != x_t.shape:
        raise ValueError(f"shape mismatch: mask {mask.shape}, x0 {x0.shape}, x_t {x_t.shape}")
    return np.where(mask != 0, x0, x_t)


def sample_training_mask(
    rng: np.random.Generator,
    n_real: int,
    max_len: int,
    num_classes: int,
    complete_frac_max: float = COMPLETE_FRAC_MAX,
) -> tuple[TaskKind, np.ndarray]:
    """Draw one of the four generation tasks uniformly and build its mask."""
    task = TRAINING_TASKS[rng.integers(len(TRAINING_TASKS))]
    return task, mask_for(task, n_real, max_len, num_classes, rng, complete_frac_max)


def perturb_for_refinement(layout: Layout, rng: np.random.Generator, std: float = REFINE_STD) -> Layout:
    """Add ``N(0, std^2)`` noise to every real box coordinate; no clamping."""
    noise = rng.normal(0.0, std, size=(layout.n_real, 4))
    real = [Element(e.label, tuple(float(v) for v in np.add(e.box, d))) for e, d in zip(layout.real, noise)]
    return Layout(tuple(real) + layout.elements[layout.n_real :], layout.num_classes, layout.canvas, layout.n_real)
