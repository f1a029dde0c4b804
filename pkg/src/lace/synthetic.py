"""Synthetic grid layouts: aligned, non-overlapping, document-like."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import DEFAULT_MAX_LEN, Layout

# text, title, list, table, figure
DEFAULT_LABEL_WEIGHTS = (0.45, 0.15, 0.15, 0.1, 0.15)


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticGridSpec:
    columns: tuple[int, ...] = (1, 2)
    rows: tuple[int, int] = (2, 5)
    num_classes: int = 5
    label_weights: tuple[float, ...] | None = DEFAULT_LABEL_WEIGHTS
    margin: float = 0.08
    gutter: float = 0.03
    min_row_share: float = 0.5  # relative row heights drawn from U[min_row_share, 1]
    canvas: tuple[int, int] = (816, 1056)
    max_len: int = DEFAULT_MAX_LEN
    seed: int = 0

    def validate(self) -> None:
        if not self.columns or any(c not in (1, 2) for c in self.columns):
            raise InfeasibleSpecError("columns must be drawn from {1, 2}")
        lo, hi = self.rows
        if not 1 <= lo <= hi:
            raise InfeasibleSpecError(f"bad rows range {self.rows}")
        if hi * max(self.columns) > self.max_len:
            raise InfeasibleSpecError("grid can exceed the maximum layout length")
        if self.margin < 0 or self.gutter <= 0:
            raise InfeasibleSpecError("margin must be >= 0 and gutter > 0")
        if 2 * self.margin + (hi - 1) * self.gutter >= 1 or 2 * self.margin + (max(self.columns) - 1) * self.gutter >= 1:
            raise InfeasibleSpecError("margins and gutters leave no room for elements")
        if self.label_weights is not None and len(self.label_weights) != self.num_classes:
            raise InfeasibleSpecError("label_weights must have one entry per class")


def _grid(spec: SyntheticGridSpec, rng: np.random.Generator) -> list[tuple[int, tuple[float, float, float, float]]]:
    cols = int(rng.choice(spec.columns))
    rows = int(rng.integers(spec.rows[0], spec.rows[1] + 1))
    usable_w = 1.0 - 2 * spec.margin - (cols - 1) * spec.gutter
    usable_h = 1.0 - 2 * spec.margin - (rows - 1) * spec.gutter
    cw = usable_w / cols
    share = rng.uniform(spec.min_row_share, 1.0, size=rows)
    heights = usable_h * share / share.sum()
    p = None
    if spec.label_weights is not None:
        p = np.asarray(spec.label_weights, dtype=np.float64)
        p = p / p.sum()
    elements = []
    top = spec.margin
    for r in range(rows):
        h = float(heights[r])
        cy = top + h / 2
        for c in range(cols):
            cx = spec.margin + c * (cw + spec.gutter) + cw / 2
            label = int(rng.choice(spec.num_classes, p=p))
            elements.append((label, (cx, cy, cw, h)))
        top += h + spec.gutter
    return elements


def generate_synthetic(spec: SyntheticGridSpec, count: int) -> list[Layout]:
    """``count`` grid layouts; every one has zero alignment and overlap loss."""
    from .constraints import local_alignment_loss, overlap_loss

    spec.validate()
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(count):
        lay = Layout.from_elements(_grid(spec, rng), spec.num_classes, spec.max_len, spec.canvas)
        boxes = lay.boxes()
        if local_alignment_loss(boxes, lay.n_real).value != 0.0 or overlap_loss(boxes, lay.n_real).value != 0.0:
            raise AssertionError("synthetic layout violates its construction guarantee")
        out.append(lay)
    return out
