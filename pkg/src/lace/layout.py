"""Layout data model and conversion to/from the continuous diffusion state.

A layout of ``n_real`` labelled boxes is padded to a fixed length ``L`` with
padding elements (class ``N``, zero box). Each row of the diffusion state is
an ``N + 1`` label block followed by the box ``(cx, cy, w, h)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_MAX_LEN = 25
EDGE_NAMES = ("L", "XC", "R", "T", "YC", "B")


class LayoutError(ValueError):
    """Raised for layouts that violate the data model."""


class InvalidLabelError(LayoutError):
    pass


@dataclass(frozen=True)
class Element:
    label: int
    box: tuple[float, float, float, float]

    @property
    def is_padding_box(self) -> bool:
        return all(v == 0.0 for v in self.box)


@dataclass(frozen=True)
class BoxEdges:
    left: float
    xcenter: float
    right: float
    top: float
    ycenter: float
    bottom: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.left, self.xcenter, self.right, self.top, self.ycenter, self.bottom)


@dataclass(frozen=True)
class Layout:
    """A padded layout.

    ``elements`` always has exactly ``max_len`` entries; the first ``n_real``
    are real, the rest padding.
    """

    elements: tuple[Element, ...]
    num_classes: int
    canvas: tuple[int, int] = (1, 1)
    n_real: int = field(default=-1)

    def __post_init__(self):
        if self.n_real < 0:
            n = sum(1 for e in self.elements if e.label != self.num_classes)
            object.__setattr__(self, "n_real", n)

    @property
    def max_len(self) -> int:
        return len(self.elements)

    @property
    def real(self) -> tuple[Element, ...]:
        return self.elements[: self.n_real]

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.elements], dtype=np.int64)

    def boxes(self) -> np.ndarray:
        return np.array([e.box for e in self.elements], dtype=np.float64).reshape(-1, 4)

    @classmethod
    def from_elements(
        cls,
        elements: Iterable[tuple[int, Sequence[float]] | Element],
        num_classes: int,
        max_len: int = DEFAULT_MAX_LEN,
        canvas: tuple[int, int] = (1, 1),
        eps_geom: float | None = 0.0,
    ) -> "Layout":
        """Build and pad a clean layout, validating every real element.

        Pass ``eps_geom=None`` to skip the on-canvas extent check (permissive
        ingestion).
        """
        real = []
        for item in elements:
            el = item if isinstance(item, Element) else Element(int(item[0]), tuple(float(v) for v in item[1]))
            _validate_clean(el, num_classes, eps_geom)
            real.append(el)
        if len(real) > max_len:
            raise LayoutError(f"{len(real)} elements exceed max length {max_len}")
        if canvas[0] <= 0 or canvas[1] <= 0:
            raise LayoutError(f"canvas must be positive, got {canvas}")
        pad = Element(num_classes, (0.0, 0.0, 0.0, 0.0))
        padded = tuple(real) + (pad,) * (max_len - len(real))
        return cls(padded, num_classes, (int(canvas[0]), int(canvas[1])), len(real))

    def to_json(self) -> dict:
        return {
            "canvas": list(self.canvas),
            "elements": [{"label": e.label, "box": list(e.box)} for e in self.real],
        }

    @classmethod
    def from_json(
        cls,
        obj: dict,
        num_classes: int,
        max_len: int = DEFAULT_MAX_LEN,
        eps_geom: float | None = 0.0,
    ) -> "Layout":
        try:
            canvas = tuple(int(v) for v in obj.get("canvas", (1, 1)))
            items = [(int(e["label"]), e["box"]) for e in obj["elements"]]
        except (KeyError, TypeError) as exc:
            raise LayoutError(f"malformed layout object: {exc}") from None
        for _, box in items:
            if len(box) != 4:
                raise LayoutError(f"box must have 4 values, got {box!r}")
        return cls.from_elements(items, num_classes, max_len, canvas, eps_geom)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))


def _validate_clean(el: Element, num_classes: int, eps_geom: float | None) -> None:
    if not 0 <= el.label <= num_classes:
        raise InvalidLabelError(f"label {el.label} outside 0..{num_classes}")
    if el.label == num_classes:
        raise InvalidLabelError("padding class cannot appear among real elements")
    cx, cy, w, h = el.box
    if not all(np.isfinite(el.box)):
        raise LayoutError(f"non-finite box {el.box}")
    if not all(0.0 <= v <= 1.0 for v in el.box):
        raise LayoutError(f"box {el.box} has components outside [0, 1]")
    if eps_geom is not None:
        if cx - w / 2 < -eps_geom or cx + w / 2 > 1 + eps_geom:
            raise LayoutError(f"box {el.box} extends past the canvas horizontally")
        if cy - h / 2 < -eps_geom or cy + h / 2 > 1 + eps_geom:
            raise LayoutError(f"box {el.box} extends past the canvas vertically")


@dataclass(frozen=True)
class StateVector:
    """``L x (N + 5)`` diffusion state at a given timestep."""

    values: np.ndarray
    timestep: int = 0

    @property
    def num_classes(self) -> int:
        return self.values.shape[-1] - 5


def encode_layout(layout: Layout) -> StateVector:
    n = layout.num_classes
    rows = np.zeros((layout.max_len, n + 5), dtype=np.float64)
    for i, el in enumerate(layout.elements):
        if not 0 <= el.label <= n:
            raise InvalidLabelError(f"label {el.label} outside 0..{n}")
        rows[i, el.label] = 1.0
        if el.label != n:
            rows[i, n + 1 :] = el.box
    return StateVector(rows, 0)


def decode_state(values: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised decode of ``(..., L, N + 5)`` states into labels and clamped boxes.

    Padding rows get zero boxes. ``np.argmax`` returns the first maximum, which
    gives the lowest-index tie-break.
    """
    labels = np.argmax(values[..., : num_classes + 1], axis=-1)
    boxes = np.clip(values[..., num_classes + 1 :], 0.0, 1.0)
    boxes = np.where((labels == num_classes)[..., None], 0.0, boxes)
    return labels, boxes


def decode_layout(state: StateVector | np.ndarray, canvas: tuple[int, int] = (1, 1)) -> Layout:
    values = state.values if isinstance(state, StateVector) else np.asarray(state)
    n = values.shape[-1] - 5
    labels, boxes = decode_state(values, n)
    real = [Element(int(c), tuple(float(v) for v in b)) for c, b in zip(labels, boxes) if c != n]
    pad = Element(n, (0.0, 0.0, 0.0, 0.0))
    elements = tuple(real) + (pad,) * (len(labels) - len(real))
    return Layout(elements, n, (int(canvas[0]), int(canvas[1])), len(real))


def layouts_to_arrays(layouts: Sequence[Layout]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack layouts into ``(labels[M, L], boxes[M, L, 4], n_real[M])``.

    Real elements always come first, so ``n_real`` also marks the padding start.
    """
    labels = np.stack([lay.labels() for lay in layouts])
    boxes = np.stack([lay.boxes() for lay in layouts])
    n_real = np.array([lay.n_real for lay in layouts], dtype=np.int64)
    return labels, boxes, n_real


def encode_batch(layouts: Sequence[Layout]) -> np.ndarray:
    return np.stack([encode_layout(lay).values for lay in layouts])


def box_to_edges(box: Sequence[float]) -> BoxEdges:
    cx, cy, w, h = box
    return BoxEdges(cx - w / 2, cx, cx + w / 2, cy - h / 2, cy, cy + h / 2)


def edges_to_box(edges: BoxEdges) -> tuple[float, float, float, float]:
    return (edges.xcenter, edges.ycenter, edges.right - edges.left, edges.bottom - edges.top)


# d(edges)/d(box): rows L, XC, R, T, YC, B; columns cx, cy, w, h.
EDGE_JACOBIAN = np.array(
    [
        [1.0, 0.0, -0.5, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 0.5, 0.0],
        [0.0, 1.0, 0.0, -0.5],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.5],
    ]
)


def boxes_to_edges(boxes: np.ndarray) -> np.ndarray:
    """``(..., 4)`` boxes to ``(..., 6)`` edges in the L, XC, R, T, YC, B order."""
    cx, cy, w, h = np.moveaxis(np.asarray(boxes, dtype=np.float64), -1, 0)
    return np.stack([cx - w / 2, cx, cx + w / 2, cy - h / 2, cy, cy + h / 2], axis=-1)
