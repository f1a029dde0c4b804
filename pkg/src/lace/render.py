"""Deterministic SVG rendering of layouts."""
from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

from .layout import Layout

PALETTE = (
    "#4e79a7",
    "#f28e2b",
    "#e15759",
    "#76b7b2",
    "#59a14f",
    "#edc948",
    "#b07aa1",
    "#ff9da7",
    "#9c755f",
    "#bab0ac",
)


@dataclass(frozen=True)
class SvgStyle:
    fill_opacity: float = 0.5
    stroke_width: float = 2.0
    background: str = "#ffffff"
    class_names: tuple[str, ...] | None = None


def _fmt(v: float) -> str:
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def render_svg(layout: Layout, style: SvgStyle = SvgStyle()) -> str:
    W, H = layout.canvas
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'  <rect x="0" y="0" width="{W}" height="{H}" fill="{style.background}"/>',
    ]
    for el in layout.real:
        cx, cy, w, h = (min(max(v, 0.0), 1.0) for v in el.box)
        x0 = min(max(cx - w / 2, 0.0), 1.0)
        y0 = min(max(cy - h / 2, 0.0), 1.0)
        x1 = min(max(cx + w / 2, 0.0), 1.0)
        y1 = min(max(cy + h / 2, 0.0), 1.0)
        color = PALETTE[el.label % len(PALETTE)]
        name = str(el.label)
        if style.class_names and el.label < len(style.class_names):
            name = style.class_names[el.label]
        lines.append(
            f'  <rect class="element label-{el.label}" x="{_fmt(x0 * W)}" y="{_fmt(y0 * H)}" '
            f'width="{_fmt((x1 - x0) * W)}" height="{_fmt((y1 - y0) * H)}" fill="{color}" '
            f'fill-opacity="{style.fill_opacity}" stroke="{color}" stroke-width="{style.stroke_width}">'
            f"<title>{escape(name)}</title></rect>"
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
