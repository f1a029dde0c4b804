"""Newline-delimited JSON corpora."""
from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .denoiser import atomic_write_bytes
from .layout import DEFAULT_MAX_LEN, InvalidLabelError, Layout, LayoutError

log = logging.getLogger(__name__)


class EmptyCorpusError(ValueError):
    pass


@dataclass
class CorpusStats:
    count: int = 0
    class_histogram: dict[int, int] = field(default_factory=dict)
    length_histogram: dict[int, int] = field(default_factory=dict)
    dropped: int = 0
    skipped_lines: list[int] = field(default_factory=list)
    drop_reasons: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "class_histogram": {str(k): v for k, v in sorted(self.class_histogram.items())},
            "length_histogram": {str(k): v for k, v in sorted(self.length_histogram.items())},
            "dropped": self.dropped,
            "skipped_lines": self.skipped_lines,
            "drop_reasons": self.drop_reasons,
        }


def parse_lines(
    lines: Iterable[str],
    num_classes: int,
    max_len: int = DEFAULT_MAX_LEN,
    eps_geom: float | None = 0.0,
) -> tuple[list[Layout], CorpusStats]:
    stats = CorpusStats()
    classes: Counter = Counter()
    lengths: Counter = Counter()
    reasons: Counter = Counter()
    layouts = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            log.warning("line %d: malformed JSON (%s); skipped", lineno, exc.msg)
            stats.skipped_lines.append(lineno)
            continue
        n_el = len(obj.get("elements", [])) if isinstance(obj, dict) else 0
        if n_el > max_len:
            reasons["too_many_elements"] += 1
            continue
        if n_el == 0:
            reasons["no_elements"] += 1
            continue
        try:
            lay = Layout.from_json(obj, num_classes, max_len, eps_geom)
        except InvalidLabelError as exc:
            log.warning("line %d: %s; dropped", lineno, exc)
            reasons["invalid_label"] += 1
            continue
        except (LayoutError, ValueError, TypeError, AttributeError) as exc:
            log.warning("line %d: %s; dropped", lineno, exc)
            reasons["invalid_layout"] += 1
            continue
        layouts.append(lay)
        lengths[lay.n_real] += 1
        classes.update(e.label for e in lay.real)
    stats.count = len(layouts)
    stats.dropped = sum(reasons.values())
    stats.drop_reasons = dict(reasons)
    stats.class_histogram = dict(classes)
    stats.length_histogram = dict(lengths)
    return layouts, stats


def ingest(
    path: str | os.PathLike,
    num_classes: int,
    max_len: int = DEFAULT_MAX_LEN,
    eps_geom: float | None = 0.0,
) -> tuple[list[Layout], CorpusStats]:
    """Read, validate and pad a JSONL corpus; raises on an empty result."""
    with open(path, encoding="utf-8") as fh:
        layouts, stats = parse_lines(fh, num_classes, max_len, eps_geom)
    if not layouts:
        raise EmptyCorpusError(f"{path}: no usable layouts")
    return layouts, stats


def write_corpus(layouts: Sequence[Layout], path: str | os.PathLike) -> None:
    text = "".join(lay.dumps() + "\n" for lay in layouts)
    atomic_write_bytes(path, text.encode("utf-8"))


def infer_num_classes(path: str | os.PathLike) -> int:
    """Smallest class count that covers every label in the file."""
    top = -1
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            try:
                obj = json.loads(line)
                top = max([top] + [int(e["label"]) for e in obj["elements"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                continue
    if top < 0:
        raise EmptyCorpusError(f"{path}: no labelled elements")
    return top + 1
