import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lace.layout import Layout

settings.register_profile("lace", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lace")


def random_layout_boxes(rng, n, lo=0.05, hi=0.35):
    """Boxes well inside the canvas with generic (tie-free) coordinates."""
    w = rng.uniform(lo, hi, n)
    h = rng.uniform(lo, hi, n)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return np.stack([cx, cy, w, h], axis=1)


def padded(boxes, L=25):
    out = np.zeros((L, 4))
    out[: len(boxes)] = boxes
    return out


def make_layout(items, N=5, L=25, canvas=(1, 1), eps_geom=0.0):
    return Layout.from_elements(items, N, L, canvas, eps_geom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(k, ok, detail)``; fails the test when ``ok`` is False."""

    def record(k: int, ok: bool, detail: str) -> None:
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'} | {detail}"
        _CRITERIA[k] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
