"""Compare the compiled and numpy constraint kernels.

Run with ``python3 benchmarks/bench_kernels.py [--batch 32] [--repeat 20]``.
Prints one line per kernel with the best-of-N time for each backend, the
speed-up, and the largest absolute difference between their outputs.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from lace.kernels import get_backend


def make_inputs(batch: int, max_len: int, seed: int):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.05, 0.4, (batch, max_len))
    h = rng.uniform(0.05, 0.4, (batch, max_len))
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    boxes = np.stack([cx, cy, w, h], axis=-1)
    n_real = rng.integers(2, max_len + 1, batch)
    mask = (rng.uniform(size=(batch, 6, max_len, max_len)) < 0.1).astype(np.float64)
    return boxes, n_real, mask


def _diff(a, b):
    if isinstance(a, tuple):
        return max(_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--max-len", type=int, default=25)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    py = get_backend("python")
    try:
        cc = get_backend("compiled")
    except ImportError:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first")
        return
    boxes, n_real, mask = make_inputs(args.batch, args.max_len, args.seed)
    cases = {
        "local_alignment": lambda k: k.local_alignment(boxes, n_real),
        "global_alignment": lambda k: k.global_alignment(boxes, mask),
        "overlap": lambda k: k.overlap(boxes, n_real),
        "iou_matrix": lambda k: k.iou_matrix(boxes[0], boxes[0]),
    }
    print(f"batch={args.batch} max_len={args.max_len} best of {args.repeat}")
    print(f"{'kernel':<18}{'python ms':>12}{'compiled ms':>14}{'speed-up':>10}{'max |diff|':>14}")
    for name, fn in cases.items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        t_cc = min(timeit.repeat(lambda: fn(cc), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18}{t_py:>12.3f}{t_cc:>14.3f}{t_py / t_cc:>10.1f}{_diff(fn(py), fn(cc)):>14.2e}")


if __name__ == "__main__":
    main()
