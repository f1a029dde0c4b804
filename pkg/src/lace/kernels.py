"""Backend selection for the pairwise constraint kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``LACE_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("LACE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "compiled" if _impl is not _pykernels else "python"

local_alignment = _impl.local_alignment
global_alignment = _impl.global_alignment
overlap = _impl.overlap
iou_matrix = _impl.iou_matrix
exact_alignment_mask = _pykernels.exact_alignment_mask
threshold_alignment_mask = _pykernels.threshold_alignment_mask


def get_backend(name: str):
    """Return the kernel module for ``"python"`` or ``"compiled"``."""
    if name == "python":
        return _pykernels
    if name == "compiled":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
