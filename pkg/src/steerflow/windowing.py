"""Cell-level arithmetic shared by the online and offline sliding-window paths.

Both selection routes (the in-memory topology walk and the checkpoint-file row
walk) must agree bit-for-bit on which cells a window covers and how striding
counts samples, so that math lives here and nowhere else.
"""

from __future__ import annotations

import math

from .geometry import Box


def window_slab(bbox: Box, s: tuple[int, int, int], window: Box):
    """Index ranges (inclusive) of the grid cells whose centres lie in the window.

    Returns ((ax0, ax1), ...) per axis, or None when no centre falls inside.
    """
    out = []
    for a in range(3):
        n = s[a]
        w = (bbox.hi[a] - bbox.lo[a]) / n
        # centre of cell i is lo + (i + .5) w; want window.lo <= centre <= window.hi
        i0 = math.ceil((window.lo[a] - bbox.lo[a]) / w - 0.5)
        i1 = math.floor((window.hi[a] - bbox.lo[a]) / w - 0.5)
        i0 = max(i0, 0)
        i1 = min(i1, n - 1)
        if i1 < i0:
            return None
        out.append((i0, i1))
    return tuple(out)


def slab_point_count(slab) -> int:
    if slab is None:
        return 0
    n = 1
    for a0, a1 in slab:
        n *= a1 - a0 + 1
    return n


def strided_axis_count(a0: int, a1: int, stride: int) -> int:
    """How many indices in [a0, a1] are multiples of ``stride`` (offset-0 sampling)."""
    if a1 < a0:
        return 0
    return a1 // stride - (a0 + stride - 1) // stride + 1


def strided_count(slab, stride: int) -> int:
    if slab is None:
        return 0
    n = 1
    for a0, a1 in slab:
        n *= max(strided_axis_count(a0, a1, stride), 0)
    return n


def strided_indices(slab, stride: int):
    """Per-axis sampled index lists (ascending) for a slab under a stride."""
    out = []
    for a0, a1 in slab:
        first = (a0 + stride - 1) // stride * stride
        out.append(list(range(first, a1 + 1, stride)))
    return out


def smallest_fitting_stride(slabs, budget: int, max_stride: int):
    """Smallest stride s in [1, max_stride] whose total sample count fits the budget.

    Returns (stride, count) or None when even max_stride overflows.
    """
    for stride in range(1, max_stride + 1):
        total = sum(strided_count(sl, stride) for sl in slabs)
        if total <= budget:
            return stride, total
    return None
