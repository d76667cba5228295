"""Axis-aligned boxes and the geometry of the hierarchical grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in metres, closed on all sides."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if any(h < l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"box has negative extent: {self.lo} .. {self.hi}")

    @property
    def size(self) -> tuple[float, float, float]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def volume(self) -> float:
        sx, sy, sz = self.size
        return sx * sy * sz

    def intersects(self, other: "Box") -> bool:
        """Positive-volume overlap on every non-degenerate axis; touching does not count."""
        for a in range(3):
            lo = max(self.lo[a], other.lo[a])
            hi = min(self.hi[a], other.hi[a])
            if hi < lo:
                return False
            # degenerate axes (2D scenarios) only need containment
            if hi == lo and self.lo[a] != self.hi[a] and other.lo[a] != other.hi[a]:
                return False
        return True

    def contains(self, other: "Box") -> bool:
        return all(self.lo[a] <= other.lo[a] and other.hi[a] <= self.hi[a] for a in range(3))

    def contains_point(self, p) -> bool:
        return all(self.lo[a] <= p[a] <= self.hi[a] for a in range(3))

    def subbox(self, digit_xyz: tuple[int, int, int], r: tuple[int, int, int]) -> "Box":
        """Exact geometric subdivision cell (ix, iy, iz) of an r_x x r_y x r_z split."""
        lo = []
        hi = []
        for a in range(3):
            w = (self.hi[a] - self.lo[a]) / r[a]
            lo.append(self.lo[a] + digit_xyz[a] * w)
            hi.append(self.lo[a] + (digit_xyz[a] + 1) * w)
        return Box(tuple(lo), tuple(hi))

    def as_row(self) -> np.ndarray:
        """(x0, y0, z0, x1, y1, z1) float64 row, the on-disk layout."""
        return np.array([*self.lo, *self.hi], dtype=np.float64)

    @staticmethod
    def from_row(row) -> "Box":
        row = [float(v) for v in row]
        return Box((row[0], row[1], row[2]), (row[3], row[4], row[5]))


@dataclass(frozen=True)
class GridGeometry:
    """Refinement factors, block size, depth cap and physical extent of the root grid.

    ``r`` is the per-axis subdivision factor applied at every level, ``s`` the
    cell count of one data block.  2D scenarios use r_z == s_z == 1.
    """

    r: tuple[int, int, int]
    s: tuple[int, int, int]
    d_max: int
    domain_box: Box

    def __post_init__(self):
        if self.domain_box.volume == 0.0:
            raise ValueError("domain box has zero volume")
        for a, name in enumerate("xyz"):
            if self.r[a] < 1:
                raise ValueError(f"r_{name} must be >= 1")
            if self.s[a] < 1:
                raise ValueError(f"s_{name} must be >= 1")
            if self.r[a] > 1 and self.s[a] % self.r[a] != 0:
                # parent cells must tile exactly into child blocks for the
                # averaging/injection pair to stay aligned
                raise ValueError(f"s_{name}={self.s[a]} not divisible by r_{name}={self.r[a]}")
        if int(np.prod(self.r)) > 8:
            raise ValueError("refinement factor product must fit a 3-bit path digit")
        if not (0 <= self.d_max <= 12):
            raise ValueError("d_max must lie in [0, 12]")

    @property
    def children_per_grid(self) -> int:
        return self.r[0] * self.r[1] * self.r[2]

    @property
    def cells_per_grid(self) -> int:
        return self.s[0] * self.s[1] * self.s[2]

    @property
    def active_axes(self) -> tuple[int, ...]:
        """Axes that actually carry more than one cell somewhere."""
        return tuple(a for a in range(3) if not (self.r[a] == 1 and self.s[a] == 1))

    def cell_size(self, depth: int) -> tuple[float, float, float]:
        w = self.domain_box.size
        return tuple(w[a] / (self.r[a] ** depth * self.s[a]) for a in range(3))

    def grids_per_axis(self, depth: int) -> tuple[int, int, int]:
        return tuple(self.r[a] ** depth for a in range(3))

    def bbox_of(self, path: tuple[int, ...]) -> Box:
        """Bounding box of the grid reached by following ``path`` from the root."""
        box = self.domain_box
        for digit in path:
            box = box.subbox(self.digit_to_xyz(digit), self.r)
        return box

    def digit_to_xyz(self, digit: int) -> tuple[int, int, int]:
        rx, ry, _ = self.r
        return (digit % rx, (digit // rx) % ry, digit // (rx * ry))

    def xyz_to_digit(self, ix: int, iy: int, iz: int) -> int:
        rx, ry, _ = self.r
        return ix + rx * (iy + ry * iz)

    def path_to_coords(self, path: tuple[int, ...]) -> tuple[int, int, int]:
        """Integer grid coordinates at depth len(path), x-fastest digit convention."""
        cx = cy = cz = 0
        for digit in path:
            dx, dy, dz = self.digit_to_xyz(digit)
            cx = cx * self.r[0] + dx
            cy = cy * self.r[1] + dy
            cz = cz * self.r[2] + dz
        return cx, cy, cz

    def coords_to_path(self, coords: tuple[int, int, int], depth: int) -> tuple[int, ...]:
        cx, cy, cz = coords
        digits = []
        for _ in range(depth):
            digits.append(self.xyz_to_digit(cx % self.r[0], cy % self.r[1], cz % self.r[2]))
            cx //= self.r[0]
            cy //= self.r[1]
            cz //= self.r[2]
        return tuple(reversed(digits))
