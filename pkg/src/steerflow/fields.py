"""Field storage, boundary codes and the halo-exchange machinery.

Data blocks of one depth share a stacked ndarray (grids, fields, z, y, x)
including the one-cell halo, so stencils and exchanges run as whole-array
numpy operations.  Exchange plans are precomputed from the topology and
rebuilt only when the structure changes; boundary-condition index lists are
rebuilt when cell types change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .geometry import GridGeometry
from .spacetree import SpaceTree, lebesgue_key
from .topology import TopologyRepo

FIELD_NAMES = ("u", "v", "w", "p", "T")
U, V, W, P, T = range(5)
NFIELDS = 5
ALL_FIELDS = np.arange(NFIELDS)
VEL_FIELDS = np.arange(3)


class CellCode(IntEnum):
    FLUID = 0
    OBSTACLE = 1
    INFLOW = 2
    OUTFLOW = 3
    WALL_NOSLIP = 4
    WALL_SLIP = 5
    TEMP_DIRICHLET = 6


SOLID_CODES = (CellCode.OBSTACLE, CellCode.WALL_NOSLIP, CellCode.TEMP_DIRICHLET)

# face categories for the divergence/gradient closures
FACE_DEAD = 0      # neither side is fluid
FACE_OPEN = 1      # fluid-fluid: flux = mean of both sides
FACE_EXTRAP = 2    # fluid-outflow: flux = fluid-side value, gradient antimirror
FACE_DATA = 3      # fluid-inflow: flux = stored Dirichlet value, closed in the operator
FACE_CLOSED = 4    # fluid-solid/slip: zero flux, gradient mirror


@dataclass(frozen=True)
class CellType:
    """Boundary code plus the parameters that code requires."""

    code: CellCode
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    temperature: float | None = None

    def key(self):
        return (int(self.code), tuple(float(v) for v in self.velocity),
                None if self.temperature is None else float(self.temperature))

    def as_row(self) -> np.ndarray:
        t = np.nan if self.temperature is None else float(self.temperature)
        return np.array([float(self.code), *self.velocity, t], dtype=np.float64)

    @staticmethod
    def from_row(row) -> "CellType":
        code = CellCode(int(row[0]))
        temp = None if np.isnan(row[4]) else float(row[4])
        return CellType(code, (float(row[1]), float(row[2]), float(row[3])), temp)


FLUID_TYPE = CellType(CellCode.FLUID)


class TypeTable:
    """Deduplicated (code, params) rows; cell arrays store row indices."""

    def __init__(self):
        self.rows: list[CellType] = [FLUID_TYPE]
        self._index = {FLUID_TYPE.key(): 0}

    def add(self, ct: CellType) -> int:
        k = ct.key()
        if k not in self._index:
            self._index[k] = len(self.rows)
            self.rows.append(ct)
        return self._index[k]

    def codes(self) -> np.ndarray:
        return np.array([int(r.code) for r in self.rows], dtype=np.int8)

    def as_array(self) -> np.ndarray:
        return np.stack([r.as_row() for r in self.rows])

    @staticmethod
    def from_array(arr) -> "TypeTable":
        t = TypeTable()
        t.rows = [CellType.from_row(r) for r in np.asarray(arr)]
        t._index = {r.key(): i for i, r in enumerate(t.rows)}
        return t


@dataclass
class LevelBlock:
    """All grids of one depth, stacked in curve order."""

    depth: int
    uids: np.ndarray          # (G,) uint64
    paths: list
    leaf: np.ndarray          # (G,) bool
    bboxes: np.ndarray        # (G, 6)
    h: tuple[float, float, float]
    cur: np.ndarray           # (G, 5, Z+2, Y+2, X+2)
    prev: np.ndarray
    tmp: np.ndarray
    ctype: np.ndarray         # (G, Z+2, Y+2, X+2) int32 type-table indices
    row_of: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.uids)


class DomainState:
    """Stacked field state per depth plus cached exchange/boundary machinery."""

    def __init__(self, geom: GridGeometry, tree: SpaceTree, repo: TopologyRepo | None = None):
        self.geom = geom
        self.tree = tree
        self.repo = repo or TopologyRepo(geom=geom)
        if not self.repo.grids:
            self.repo.register_tree(tree)
        self.table = TypeTable()
        self.levels: dict[int, LevelBlock] = {}
        self.halo_noslip: set[int] = set()  # domain faces sealed in the halo
        self._plans: ExchangePlans | None = None
        self._build_levels()

    def _build_levels(self):
        sx, sy, sz = self.geom.s
        by_depth: dict[int, list] = {}
        for node in self.tree.nodes.values():
            by_depth.setdefault(node.uid.depth, []).append(node)
        self.levels.clear()
        for depth, nodes in sorted(by_depth.items()):
            nodes.sort(key=lambda n: lebesgue_key(n.uid))
            G = len(nodes)
            shape = (G, NFIELDS, sz + 2, sy + 2, sx + 2)
            blk = LevelBlock(
                depth=depth,
                uids=np.array([n.uid.value for n in nodes], dtype=np.uint64),
                paths=[n.uid.path for n in nodes],
                leaf=np.array([n.is_leaf for n in nodes], dtype=bool),
                bboxes=np.stack([n.bbox.as_row() for n in nodes]),
                h=self.geom.cell_size(depth),
                cur=np.zeros(shape),
                prev=np.zeros(shape),
                tmp=np.zeros(shape),
                ctype=np.zeros((G, sz + 2, sy + 2, sx + 2), dtype=np.int32),
            )
            blk.row_of = {int(u): i for i, u in enumerate(blk.uids)}
            self.levels[depth] = blk

    @property
    def max_depth(self) -> int:
        return max(self.levels)

    def locate(self, uid_value: int):
        d = (int(uid_value) >> 36) & 0xF
        return d, self.levels[d].row_of[int(uid_value)]

    def total_grids(self) -> int:
        return sum(b.count for b in self.levels.values())

    def leaf_rows(self, depth: int) -> np.ndarray:
        return np.nonzero(self.levels[depth].leaf)[0]

    def cover_rows(self, level: int) -> dict[int, np.ndarray]:
        """Rows of the depth-``level`` composite (that depth plus shallower leaves)."""
        out = {}
        for d in sorted(self.levels):
            if d > level:
                continue
            blk = self.levels[d]
            rows = np.arange(blk.count) if d == level else np.nonzero(blk.leaf)[0]
            if len(rows):
                out[d] = rows
        return out

    def plans(self) -> "ExchangePlans":
        if self._plans is None:
            self._plans = ExchangePlans(self)
        return self._plans

    def invalidate(self):
        self._plans = None


# ---------------------------------------------------------------------------
# exchange machinery
# ---------------------------------------------------------------------------


def _ax(axis: int) -> int:
    """Physical axis (0=x,1=y,2=z) to array dim offset within (z, y, x)."""
    return 2 - axis


class ExchangePlans:
    """Precomputed index plans for halo exchange, restriction and injection.

    Jumps between adjacent depths are exactly one level (balanced tree), so
    every plan entry pairs a depth with itself or its direct coarser parent
    level.
    """

    def __init__(self, dom: DomainState):
        self.dom = dom
        geom = dom.geom
        self.r, self.s = geom.r, geom.s
        repo = dom.repo

        self.same_all: dict = {}   # (d, axis, sign) -> (src_rows, dst_rows)
        self.same_leaf: dict = {}  # both endpoints leaves
        self.mirror: dict = {}     # (d, axis, sign) -> rows
        self.jump_all: dict = {}   # (d, axis, sign, t_off) -> (fine_rows, coarse_rows)
        self.jump_leaf: dict = {}  # fine endpoint is a leaf

        for d in sorted(dom.levels):
            blk = dom.levels[d]
            counts = geom.grids_per_axis(d)
            for axis in range(3):
                for sign in (-1, +1):
                    s_src, s_dst, m_rows = [], [], []
                    groups: dict = {}
                    if counts[axis] == 1:
                        m_rows = list(range(blk.count))
                    else:
                        for row, path in enumerate(blk.paths):
                            coords = geom.path_to_coords(path)
                            c = list(coords)
                            c[axis] += sign
                            if not 0 <= c[axis] < counts[axis]:
                                m_rows.append(row)
                                continue
                            npath = geom.coords_to_path(tuple(c), d)
                            hit = repo._by_path.get(npath)
                            if hit is not None:
                                s_dst.append(row)
                                s_src.append(blk.row_of[hit.uid.value])
                                continue
                            parent = geom.coords_to_path(
                                tuple(x // r for x, r in zip(c, geom.r)), d - 1
                            ) if d > 0 else None
                            cgrid = repo._by_path.get(parent) if parent is not None else None
                            if cgrid is None:
                                m_rows.append(row)
                                continue
                            t_off = tuple(coords[a] % geom.r[a] for a in range(3) if a != axis)
                            crow = dom.levels[d - 1].row_of[cgrid.uid.value]
                            groups.setdefault(t_off, ([], []))
                            groups[t_off][0].append(row)
                            groups[t_off][1].append(crow)
                    key = (d, axis, sign)
                    if s_dst:
                        src = np.array(s_src)
                        dst = np.array(s_dst)
                        self.same_all[key] = (src, dst)
                        both = blk.leaf[src] & blk.leaf[dst]
                        if both.any():
                            self.same_leaf[key] = (src[both], dst[both])
                    if m_rows:
                        self.mirror[key] = np.array(m_rows)
                    for t_off, (frows, crows) in groups.items():
                        frows = np.array(frows)
                        crows = np.array(crows)
                        self.jump_all[(d, axis, sign, t_off)] = (frows, crows)
                        fl = blk.leaf[frows]
                        if fl.any():
                            self.jump_leaf[(d, axis, sign, t_off)] = (frows[fl], crows[fl])

        # restriction groups: depth d children -> depth d-1 parents, per last digit
        self._idx_cache: dict = {}
        self.restrict_groups: dict = {}
        for d in sorted(dom.levels):
            if d == 0 or d - 1 not in dom.levels:
                continue
            blk = dom.levels[d]
            pblk = dom.levels[d - 1]
            groups = {}
            for row, path in enumerate(blk.paths):
                digit = path[-1]
                prow = pblk.row_of[repo._by_path[path[:-1]].uid.value]
                groups.setdefault(digit, ([], []))
                groups[digit][0].append(row)
                groups[digit][1].append(prow)
            self.restrict_groups[d] = {
                dig: (np.array(c), np.array(p)) for dig, (c, p) in groups.items()
            }

    # -- slab/index helpers --------------------------------------------------

    def _face_slices(self, axis: int, sign: int, what: str):
        """3-tuple (z, y, x) slices for halo/boundary-layer slabs along an axis."""
        sl = [slice(None)] * 3
        src = [slice(None)] * 3
        a = _ax(axis)
        if what == "copy":  # neighbour exchange: my halo <- their boundary layer
            sl[a] = slice(0, 1) if sign < 0 else slice(-1, None)
            src[a] = slice(-2, -1) if sign < 0 else slice(1, 2)
        else:  # mirror: my halo <- my own boundary layer
            sl[a] = slice(0, 1) if sign < 0 else slice(-1, None)
            src[a] = slice(1, 2) if sign < 0 else slice(-2, -1)
        return tuple(sl), tuple(src)

    def _jump_indices(self, axis: int, sign: int, t_off):
        """Index vectors (z, y, x) for both sides of a fine/coarse face pair.

        Returns (fine halo dst, coarse interior src) in padded coordinates for
        the injection, and (fine boundary src, coarse halo dst) plus tangential
        reduction factors for the averaging.
        """
        tang = [a for a in range(3) if a != axis]
        fine_face = self.s[axis] if sign > 0 else 1
        fine_halo = self.s[axis] + 1 if sign > 0 else 0
        coarse_face = 1 if sign > 0 else self.s[axis]
        coarse_halo = 0 if sign > 0 else self.s[axis] + 1

        inj_dst = [None, None, None]
        inj_src = [None, None, None]
        avg_src = [None, None, None]
        avg_dst = [None, None, None]
        inj_dst[_ax(axis)] = np.array([fine_halo])
        inj_src[_ax(axis)] = np.array([coarse_face])
        avg_src[_ax(axis)] = np.array([fine_face])
        avg_dst[_ax(axis)] = np.array([coarse_halo])
        for a, off in zip(tang, t_off):
            n, r = self.s[a], self.r[a]
            fine = np.arange(1, n + 1)
            inj_dst[_ax(a)] = fine
            inj_src[_ax(a)] = (off * n + (fine - 1)) // r + 1
            avg_src[_ax(a)] = fine
            avg_dst[_ax(a)] = off * (n // r) + np.arange(1, n // r + 1)
        return inj_dst, inj_src, avg_src, avg_dst, tang

    # -- core operations -------------------------------------------------------

    def _cached_rows(self, key_kind, key, rows):
        cache = self._idx_cache.setdefault((key_kind, key), {})
        if "rows5" not in cache:
            cache["rows5"] = rows[:, None, None, None, None]
        return cache["rows5"]

    def exchange(self, arrays: dict, comps: np.ndarray, level: int | None = None,
                 reduce: str = "mean", mirror_negate=None):
        """Fill halos of the depth-``level`` composite (or the full hierarchy).

        ``arrays`` maps depth -> (G, C, Z+2, Y+2, X+2); ``comps`` indexes C.
        ``level=None`` uses all-grid plans at every depth (the field update
        path, after restriction); an integer restricts sub-level traffic to
        leaves, which is what the multigrid composites need.  ``reduce``
        chooses how fine faces map onto coarse halo cells: block mean for
        field data, corner subsample for integer codes.
        """
        comps = np.asarray(comps)
        cc = comps[:, None, None, None]
        depths = sorted(arrays)
        for axis in range(3):
            for d in depths:
                arr = arrays[d]
                same = self.same_all if (level is None or d == level) else self.same_leaf
                for sign in (-1, +1):
                    key = (d, axis, sign)
                    if key in self.mirror:
                        rows5 = self._cached_rows("mirror", key, self.mirror[key])
                        dsl, ssl = self._face_slices(axis, sign, "mirror")
                        arr[(rows5, cc) + dsl] = arr[(rows5, cc) + ssl]
                        face_id = 2 * axis + (0 if sign < 0 else 1)
                        if mirror_negate is not None and \
                           face_id in self.dom.halo_noslip and len(mirror_negate):
                            neg4 = np.asarray(mirror_negate)[:, None, None, None]
                            arr[(rows5, neg4) + dsl] *= -1.0
                    if key in same:
                        src, dst = same[key]
                        kk = ("same", key, level is None or d == level)
                        cache = self._idx_cache.setdefault(kk, {})
                        if "pair" not in cache:
                            cache["pair"] = (src[:, None, None, None, None],
                                             dst[:, None, None, None, None])
                        src5, dst5 = cache["pair"]
                        dsl, ssl = self._face_slices(axis, sign, "copy")
                        arr[(dst5, cc) + dsl] = arr[(src5, cc) + ssl]
            for d in depths:
                if d - 1 not in arrays:
                    continue
                jumps = self.jump_all if (level is None or d == level) else self.jump_leaf
                farr, carr = arrays[d], arrays[d - 1]
                for (dd, ax, sign, t_off), (frows, crows) in jumps.items():
                    if dd != d or ax != axis:
                        continue
                    inj_dst, inj_src, avg_src, avg_dst, tang = self._jump_indices(ax, sign, t_off)
                    vals = carr[np.ix_(crows, comps, *inj_src)]
                    farr[np.ix_(frows, comps, *inj_dst)] = vals
                    fine = farr[np.ix_(frows, comps, *avg_src)]
                    if reduce == "mean":
                        red = self._block_avg(fine, ax, tang)
                    else:
                        red = self._block_sample(fine, ax, tang)
                    carr[np.ix_(crows, comps, *avg_dst)] = red

    def _block_avg(self, face_vals: np.ndarray, axis: int, tang) -> np.ndarray:
        """Average tangential r-blocks of a face slab (n, C, z', y', x')."""
        out = face_vals
        for a in tang:
            r = self.r[a]
            if r == 1:
                continue
            dim = 2 + _ax(a)
            shp = list(out.shape)
            n = shp[dim] // r
            shp[dim : dim + 1] = [n, r]
            out = out.reshape(shp).mean(axis=dim + 1)
        return out

    def _block_sample(self, face_vals: np.ndarray, axis: int, tang) -> np.ndarray:
        """Corner subsample of tangential r-blocks (type-safe jump reduction)."""
        sl = [slice(None)] * face_vals.ndim
        for a in tang:
            r = self.r[a]
            if r == 1:
                continue
            sl[2 + _ax(a)] = slice(None, None, r)
        return face_vals[tuple(sl)]

    def restrict(self, arrays: dict, comps: np.ndarray):
        """Bottom-up phase: parents take the block-average of their children."""
        comps = np.asarray(comps)
        mx, my, mz = (self.s[a] // self.r[a] for a in range(3))
        for d in sorted(arrays, reverse=True):
            if d == 0 or d - 1 not in arrays:
                continue
            carr, parr = arrays[d], arrays[d - 1]
            for digit, (crows, prows) in self.restrict_groups.get(d, {}).items():
                dx, dy, dz = self.dom.geom.digit_to_xyz(digit)
                child = carr[np.ix_(crows, comps,
                                    np.arange(1, self.s[2] + 1),
                                    np.arange(1, self.s[1] + 1),
                                    np.arange(1, self.s[0] + 1))]
                red = self._full_block_avg(child)
                parr[np.ix_(prows, comps,
                            dz * mz + np.arange(1, mz + 1),
                            dy * my + np.arange(1, my + 1),
                            dx * mx + np.arange(1, mx + 1))] = red

    def _full_block_avg(self, vals: np.ndarray) -> np.ndarray:
        out = vals
        for a in range(3):
            r = self.r[a]
            if r == 1:
                continue
            dim = 2 + _ax(a)
            shp = list(out.shape)
            n = shp[dim] // r
            shp[dim : dim + 1] = [n, r]
            out = out.reshape(shp).mean(axis=dim + 1)
        return out

    def inject_correction(self, arrays: dict, comps: np.ndarray, depth: int):
        """Top-down prolongation: children += piecewise-constant parent slab."""
        comps = np.asarray(comps)
        mx, my, mz = (self.s[a] // self.r[a] for a in range(3))
        carr, parr = arrays[depth], arrays[depth - 1]
        for digit, (crows, prows) in self.restrict_groups.get(depth, {}).items():
            dx, dy, dz = self.dom.geom.digit_to_xyz(digit)
            sub = parr[np.ix_(prows, comps,
                              dz * mz + np.arange(1, mz + 1),
                              dy * my + np.arange(1, my + 1),
                              dx * mx + np.arange(1, mx + 1))]
            up = sub
            for a in range(3):
                r = self.r[a]
                if r == 1:
                    continue
                up = np.repeat(up, r, axis=2 + _ax(a))
            carr[np.ix_(crows, comps,
                        np.arange(1, self.s[2] + 1),
                        np.arange(1, self.s[1] + 1),
                        np.arange(1, self.s[0] + 1))] += up
