"""The neighbourhood server: registry of the logical structure, residency and
adjacency queries, and level-of-detail selection for sliding windows.

Runs as a single authority; compute ranks talk to it through request/reply
calls and never share mutable state with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .geometry import Box, GridGeometry
from .spacetree import LGrid, SpaceTree, Uid, lebesgue_key, uid_decode
from . import windowing

FACE_NAMES = ("west", "east", "south", "north", "bottom", "top")
# face index f: axis f//2, direction -1 if f even else +1


class TopologyError(RuntimeError):
    pass


@dataclass(frozen=True)
class WindowQuery:
    window: Box
    budget: int
    fields: tuple[str, ...] = ("u", "v", "w", "p", "T")

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        bad = set(self.fields) - {"u", "v", "w", "p", "T"}
        if bad:
            raise ValueError(f"unknown fields {sorted(bad)}")


@dataclass
class WindowSelection:
    entries: list  # (uid value, (sx, sy, sz) stride triple)
    level: int
    point_count: int
    stride: int = 1


@dataclass
class TopologyRepo:
    """Authoritative map of grids, children and rank residency."""

    geom: GridGeometry
    grids: dict = field(default_factory=dict)  # uid value -> LGrid
    residency: dict = field(default_factory=dict)  # uid value -> rank
    root: int | None = None
    _by_path: dict = field(default_factory=dict)

    # -- registration ------------------------------------------------------

    def register(self, rank: int, grids):
        """Record ``grids`` (LGrid list) as residing on ``rank``; idempotent."""
        for g in grids:
            if g.uid.rank != rank:
                raise TopologyError(
                    f"uid {g.uid.value:#x} encodes rank {g.uid.rank}, registered by {rank}"
                )
            v = g.uid.value
            old = self.grids.get(v)
            if old is not None:
                same = (old.bbox == g.bbox and old.is_leaf == g.is_leaf
                        and self.residency.get(v) == rank)
                if not same:
                    raise TopologyError(f"conflicting registration for uid {v:#x}")
                continue
            self.grids[v] = g
            self.residency[v] = rank
            self._by_path[g.uid.path] = g
            if g.uid.depth == 0:
                self.root = v
        self._check_children_closed()

    def clear(self):
        self.grids.clear()
        self.residency.clear()
        self._by_path.clear()
        self.root = None

    def register_tree(self, tree: SpaceTree):
        per_rank: dict = {}
        for node in tree.nodes.values():
            per_rank.setdefault(node.uid.rank, []).append(node)
        for rank in sorted(per_rank):
            self.register(rank, per_rank[rank])

    def _check_children_closed(self):
        for g in self.grids.values():
            if g.children is None:
                continue
            for c in g.children:
                if c.value not in self.grids:
                    # tolerated mid-registration; verified again on lookup
                    return

    def locate(self, uid_value: int) -> int:
        try:
            return self.residency[int(uid_value)]
        except KeyError:
            raise TopologyError(f"uid {int(uid_value):#x} not registered") from None

    # -- adjacency ----------------------------------------------------------

    def node(self, uid_value: int) -> LGrid:
        try:
            return self.grids[int(uid_value)]
        except KeyError:
            raise TopologyError(f"uid {int(uid_value):#x} not registered") from None

    def neighbors(self, uid_value: int):
        """All face-adjacent d-grid carriers of ``uid``.

        Returns (uid value, rank, face index, level_delta) tuples; finer
        neighbours are listed individually, so a face against a refined region
        yields one entry per touching child. Face index pairs as (axis*2 +
        (0 west / 1 east)).
        """
        g = self.node(uid_value)
        geom = self.geom
        out = []
        d = g.uid.depth
        coords = geom.path_to_coords(g.uid.path)
        counts = geom.grids_per_axis(d)
        for axis in range(3):
            for sign, face in ((-1, 2 * axis), (+1, 2 * axis + 1)):
                c = list(coords)
                c[axis] += sign
                if not 0 <= c[axis] < counts[axis]:
                    continue  # domain boundary
                # equal-depth candidate
                path = geom.coords_to_path(tuple(c), d)
                hit = self._by_path.get(path)
                if hit is not None and hit.is_leaf:
                    out.append((hit.uid.value, hit.uid.rank, face, 0))
                    continue
                if hit is not None:
                    # refined: children touching my face (opposite side of theirs)
                    for child_uid in self._face_children(hit, 2 * axis + (1 if sign < 0 else 0)):
                        cg = self.grids[child_uid]
                        out.append((child_uid, cg.uid.rank, face, +1))
                    continue
                # coarser: nearest registered ancestor of the neighbour position
                dd = d - 1
                cc = tuple(x // r for x, r in zip(c, geom.r))
                while dd >= 0:
                    p = geom.coords_to_path(cc, dd)
                    anc = self._by_path.get(p)
                    if anc is not None:
                        out.append((anc.uid.value, anc.uid.rank, face, dd - d))
                        break
                    cc = tuple(x // r for x, r in zip(cc, geom.r))
                    dd -= 1
        return out

    def _face_children(self, node: LGrid, face: int):
        """Children of ``node`` whose boxes touch the given face of the node."""
        axis, side = face // 2, face % 2
        want = (self.geom.r[axis] - 1) if side else 0
        picked = []
        for digit, child in enumerate(node.children):
            if self.geom.digit_to_xyz(digit)[axis] == want:
                picked.append(child.value)
        return picked

    # -- sliding window -----------------------------------------------------

    def max_stride(self) -> int:
        return max(self.geom.s)

    def select_window(self, q: WindowQuery) -> WindowSelection:
        """Deepest level the budget allows, then the smallest uniform stride.

        Breadth-first descent from the root: at each depth the candidate cover
        is every data-carrying grid intersecting the window at that depth,
        with childless grids persisting.  Descent continues while some stride
        up to max(s) keeps the next level within budget and the next level
        differs from the current one.
        """
        if self.root is None:
            raise TopologyError("no grids registered")
        root = self.grids[self.root]
        if not root.bbox.intersects(q.window):
            return WindowSelection(entries=[], level=0, point_count=0)

        cover = [root]
        level = 0
        while True:
            nxt = []
            grewn = False
            for g in cover:
                if g.children is None:
                    nxt.append(g)
                    continue
                kids = [self.grids[c.value] for c in g.children
                        if self.grids[c.value].bbox.intersects(q.window)]
                if kids:
                    grewn = True
                    nxt.extend(kids)
                else:
                    nxt.append(g)
            if not grewn:
                break
            slabs = [windowing.window_slab(g.bbox, self.geom.s, q.window) for g in nxt]
            fit = windowing.smallest_fitting_stride(slabs, q.budget, self.max_stride())
            if fit is None or sum(windowing.slab_point_count(s) for s in slabs) == 0:
                break
            cover = nxt
            level = level + 1
        return self._finalize_selection(cover, level, q)

    def _finalize_selection(self, cover, level, q: WindowQuery) -> WindowSelection:
        slabs = [windowing.window_slab(g.bbox, self.geom.s, q.window) for g in cover]
        fit = windowing.smallest_fitting_stride(slabs, q.budget, self.max_stride())
        if fit is None:
            return WindowSelection(entries=[], level=level, point_count=0)
        stride, total = fit
        entries = []
        for g, slab in sorted(zip(cover, slabs), key=lambda t: t[0].uid.value):
            if windowing.strided_count(slab, stride) < 1:
                continue
            entries.append((g.uid.value, (stride, stride, stride)))
        return WindowSelection(entries=entries, level=level, point_count=total, stride=stride)
