"""Hierarchical block-structured grid: UID codec, tree construction, curve ordering
and the assignment of data blocks to ranks.

Every tree node carries a data block; leaves hold the live solution, interior
nodes hold restricted copies maintained by the bottom-up exchange phase.  A
fully refined depth-6 octree therefore holds (8^7 - 1) / 7 grids, of which
8^6 are leaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, GridGeometry

# bit layout: [63:52] rank, [51:40] local, [39:36] depth, [35:0] path (3 bits/level,
# coarsest level most significant), unused low bits zero
_RANK_BITS = 12
_LOCAL_BITS = 12
_DEPTH_BITS = 4
_PATH_BITS = 36
_MAX_DEPTH = 12

UID_SENTINEL = 0xFFFFFFFFFFFFFFFF

RANK_CAP = 1 << _RANK_BITS
LOCAL_CAP = 1 << _LOCAL_BITS


class UidError(ValueError):
    """Raised for out-of-range fields or decoding of invalid values."""


@dataclass(frozen=True)
class Uid:
    rank: int
    local: int
    depth: int
    path: tuple[int, ...]

    @property
    def value(self) -> int:
        return uid_encode(self.rank, self.local, self.depth, self.path)


def uid_encode(rank: int, local: int, depth: int, path) -> int:
    """Pack the grid identity into 64 bits."""
    path = tuple(path)
    if not 0 <= rank < RANK_CAP:
        raise UidError(f"rank {rank} out of range")
    if not 0 <= local < LOCAL_CAP:
        raise UidError(f"local id {local} out of range")
    if not 0 <= depth <= _MAX_DEPTH:
        raise UidError(f"depth {depth} out of range")
    if len(path) != depth:
        raise UidError(f"path length {len(path)} != depth {depth}")
    value = (rank << 52) | (local << 40) | (depth << 36)
    for level, digit in enumerate(path):
        if not 0 <= digit < 8:
            raise UidError(f"path digit {digit} out of range")
        value |= digit << (33 - 3 * level)
    return value


def uid_decode(value: int) -> Uid:
    """Exact inverse of :func:`uid_encode`."""
    value = int(value)
    if value == UID_SENTINEL:
        raise UidError("sentinel is not a valid uid")
    if not 0 <= value < (1 << 64):
        raise UidError(f"uid {value:#x} does not fit 64 bits")
    rank = value >> 52
    local = (value >> 40) & (LOCAL_CAP - 1)
    depth = (value >> 36) & 0xF
    if depth > _MAX_DEPTH:
        raise UidError(f"decoded depth {depth} exceeds {_MAX_DEPTH}")
    path = tuple((value >> (33 - 3 * level)) & 0x7 for level in range(depth))
    if value & ((1 << (36 - 3 * depth)) - 1):
        raise UidError(f"uid {value:#x} has nonzero bits below its path")
    return Uid(rank, local, depth, path)


def uid_rank(value: int) -> int:
    """Rank field without a full decode (used when scanning dataset rows)."""
    if value == UID_SENTINEL:
        raise UidError("sentinel is not a valid uid")
    return int(value) >> 52


def lebesgue_key(uid_or_path) -> tuple[int, int]:
    """Depth-first space-filling-curve key; total order over all grids.

    Path digits are packed most-significant-first and zero-padded, so a parent
    compares equal to its first descendant on the packed part; the depth
    tiebreak puts the parent first.
    """
    if isinstance(uid_or_path, Uid):
        depth, path = uid_or_path.depth, uid_or_path.path
    elif isinstance(uid_or_path, (int, np.integer)):
        u = uid_decode(uid_or_path)
        depth, path = u.depth, u.path
    else:
        path = tuple(uid_or_path)
        depth = len(path)
    packed = 0
    for level, digit in enumerate(path):
        packed |= digit << (33 - 3 * level)
    return (packed, depth)


@dataclass
class LGrid:
    """One logical grid: structure only, no field data."""

    uid: Uid
    bbox: Box
    children: tuple | None  # tuple of child Uids (all present) or None
    has_dgrid: bool = True

    @property
    def is_leaf(self) -> bool:
        return self.children is None


@dataclass
class SpaceTree:
    """The whole hierarchy, addressed by path (structure) and by uid (identity)."""

    geom: GridGeometry
    nodes: dict  # path tuple -> LGrid
    residency: dict  # uid value -> rank

    @property
    def root(self) -> LGrid:
        return self.nodes[()]

    def leaves(self) -> list:
        out = [n for n in self.nodes.values() if n.is_leaf]
        out.sort(key=lambda n: lebesgue_key(n.uid))
        return out

    def all_grids(self) -> list:
        out = list(self.nodes.values())
        out.sort(key=lambda n: (n.uid.rank, lebesgue_key(n.uid)))
        return out

    def by_uid(self) -> dict:
        return {n.uid.value: n for n in self.nodes.values()}


def build_tree(geom: GridGeometry, refine_regions=()) -> SpaceTree:
    """Grow the hierarchy until every region's requested depth is met.

    A grid subdivides when its box overlaps a region that asks for more depth;
    overlapping requests take the maximum.  The result is 2:1 balanced so face
    neighbours never differ by more than one level.  Grids are initially owned
    by rank 0; use :func:`distribute` to spread them over ranks.
    """
    if geom.domain_box.volume == 0.0:
        raise ValueError("domain box has zero volume")
    for box, depth in refine_regions:
        if depth > geom.d_max:
            raise ValueError(f"refine depth {depth} exceeds d_max {geom.d_max}")

    # depth demanded per node, keyed by path
    def demanded(path: tuple[int, ...], bbox: Box) -> int:
        want = 0
        for box, depth in refine_regions:
            if bbox.intersects(box):
                want = max(want, depth)
        return want

    split: dict = {}

    def grow(path: tuple[int, ...], bbox: Box):
        split[path] = False
        if len(path) >= geom.d_max:
            return
        if demanded(path, bbox) > len(path):
            split[path] = True
            for digit in range(geom.children_per_grid):
                grow(path + (digit,), bbox.subbox(geom.digit_to_xyz(digit), geom.r))

    grow((), geom.domain_box)
    _balance(geom, split)
    return _materialize(geom, split)


def _balance(geom: GridGeometry, split: dict):
    """Enforce the 2:1 face-neighbour constraint by splitting coarse grids."""
    changed = True
    while changed:
        changed = False
        leaves = [p for p, s in split.items() if not s]
        for path in sorted(leaves, key=len, reverse=True):
            d = len(path)
            if d < 2:
                continue
            coords = geom.path_to_coords(path)
            n = geom.grids_per_axis(d)
            for a in range(3):
                for step in (-1, 1):
                    c = list(coords)
                    c[a] += step
                    if not 0 <= c[a] < n[a]:
                        continue
                    # ancestor at depth d-1 of the neighbour position must be split
                    anc = geom.coords_to_path(
                        (c[0] // geom.r[0], c[1] // geom.r[1], c[2] // geom.r[2]), d - 1
                    )
                    probe = anc
                    while probe not in split and probe:
                        probe = probe[:-1]
                    if len(probe) < d - 1 and not split.get(probe, False):
                        # neighbour region is more than one level coarser: split it
                        split[probe] = True
                        for digit in range(geom.children_per_grid):
                            child = probe + (digit,)
                            if child not in split:
                                split[child] = False
                        changed = True
    return split


def _materialize(geom: GridGeometry, split: dict) -> SpaceTree:
    """Turn the split map into LGrid nodes with single-rank uids."""
    paths = sorted(split.keys(), key=lambda p: lebesgue_key(p))
    nodes = {}
    uids = {}
    for seq, path in enumerate(paths):
        uids[path] = Uid(0, seq, len(path), path)
    if len(paths) > LOCAL_CAP:
        raise UidError(f"{len(paths)} grids exceed the per-rank id space; use distribute()")
    for path in paths:
        bbox = geom.bbox_of(path)
        if split[path]:
            children = tuple(uids[path + (d,)] for d in range(geom.children_per_grid))
        else:
            children = None
        nodes[path] = LGrid(uid=uids[path], bbox=bbox, children=children)
    residency = {n.uid.value: 0 for n in nodes.values()}
    return SpaceTree(geom=geom, nodes=nodes, residency=residency)


def partition(leaves, P: int) -> dict:
    """Contiguous curve chunks, sizes differing by at most one, rank 0 first.

    ``leaves`` must already be sorted along the curve; returns uid value -> rank.
    """
    if P < 1:
        raise ValueError("need at least one rank")
    if P > len(leaves):
        raise ValueError(f"{P} ranks but only {len(leaves)} leaves; every rank needs one")
    counts = [len(leaves) // P + (1 if i < len(leaves) % P else 0) for i in range(P)]
    out = {}
    pos = 0
    for rank, c in enumerate(counts):
        for leaf in leaves[pos : pos + c]:
            uid = leaf.uid if isinstance(leaf, LGrid) else leaf
            out[uid.value if isinstance(uid, Uid) else int(uid)] = rank
        pos += c
    return out


def distribute(tree: SpaceTree, P: int) -> SpaceTree:
    """Assign leaves to ranks along the curve and relabel every uid.

    Interior grids live with the rank owning their first descendant leaf, which
    puts the root on rank 0 by construction.  Local ids restart per rank in
    curve order, so the root is always (rank 0, local 0).
    """
    leaves = tree.leaves()
    leaf_ranks = partition(leaves, P)

    geom = tree.geom
    rank_of: dict = {}

    def first_leaf_rank(path) -> int:
        node = tree.nodes[path]
        if node.is_leaf:
            return leaf_ranks[node.uid.value]
        return first_leaf_rank(path + (0,))

    for path, node in tree.nodes.items():
        if node.is_leaf:
            rank_of[path] = leaf_ranks[node.uid.value]
        else:
            rank_of[path] = first_leaf_rank(path)

    # renumber per rank in curve order
    new_uid: dict = {}
    per_rank: dict = {}
    for path in sorted(tree.nodes, key=lambda p: lebesgue_key(p)):
        r = rank_of[path]
        seq = per_rank.get(r, 0)
        if seq >= LOCAL_CAP:
            raise UidError(f"rank {r} exceeds {LOCAL_CAP} grids")
        per_rank[r] = seq + 1
        new_uid[path] = Uid(r, seq, len(path), path)

    nodes = {}
    for path, node in tree.nodes.items():
        children = None
        if node.children is not None:
            children = tuple(new_uid[path + (d,)] for d in range(geom.children_per_grid))
        nodes[path] = LGrid(uid=new_uid[path], bbox=node.bbox, children=children)
    residency = {n.uid.value: n.uid.rank for n in nodes.values()}
    return SpaceTree(geom=geom, nodes=nodes, residency=residency)
