"""Stamping boundary layouts and initial conditions onto a domain.

Cell types are stamped geometrically on every depth (each grid evaluates the
predicates at its own cell centres); the type exchange then rebuilds coarse
levels with the any-child-fluid aperture rule and fills halos.
"""

from __future__ import annotations

import numpy as np

from .fields import CellCode, CellType, DomainState
from .geometry import Box

FACE_OF_NAME = {"west": 0, "east": 1, "south": 2, "north": 3, "bottom": 4, "top": 5}


def cell_centers(blk, rows=None):
    """Cell-centre coordinates (n, sz, sy, sx, 3) for the given rows."""
    rows = np.arange(blk.count) if rows is None else rows
    bb = blk.bboxes[rows]
    lo = bb[:, :3]
    hi = bb[:, 3:]
    shape = blk.ctype.shape[1:]  # padded
    sz, sy, sx = shape[0] - 2, shape[1] - 2, shape[2] - 2
    out = np.empty((len(rows), sz, sy, sx, 3))
    for a, n in ((0, sx), (1, sy), (2, sz)):
        idx = (np.arange(n) + 0.5) / n
        coord = lo[:, a, None] + idx[None, :] * (hi[:, a] - lo[:, a])[:, None]
        if a == 0:
            out[..., 0] = coord[:, None, None, :]
        elif a == 1:
            out[..., 1] = coord[:, None, :, None]
        else:
            out[..., 2] = coord[:, :, None, None]
    return out


def stamp_where(dom: DomainState, predicate, ct: CellType):
    """Set the type of every interior cell whose centre satisfies the predicate."""
    idx = dom.table.add(ct)
    for blk in dom.levels.values():
        ctr = cell_centers(blk)
        mask = predicate(ctr[..., 0], ctr[..., 1], ctr[..., 2])
        blk.ctype[:, 1:-1, 1:-1, 1:-1][mask] = idx


def stamp_box(dom: DomainState, box: Box, ct: CellType):
    lo, hi = box.lo, box.hi
    stamp_where(dom, lambda x, y, z: (x >= lo[0]) & (x <= hi[0])
                & (y >= lo[1]) & (y <= hi[1]) & (z >= lo[2]) & (z <= hi[2]), ct)


def stamp_cylinder(dom: DomainState, center, radius: float, ct: CellType, axis: int = 2):
    cx, cy = [center[a] for a in range(3) if a != axis][:2]
    if axis == 2:
        pred = lambda x, y, z: (x - cx) ** 2 + (y - cy) ** 2 <= radius ** 2
    elif axis == 1:
        pred = lambda x, y, z: (x - cx) ** 2 + (z - cy) ** 2 <= radius ** 2
    else:
        pred = lambda x, y, z: (y - cx) ** 2 + (z - cy) ** 2 <= radius ** 2
    stamp_where(dom, pred, ct)


def _domain_face_layer(dom: DomainState, blk, face: int):
    """Boolean interior mask of the outermost cell layer on a domain face."""
    axis, side = face // 2, face % 2
    geom = dom.geom
    counts = geom.grids_per_axis(blk.depth)
    shape = blk.ctype.shape
    mask = np.zeros((shape[0], shape[1] - 2, shape[2] - 2, shape[3] - 2), dtype=bool)
    want = counts[axis] - 1 if side else 0
    sl = [slice(None)] * 3
    sl[2 - axis] = slice(-1, None) if side else slice(0, 1)
    for row, path in enumerate(blk.paths):
        if geom.path_to_coords(path)[axis] == want:
            mask[(row,) + tuple(sl)] = True
    return mask


def stamp_face(dom: DomainState, face, ct_or_fn):
    """Stamp a domain-boundary cell layer; ``ct_or_fn`` is a CellType or a
    callable mapping cell-centre coordinates (x, y, z arrays) to a CellType per
    cell (used for inflow profiles)."""
    face = FACE_OF_NAME[face] if isinstance(face, str) else int(face)
    for blk in dom.levels.values():
        mask = _domain_face_layer(dom, blk, face)
        if not mask.any():
            continue
        if callable(ct_or_fn):
            ctr = cell_centers(blk)
            cells = np.nonzero(mask)
            xs, ys, zs = (ctr[..., 0][cells], ctr[..., 1][cells], ctr[..., 2][cells])
            idxs = np.array([dom.table.add(ct_or_fn(x, y, z))
                             for x, y, z in zip(xs, ys, zs)], dtype=np.int32)
            blk.ctype[:, 1:-1, 1:-1, 1:-1][cells] = idxs
        else:
            idx = dom.table.add(ct_or_fn)
            blk.ctype[:, 1:-1, 1:-1, 1:-1][mask] = idx


def seal_domain(dom: DomainState, default: CellType | None = None,
                mode: str = "cells", skip_faces=()):
    """Close the domain boundary.

    ``cells`` stamps the outermost interior layer with a wall type (the wall
    plane then sits at those cell centres); ``halo`` keeps every interior cell
    fluid and enforces no-slip exactly at the domain face through antisymmetric
    velocity halos.
    """
    default = default or CellType(CellCode.WALL_NOSLIP)
    for face in range(6):
        axis = face // 2
        if face in skip_faces:
            continue
        if dom.geom.s[axis] == 1 and dom.geom.r[axis] == 1:
            continue  # degenerate axis stays open (2D scenarios)
        if mode == "halo":
            dom.halo_noslip.add(face)
            continue
        idx = dom.table.add(default)
        for blk in dom.levels.values():
            mask = _domain_face_layer(dom, blk, face)
            inner = blk.ctype[:, 1:-1, 1:-1, 1:-1]
            sel = mask & (inner == 0)
            inner[sel] = idx


def set_uniform_state(dom: DomainState, velocity=(0.0, 0.0, 0.0), pressure=0.0,
                      temperature=293.15):
    for blk in dom.levels.values():
        for comp, val in zip(range(3), velocity):
            blk.cur[:, comp] = val
        blk.cur[:, 3] = pressure
        blk.cur[:, 4] = temperature
        np.copyto(blk.prev, blk.cur)
        np.copyto(blk.tmp, blk.cur)


def add_velocity_field(dom: DomainState, fn):
    """cur velocity += fn(x, y, z) -> (du, dv, dw) evaluated at cell centres."""
    for blk in dom.levels.values():
        ctr = cell_centers(blk)
        du, dv, dw = fn(ctr[..., 0], ctr[..., 1], ctr[..., 2])
        for comp, dval in zip(range(3), (du, dv, dw)):
            if np.isscalar(dval) and dval == 0:
                continue
            blk.cur[:, comp, 1:-1, 1:-1, 1:-1] += dval
