"""Runtime mutation of a simulation and time-reversible branching.

Commands queue on the session and apply only at step boundaries, so the field
state between step events is a pure function of (snapshot, command sequence).
Reloading a checkpoint opens a branch file seeded with the chosen snapshot;
ancestor files are never written again.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .ckptio import CheckpointFile  # noqa: F401  (re-exported for callers)
from .fields import CellCode, CellType, DomainState
from .geometry import Box
from .runtime import Simulation, simulation_from_file
from .scenarios import stamp_box, stamp_cylinder
from .spacetree import build_tree, distribute, lebesgue_key
from .topology import TopologyRepo, WindowQuery

log = logging.getLogger(__name__)


class SteeringError(RuntimeError):
    pass


class CommandKind(str, Enum):
    SET_BC = "set_bc"
    MOVE_OBSTACLE = "move_obstacle"
    ADD_OBSTACLE = "add_obstacle"
    REFINE_REGION = "refine_region"
    COARSEN_REGION = "coarsen_region"


@dataclass
class SteeringCommand:
    kind: CommandKind
    target: str | None = None          # object name, or None for a raw region
    box: Box | None = None
    cylinder: tuple | None = None      # (center, radius)
    delta: tuple = (0.0, 0.0, 0.0)     # MOVE_OBSTACLE displacement
    velocity: tuple | None = None      # SET_BC
    temperature: float | None = None   # SET_BC
    depth: int | None = None           # REFINE/COARSEN target depth

    @staticmethod
    def from_json(msg: dict) -> "SteeringCommand":
        kind = CommandKind(msg["kind"])
        box = Box.from_row(msg["box"]) if "box" in msg else None
        cyl = None
        if "cylinder" in msg:
            c = msg["cylinder"]
            cyl = (tuple(c["center"]), float(c["radius"]))
        return SteeringCommand(
            kind=kind, target=msg.get("target"), box=box, cylinder=cyl,
            delta=tuple(msg.get("delta", (0.0, 0.0, 0.0))),
            velocity=tuple(msg["velocity"]) if "velocity" in msg else None,
            temperature=msg.get("temperature"),
            depth=msg.get("depth"))


@dataclass
class BranchPoint:
    file: str
    t: float
    pending: list = field(default_factory=list)


def validate_command(sim: Simulation, cmd: SteeringCommand):
    dom = sim.dom
    domain = dom.geom.domain_box
    region = cmd.box
    if cmd.kind == CommandKind.MOVE_OBSTACLE:
        item = sim.object_registry.get(cmd.target)
        if item is None:
            raise SteeringError(f"unknown object {cmd.target!r}")
        region = _moved_region(item, cmd.delta)
    if region is not None and not domain.contains(region):
        raise SteeringError(f"region {region} leaves the domain")
    if cmd.cylinder is not None:
        center, radius = cmd.cylinder
        lo = tuple(c - radius for c in center[:2]) + (domain.lo[2],)
        hi = tuple(c + radius for c in center[:2]) + (domain.hi[2],)
        if not domain.contains(Box(lo, hi)):
            raise SteeringError("cylinder leaves the domain")
    if cmd.kind in (CommandKind.ADD_OBSTACLE, CommandKind.MOVE_OBSTACLE):
        footprint = region or _cyl_box(cmd.cylinder, domain)
        if footprint is not None and _overlaps_inflow(sim, footprint):
            raise SteeringError("obstacle would cover an inflow face")
    if cmd.kind in (CommandKind.REFINE_REGION, CommandKind.COARSEN_REGION):
        if cmd.depth is None or not 0 <= cmd.depth <= dom.geom.d_max:
            raise SteeringError(f"depth {cmd.depth} outside [0, {dom.geom.d_max}]")


def _cyl_box(cyl, domain):
    if cyl is None:
        return None
    center, radius = cyl
    return Box((center[0] - radius, center[1] - radius, domain.lo[2]),
               (center[0] + radius, center[1] + radius, domain.hi[2]))


def _moved_region(item, delta) -> Box:
    if item.box is not None:
        return Box(tuple(l + d for l, d in zip(item.box.lo, delta)),
                   tuple(h + d for h, d in zip(item.box.hi, delta)))
    center, radius = item.cylinder
    moved = tuple(c + d for c, d in zip(center, delta))
    return Box((moved[0] - radius, moved[1] - radius, 0.0),
               (moved[0] + radius, moved[1] + radius, 0.0))


def _overlaps_inflow(sim: Simulation, region: Box) -> bool:
    code_lut = sim.dom.table.codes()
    from .scenarios import cell_centers
    for blk in sim.dom.levels.values():
        codes = code_lut[blk.ctype[:, 1:-1, 1:-1, 1:-1]]
        infl = codes == int(CellCode.INFLOW)
        if not infl.any():
            continue
        ctr = cell_centers(blk)
        inside = ((ctr[..., 0] >= region.lo[0]) & (ctr[..., 0] <= region.hi[0])
                  & (ctr[..., 1] >= region.lo[1]) & (ctr[..., 1] <= region.hi[1])
                  & (ctr[..., 2] >= region.lo[2]) & (ctr[..., 2] <= region.hi[2]))
        if (infl & inside).any():
            return True
    return False


def apply_steering(sim: Simulation, cmd: SteeringCommand):
    """Apply one validated command at a step boundary."""
    validate_command(sim, cmd)
    if cmd.kind == CommandKind.ADD_OBSTACLE:
        _stamp_obstacle(sim, cmd)
    elif cmd.kind == CommandKind.MOVE_OBSTACLE:
        _move_obstacle(sim, cmd)
    elif cmd.kind == CommandKind.SET_BC:
        _set_bc(sim, cmd)
    elif cmd.kind in (CommandKind.REFINE_REGION, CommandKind.COARSEN_REGION):
        _rebuild_structure(sim, cmd)
    sim.solver.invalidate()
    sim.solver.exchange_types()
    sim.solver.refresh_bc("cur")
    sim.solver.ghost_update()


def _zero_velocity(dom: DomainState, mask_fn):
    from .scenarios import cell_centers
    for blk in dom.levels.values():
        ctr = cell_centers(blk)
        m = mask_fn(ctr[..., 0], ctr[..., 1], ctr[..., 2])
        for comp in range(3):
            inner = blk.cur[:, comp, 1:-1, 1:-1, 1:-1]
            inner[m] = 0.0


def _stamp_obstacle(sim: Simulation, cmd: SteeringCommand):
    ct = CellType(CellCode.OBSTACLE)
    if cmd.box is not None:
        stamp_box(sim.dom, cmd.box, ct)
        lo, hi = cmd.box.lo, cmd.box.hi
        _zero_velocity(sim.dom, lambda x, y, z: (x >= lo[0]) & (x <= hi[0])
                       & (y >= lo[1]) & (y <= hi[1]) & (z >= lo[2]) & (z <= hi[2]))
    if cmd.cylinder is not None:
        center, radius = cmd.cylinder
        stamp_cylinder(sim.dom, center, radius, ct)
        _zero_velocity(sim.dom, lambda x, y, z:
                       (x - center[0]) ** 2 + (y - center[1]) ** 2 <= radius ** 2)
    if cmd.target:
        from .runtime import BoundaryItem
        sim.object_registry[cmd.target] = BoundaryItem(
            name=cmd.target, kind="obstacle", box=cmd.box, cylinder=cmd.cylinder)


def _move_obstacle(sim: Simulation, cmd: SteeringCommand):
    item = sim.object_registry[cmd.target]
    fluid = CellType(CellCode.FLUID)
    # clear the old footprint to fluid with zeroed velocity
    if item.box is not None:
        stamp_box(sim.dom, item.box, fluid)
        lo, hi = item.box.lo, item.box.hi
        _zero_velocity(sim.dom, lambda x, y, z: (x >= lo[0]) & (x <= hi[0])
                       & (y >= lo[1]) & (y <= hi[1]) & (z >= lo[2]) & (z <= hi[2]))
        nbox = _moved_region(item, cmd.delta)
        stamp_box(sim.dom, nbox, CellType(CellCode.OBSTACLE, item.velocity,
                                          item.temperature))
        item.box = nbox
    else:
        center, radius = item.cylinder
        stamp_cylinder(sim.dom, center, radius, fluid)
        _zero_velocity(sim.dom, lambda x, y, z:
                       (x - center[0]) ** 2 + (y - center[1]) ** 2 <= radius ** 2)
        moved = tuple(c + d for c, d in zip(center, cmd.delta))
        stamp_cylinder(sim.dom, moved, radius,
                       CellType(CellCode.OBSTACLE, item.velocity, item.temperature))
        item.cylinder = (moved, radius)


def _set_bc(sim: Simulation, cmd: SteeringCommand):
    """Rewrite parameters (or codes) of cells in the target region/object."""
    if cmd.target and cmd.target in sim.object_registry:
        item = sim.object_registry[cmd.target]
        region = item.box or _cyl_box(item.cylinder, sim.dom.geom.domain_box)
        code = CellCode(KIND_CODE[item.kind])
        temperature = cmd.temperature if cmd.temperature is not None else item.temperature
        velocity = cmd.velocity if cmd.velocity is not None else item.velocity
        ct = CellType(code, tuple(velocity), temperature)
        if item.box is not None:
            stamp_box(sim.dom, item.box, ct)
        else:
            center, radius = item.cylinder
            stamp_cylinder(sim.dom, center, radius, ct)
        item.temperature = temperature
        item.velocity = tuple(velocity)
    elif cmd.box is not None:
        code = CellCode.TEMP_DIRICHLET if cmd.temperature is not None else CellCode.INFLOW
        ct = CellType(code, tuple(cmd.velocity or (0, 0, 0)), cmd.temperature)
        stamp_box(sim.dom, cmd.box, ct)
    else:
        raise SteeringError("set_bc needs a known object or a region box")


KIND_CODE = {
    "inflow": CellCode.INFLOW, "outflow": CellCode.OUTFLOW,
    "wall_noslip": CellCode.WALL_NOSLIP, "wall_slip": CellCode.WALL_SLIP,
    "obstacle": CellCode.OBSTACLE, "temp_dirichlet": CellCode.TEMP_DIRICHLET,
}


def _rebuild_structure(sim: Simulation, cmd: SteeringCommand):
    """Refine or coarsen: rebuild the tree, keep owners, inject parent data."""
    dom = sim.dom
    geom = dom.geom
    old_tree = dom.tree
    regions = []
    for leaf in old_tree.leaves():
        want = leaf.uid.depth
        if cmd.kind == CommandKind.REFINE_REGION and leaf.bbox.intersects(cmd.box):
            want = max(want, cmd.depth)
        if cmd.kind == CommandKind.COARSEN_REGION and cmd.box.contains(leaf.bbox):
            want = min(want, cmd.depth)
        regions.append((leaf.bbox, want))
    new_tree = build_tree(geom, regions)

    # keep grids with their previous owner; new grids follow their ancestor
    old_rank = {path: node.uid.rank for path, node in old_tree.nodes.items()}

    def owner(path):
        probe = path
        while probe not in old_rank and probe:
            probe = probe[:-1]
        return old_rank.get(probe, 0)

    from .spacetree import LGrid, SpaceTree, Uid, LOCAL_CAP

    per_rank: dict = {}
    new_uid = {}
    for path in sorted(new_tree.nodes, key=lambda p: lebesgue_key(p)):
        r = owner(path)
        seq = per_rank.get(r, 0)
        per_rank[r] = seq + 1
        new_uid[path] = Uid(r, seq, len(path), path)
    nodes = {}
    for path, node in new_tree.nodes.items():
        children = None
        if node.children is not None:
            children = tuple(new_uid[path + (d,)]
                             for d in range(geom.children_per_grid))
        nodes[path] = LGrid(uid=new_uid[path], bbox=node.bbox, children=children)
    tree = SpaceTree(geom=geom, nodes=nodes,
                     residency={n.uid.value: n.uid.rank for n in nodes.values()})

    new_dom = DomainState(geom, tree)
    new_dom.table = dom.table

    # copy surviving rows; fill new deeper grids by injecting their ancestor
    for path, node in tree.nodes.items():
        dn, rn = new_dom.locate(node.uid.value)
        nblk = new_dom.levels[dn]
        src_path = path
        while src_path not in old_tree.nodes:
            src_path = src_path[:-1]
        src_node = old_tree.nodes[src_path]
        do, ro = dom.locate(src_node.uid.value)
        oblk = dom.levels[do]
        if src_path == path:
            nblk.cur[rn] = oblk.cur[ro]
            nblk.prev[rn] = oblk.prev[ro]
            nblk.tmp[rn] = oblk.tmp[ro]
            nblk.ctype[rn] = oblk.ctype[ro]
        else:
            _inject_from_ancestor(geom, oblk, ro, nblk, rn, path[len(src_path):])
    sim.dom = new_dom
    sim.solver.dom = new_dom
    repo = TopologyRepo(geom=geom)
    repo.register_tree(tree)
    new_dom.repo = repo


def _inject_from_ancestor(geom, oblk, orow, nblk, nrow, rel_path):
    """Piecewise-constant fill of a new grid from the covering ancestor cells."""
    sx, sy, sz = geom.s
    # index maps from the new grid's cells into the ancestor's cell array
    fx = np.arange(sx) + 0.5
    fy = np.arange(sy) + 0.5
    fz = np.arange(sz) + 0.5
    # walk down the relative path accumulating the offset inside the ancestor
    ox = oy = oz = 0.0
    wx = wy = wz = 1.0
    for digit in rel_path:
        dx, dy, dz = geom.digit_to_xyz(digit)
        wx /= geom.r[0]
        wy /= geom.r[1]
        wz /= geom.r[2]
        ox += dx * wx
        oy += dy * wy
        oz += dz * wz
    mx = np.minimum((np.floor((ox + wx * fx / sx) * sx)).astype(int), sx - 1)
    my = np.minimum((np.floor((oy + wy * fy / sy) * sy)).astype(int), sy - 1)
    mz = np.minimum((np.floor((oz + wz * fz / sz) * sz)).astype(int), sz - 1)
    src = oblk.cur[orow][:, 1:-1, 1:-1, 1:-1]
    take = src[:, mz][:, :, my][:, :, :, mx]
    nblk.cur[nrow, :, 1:-1, 1:-1, 1:-1] = take
    srcp = oblk.prev[orow][:, 1:-1, 1:-1, 1:-1]
    nblk.prev[nrow, :, 1:-1, 1:-1, 1:-1] = srcp[:, mz][:, :, my][:, :, :, mx]
    srct = oblk.tmp[orow][:, 1:-1, 1:-1, 1:-1]
    nblk.tmp[nrow, :, 1:-1, 1:-1, 1:-1] = srct[:, mz][:, :, my][:, :, :, mx]
    srcc = oblk.ctype[orow][1:-1, 1:-1, 1:-1]
    nblk.ctype[nrow, 1:-1, 1:-1, 1:-1] = srcc[mz][:, my][:, :, mx]


# ---------------------------------------------------------------------------
# session: pause/resume, command queue, branching
# ---------------------------------------------------------------------------


class Mode(str, Enum):
    RUNNING = "running"
    PAUSED = "paused"
    RELOADING = "reloading"


class Session:
    """Owns the active simulation, its command queue and the branch tree."""

    def __init__(self, sim: Simulation):
        self.lock = threading.RLock()
        self.sim = sim
        self.mode = Mode.PAUSED
        self.queue: list[SteeringCommand] = []
        self.files: list[str] = []
        if sim.file is not None:
            self.files.append(sim.file.path)
        self.command_log: list = []
        self._branch_seq = 0

    # -- command queue -----------------------------------------------------------

    def submit(self, cmd: SteeringCommand) -> dict:
        with self.lock:
            try:
                validate_command(self.sim, cmd)
            except SteeringError as e:
                return {"status": "rejected", "reason": str(e)}
            self.queue.append(cmd)
            return {"status": "queued"}

    def apply_pending(self):
        with self.lock:
            pending, self.queue = self.queue, []
            for cmd in pending:
                try:
                    apply_steering(self.sim, cmd)
                    self.command_log.append(("applied", cmd))
                except SteeringError as e:
                    self.command_log.append(("rejected", cmd, str(e)))

    # -- stepping -----------------------------------------------------------------

    def step(self):
        with self.lock:
            self.apply_pending()
            t = self.sim.step()
            if self.sim.solver.step_count % self.sim.snap_every == 0 \
               and self.sim.file is not None:
                self.sim.write_snapshot()
            return t

    # -- window queries ---------------------------------------------------------------

    def window_query(self, q: WindowQuery) -> dict:
        """Collector path: select, gather decimated values, frame one response."""
        from .windowing import strided_indices, window_slab, strided_count
        with self.lock:
            repo = self.sim.dom.repo
            sel = repo.select_window(q)
            field_idx = {"u": 0, "v": 1, "w": 2, "p": 3, "T": 4}
            comps = [field_idx[f] for f in q.fields]
            entries = []
            for uid, strides in sel.entries:
                d, r = self.sim.dom.locate(uid)
                blk = self.sim.dom.levels[d]
                node = repo.node(uid)
                slab = window_slab(node.bbox, self.sim.dom.geom.s, q.window)
                xi, yi, zi = strided_indices(slab, strides[0])
                data = blk.cur[r][:, 1:-1, 1:-1, 1:-1]
                block = data[np.ix_(comps, zi, yi, xi)]
                entries.append({
                    "uid": f"{uid:#018x}",
                    "stride": strides[0],
                    "bbox": list(node.bbox.as_row()),
                    "cells": [len(xi), len(yi), len(zi)],
                    "values": np.round(block, 9).ravel().tolist(),
                })
            return {"type": "window_data", "level": sel.level,
                    "point_count": sel.point_count,
                    "fields": list(q.fields), "entries": entries,
                    "step": self.sim.solver.step_count,
                    "t": self.sim.solver.time}

    # -- branching -------------------------------------------------------------------

    def reload(self, bp: BranchPoint) -> str:
        """Open a branch of ``bp.file`` at ``bp.t`` and make it active."""
        with self.lock:
            self.mode = Mode.RELOADING
            parent = CheckpointFile(bp.file)
            if bp.t not in parent.list_timesteps():
                self.mode = Mode.PAUSED
                raise SteeringError(
                    f"{bp.t} not in {bp.file}: {parent.list_timesteps()}")
            self._branch_seq += 1
            base, ext = os.path.splitext(bp.file)
            new_path = f"{base}.b{self._branch_seq}{ext}"
            while os.path.exists(new_path):
                self._branch_seq += 1
                new_path = f"{base}.b{self._branch_seq}{ext}"
            branch = parent.open_branch(bp.t, new_path)
            ranks = self.sim.comm.size
            sim = simulation_from_file(
                branch.path, bp.t, ranks=ranks,
                boundaries=list(self.sim.object_registry.values()))
            sim.setup.aggregators = self.sim.setup.aggregators
            sim.setup.end_time = self.sim.setup.end_time
            self.sim = sim
            self.files.append(branch.path)
            for cmd in bp.pending:
                apply_steering(sim, cmd)
                self.command_log.append(("applied", cmd))
            self.mode = Mode.PAUSED
            return branch.path

    def branch_tree(self) -> dict:
        """Nodes (files with their snapshot labels) and parent edges."""
        nodes = []
        edges = []
        for path in self.files:
            if not os.path.exists(path):
                continue
            f = CheckpointFile(path)
            nodes.append({"file": path, "timesteps": f.list_timesteps(),
                          "active": self.sim.file is not None
                          and path == self.sim.file.path})
            meta = f.branch_meta()
            if meta is not None:
                edges.append({"file": path, "parent": meta[0],
                              "branch_time": meta[1]})
        return {"type": "branches", "nodes": nodes, "edges": edges}
