"""Rank emulation and the simulation driver.

Compute ranks are in-process workers executed in rank order; the communicator
validates collective contracts and fixes the reduction order, which keeps
whole runs bitwise deterministic.  The neighbourhood server (topology) and the
collector run as separate logical components over the same process.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ckptio import CheckpointFile, CollectiveMismatch, CommonParams, SnapshotSource
from .fields import CellCode, CellType, DomainState, P as FP, T as FT, U as FU
from .geometry import Box, GridGeometry
from .scenarios import (
    add_velocity_field,
    seal_domain,
    set_uniform_state,
    stamp_box,
    stamp_cylinder,
    stamp_face,
)
from .solver import FlowSolver, FluidProperties, SolverParams
from .spacetree import build_tree, distribute
from .topology import TopologyRepo

log = logging.getLogger(__name__)


class Communicator:
    """In-process stand-in for a P-rank communicator.

    Collective calls funnel through :meth:`check_collective`, which verifies
    every rank announced identical arguments (the collective contract) before
    the operation proceeds.
    """

    def __init__(self, size: int):
        if size < 1:
            raise ValueError("communicator needs at least one rank")
        self.size = int(size)

    def check_collective(self, name: str, args):
        # ranks run in-process, so one materialized argument tuple stands in
        # for all of them; per-rank argument lists are validated explicitly
        if isinstance(args, PerRank):
            first = args.values[0]
            for r, v in enumerate(args.values[1:], start=1):
                if v != first:
                    raise CollectiveMismatch(
                        f"collective {name}: rank {r} disagrees: {v!r} != {first!r}")
        return True

    def allreduce_sum(self, per_rank_values):
        total = 0
        for v in per_rank_values:  # fixed rank order
            total += v
        return total

    def exscan(self, per_rank_values):
        out = []
        acc = 0
        for v in per_rank_values:
            out.append(acc)
            acc += v
        return out


@dataclass
class PerRank:
    """Explicit per-rank argument list for collective validation."""

    values: list


# ---------------------------------------------------------------------------
# scenario assembly
# ---------------------------------------------------------------------------


@dataclass
class BoundaryItem:
    name: str
    kind: str                      # inflow|outflow|wall_noslip|wall_slip|obstacle|temp_dirichlet
    faces: tuple = ()              # domain faces by name
    box: Box | None = None         # volumetric objects
    cylinder: tuple | None = None  # (center xyz, radius)
    velocity: tuple = (0.0, 0.0, 0.0)
    profile: str = "uniform"       # uniform | parabolic (inflow faces)
    u_max: float = 0.0
    temperature: float | None = None


KIND_TO_CODE = {
    "inflow": CellCode.INFLOW,
    "outflow": CellCode.OUTFLOW,
    "wall_noslip": CellCode.WALL_NOSLIP,
    "wall_slip": CellCode.WALL_SLIP,
    "obstacle": CellCode.OBSTACLE,
    "temp_dirichlet": CellCode.TEMP_DIRICHLET,
}


def _face_axis(face_name: str) -> int:
    return {"west": 0, "east": 0, "south": 1, "north": 1, "bottom": 2, "top": 2}[face_name]


def _parabolic_inflow(item: BoundaryItem, domain: Box, face: str):
    """Per-cell Dirichlet velocity along the face-normal, parabolic over the
    first transverse axis (the classic channel profile)."""
    axis = _face_axis(face)
    sign = +1 if face in ("west", "south", "bottom") else -1
    trans = [a for a in range(3) if a != axis and domain.size[a] > 0]
    ta = trans[0]
    lo, hi = domain.lo[ta], domain.hi[ta]

    def make(x, y, z):
        c = (x, y, z)[ta]
        scale = 4.0 * item.u_max * (c - lo) * (hi - c) / (hi - lo) ** 2
        vel = [0.0, 0.0, 0.0]
        vel[axis] = sign * scale
        return CellType(CellCode.INFLOW, tuple(vel), item.temperature)

    return make


def apply_boundaries(dom: DomainState, items, seal_mode: str = "cells") -> dict:
    """Stamp faces first, then objects; returns name -> item for steering."""
    from .scenarios import FACE_OF_NAME
    registry = {}
    claimed = set()
    for item in items:
        code = KIND_TO_CODE[item.kind]
        for face in item.faces:
            claimed.add(FACE_OF_NAME[face])
            if item.kind == "inflow" and item.profile == "parabolic":
                stamp_face(dom, face, _parabolic_inflow(item, dom.geom.domain_box, face))
            else:
                vel = item.velocity
                if item.kind == "inflow" and item.profile == "uniform" and item.u_max:
                    axis = _face_axis(face)
                    sign = +1 if face in ("west", "south", "bottom") else -1
                    vel = tuple(sign * item.u_max if a == axis else 0.0 for a in range(3))
                stamp_face(dom, face, CellType(code, vel, item.temperature))
        registry[item.name] = item
    seal_domain(dom, mode=seal_mode, skip_faces=claimed if seal_mode == "halo" else ())
    for item in items:
        code = KIND_TO_CODE[item.kind]
        ct = CellType(code, item.velocity, item.temperature)
        if item.box is not None:
            stamp_box(dom, item.box, ct)
        if item.cylinder is not None:
            center, radius = item.cylinder
            stamp_cylinder(dom, center, radius, ct)
    return registry


# ---------------------------------------------------------------------------
# simulation driver
# ---------------------------------------------------------------------------


@dataclass
class RunSetup:
    geometry: GridGeometry
    refine_regions: list = field(default_factory=list)
    props: FluidProperties = field(default_factory=FluidProperties)
    params: SolverParams = field(default_factory=SolverParams)
    boundaries: list = field(default_factory=list)
    ranks: int = 1
    aggregators: int = 1
    snapshot_interval: float = 0.1
    end_time: float = 1.0
    output: str = "run.h5"
    initial_velocity: tuple = (0.0, 0.0, 0.0)
    initial_temperature: float = 293.15
    perturbation: float = 0.0
    inflow_ramp: float = 0.0
    seal_mode: str = "cells"

    def solver_attrs(self) -> dict:
        p = self.params
        return {
            "nu1": p.nu1, "nu2": p.nu2, "omega": p.omega, "eps_mg": p.eps_mg,
            "max_cycles": p.max_cycles, "cfl_limit": p.cfl_limit,
            "convection_blend": p.convection_blend,
            "snapshot_interval": self.snapshot_interval,
            "end_time": self.end_time,
            "perturbation": self.perturbation,
            "inflow_ramp": self.inflow_ramp,
        }


class Simulation:
    """One running (or paused) computation: domain, solver, snapshot schedule."""

    def __init__(self, setup: RunSetup, comm: Communicator | None = None):
        self.setup = setup
        self.comm = comm or Communicator(setup.ranks)
        self.file: CheckpointFile | None = None
        self.object_registry: dict = {}
        self.snap_every = max(1, round(setup.snapshot_interval / setup.params.dt))
        self.dom: DomainState | None = None
        self.solver: FlowSolver | None = None
        self.step_listeners = []

    # -- construction paths -----------------------------------------------------

    def build_fresh(self):
        s = self.setup
        tree = distribute(build_tree(s.geometry, s.refine_regions), s.ranks)
        dom = DomainState(s.geometry, tree)
        set_uniform_state(dom, velocity=s.initial_velocity,
                          temperature=s.initial_temperature)
        self.object_registry = apply_boundaries(dom, s.boundaries, s.seal_mode)
        self._finish_domain(dom)
        if s.perturbation:
            box = s.geometry.domain_box
            amp = s.perturbation

            def kick(x, y, z):
                sx, sy, _ = box.size
                lx = (x - box.lo[0]) / sx
                ly = (y - box.lo[1]) / sy
                return (0.0 * x,
                        amp * (np.sin(2 * np.pi * 3 * lx) * np.sin(np.pi * ly)
                               + np.exp(-((lx - 0.15) ** 2 + (ly - 0.5) ** 2) / 0.02)),
                        0.0 * x)

            add_velocity_field(dom, kick)
        self.solver.refresh_bc("cur")
        self._apply_inflow_ramp()
        return self

    def restore(self, restored, t: float, step: int):
        """Adopt a state read back from a checkpoint file."""
        self.dom = restored
        self.solver = FlowSolver(restored, self.setup.props, self.setup.params)
        self.solver.exchange_types()
        self.solver.time = t
        self.solver.step_count = step
        self.solver.ghost_update()
        return self

    def _finish_domain(self, dom: DomainState):
        self.dom = dom
        self.solver = FlowSolver(dom, self.setup.props, self.setup.params)
        self.solver.exchange_types()

    # -- inflow ramp -------------------------------------------------------------

    def _apply_inflow_ramp(self):
        """Scale inflow Dirichlet velocities by min(t/ramp, 1)."""
        ramp = self.setup.inflow_ramp
        if not ramp:
            return
        scale = min(self.solver.time / ramp, 1.0)
        dom = self.dom
        for d, blk in dom.levels.items():
            lists = self.solver.ops(d).refresh_lists()
            infl, vels, _tv = lists["inflow"]
            g, z, y, x = infl
            for comp in range(3):
                blk.cur[g, np.full_like(g, comp), z, y, x] = scale * vels[:, comp]

    # -- file management -----------------------------------------------------------

    def attach_file(self, path: str | None = None, overwrite: bool = True):
        s = self.setup
        common = CommonParams(
            dt=s.params.dt, r=s.geometry.r, s=s.geometry.s, d_max=s.geometry.d_max,
            domain_box=s.geometry.domain_box, fluid_properties=s.props.as_row(),
            solver_attrs=s.solver_attrs())
        self.file = CheckpointFile.create(path or s.output, common, comm=self.comm,
                                          overwrite=overwrite)
        return self.file

    def adopt_file(self, file: CheckpointFile):
        self.file = file

    def write_snapshot(self):
        if self.file is None:
            return None
        src = SnapshotSource(self.dom)
        stats = self.file.write_snapshot(
            self.solver.time, src, self.comm,
            aggregators=self.setup.aggregators, step=self.solver.step_count)
        return stats

    # -- stepping ----------------------------------------------------------------------

    def step(self):
        if self.setup.inflow_ramp:
            self._apply_inflow_ramp()
        t = self.solver.time_step()
        if self.setup.inflow_ramp:
            self._apply_inflow_ramp()
        for fn in list(self.step_listeners):
            fn(self.solver.step_count, t)
        return t

    def run_to(self, end_time: float | None = None, on_snapshot=None):
        """Step until end_time, writing snapshots on the configured interval."""
        end = self.setup.end_time if end_time is None else end_time
        wrote = []
        while self.solver.time < end - 1e-12:
            self.step()
            if self.solver.step_count % self.snap_every == 0 or \
               self.solver.time >= end - 1e-12:
                stats = self.write_snapshot()
                if stats is not None:
                    wrote.append((self.solver.time, stats))
                    if on_snapshot:
                        on_snapshot(self.solver.time, stats)
        return wrote


def simulation_from_file(path: str, t: float, setup_overrides: dict | None = None,
                         ranks: int | None = None, boundaries=None) -> Simulation:
    """Reconstruct a Simulation from a checkpoint snapshot.

    Geometry, fluid properties and solver parameters come from the file's
    common group, so a bare resume reproduces the original run exactly.
    """
    f = CheckpointFile(path)
    common = f.common()
    attrs = common.solver_attrs
    props = FluidProperties.from_row(common.fluid_properties)
    params = SolverParams(
        dt=common.dt,
        nu1=int(attrs.get("nu1", 2)), nu2=int(attrs.get("nu2", 2)),
        omega=float(attrs.get("omega", 0.8)), eps_mg=float(attrs.get("eps_mg", 1e-6)),
        max_cycles=int(attrs.get("max_cycles", 400)),
        cfl_limit=float(attrs.get("cfl_limit", 1.0)),
        convection_blend=float(attrs.get("convection_blend", 0.0)))
    geometry = common.geometry()
    setup = RunSetup(
        geometry=geometry, props=props, params=params,
        snapshot_interval=float(attrs.get("snapshot_interval", 0.1)),
        end_time=float(attrs.get("end_time", t)),
        perturbation=float(attrs.get("perturbation", 0.0)),
        inflow_ramp=float(attrs.get("inflow_ramp", 0.0)),
        ranks=ranks or 1, output=path)
    if setup_overrides:
        for k, v in setup_overrides.items():
            setattr(setup, k, v)
    comm = Communicator(setup.ranks)
    restored = f.read_snapshot(t, comm)
    sim = Simulation(setup, comm)
    sim.adopt_file(f)
    sim.restore(restored.dom, restored.time, max(restored.step, 0))
    if boundaries:
        # steering needs object geometry; cell types already come from the file
        sim.object_registry = {b.name: b for b in boundaries}
        sim.setup.boundaries = list(boundaries)
    return sim
