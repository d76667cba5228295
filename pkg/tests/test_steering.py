"""Steering commands, session semantics and time-reversible branching."""

import numpy as np
import pytest

from steerflow.ckptio import CheckpointFile, content_hash
from steerflow.fields import CellCode
from steerflow.geometry import Box, GridGeometry
from steerflow.runtime import BoundaryItem, RunSetup, Simulation
from steerflow.solver import FluidProperties, SolverParams
from steerflow.steering import (
    BranchPoint,
    CommandKind,
    Session,
    SteeringCommand,
    SteeringError,
    apply_steering,
    validate_command,
)
from steerflow.topology import WindowQuery

DOMAIN = Box((0.0, 0.0, 0.0), (2.0, 1.0, 0.125))


def channel_setup(tmp_path, d_max=1, dt=2e-3, end=0.04, interval=0.01, name="run.h5"):
    geom = GridGeometry(r=(2, 2, 1), s=(8, 4, 1), d_max=2, domain_box=DOMAIN)
    return RunSetup(
        geometry=geom,
        refine_regions=[(DOMAIN, d_max)],
        props=FluidProperties(t_inf=300.0, mu=5e-3),
        params=SolverParams(dt=dt, eps_mg=1e-6, max_cycles=300),
        boundaries=[
            BoundaryItem(name="in", kind="inflow", faces=("west",),
                         profile="parabolic", u_max=0.5),
            BoundaryItem(name="out", kind="outflow", faces=("east",)),
        ],
        ranks=2, aggregators=1, snapshot_interval=interval, end_time=end,
        output=str(tmp_path / name), initial_temperature=300.0)


def fresh_sim(tmp_path, **kw):
    sim = Simulation(channel_setup(tmp_path, **kw)).build_fresh()
    sim.attach_file()
    return sim


def count_cells(dom, code):
    lut = dom.table.codes()
    total = 0
    for d, blk in dom.levels.items():
        rows = np.nonzero(blk.leaf)[0]
        total += int((lut[blk.ctype[rows][:, 1:-1, 1:-1, 1:-1]] == int(code)).sum())
    return total


class TestCommands:
    def test_add_obstacle_zeroes_velocity(self, tmp_path):
        sim = fresh_sim(tmp_path)
        for _ in range(2):
            sim.step()
        box = Box((0.9, 0.4, 0.0), (1.1, 0.6, 0.125))
        cmd = SteeringCommand(kind=CommandKind.ADD_OBSTACLE, target="blk", box=box)
        apply_steering(sim, cmd)
        assert count_cells(sim.dom, CellCode.OBSTACLE) > 0
        lut = sim.dom.table.codes()
        for d, blk in sim.dom.levels.items():
            obs = lut[blk.ctype[:, 1:-1, 1:-1, 1:-1]] == int(CellCode.OBSTACLE)
            for comp in range(3):
                assert np.all(blk.cur[:, comp, 1:-1, 1:-1, 1:-1][obs] == 0.0)

    def test_move_obstacle_involution(self, tmp_path):
        sim = fresh_sim(tmp_path)
        box = Box((0.9, 0.4, 0.0), (1.1, 0.6, 0.125))
        apply_steering(sim, SteeringCommand(kind=CommandKind.ADD_OBSTACLE,
                                            target="blk", box=box))
        before = {d: blk.ctype.copy() for d, blk in sim.dom.levels.items()}
        apply_steering(sim, SteeringCommand(kind=CommandKind.MOVE_OBSTACLE,
                                            target="blk", delta=(0.25, 0.0, 0.0)))
        moved_any = any(not np.array_equal(before[d], blk.ctype)
                        for d, blk in sim.dom.levels.items())
        assert moved_any
        apply_steering(sim, SteeringCommand(kind=CommandKind.MOVE_OBSTACLE,
                                            target="blk", delta=(-0.25, 0.0, 0.0)))
        for d, blk in sim.dom.levels.items():
            assert np.array_equal(before[d][:, 1:-1, 1:-1, 1:-1],
                                  blk.ctype[:, 1:-1, 1:-1, 1:-1])

    def test_obstacle_on_inflow_rejected(self, tmp_path):
        sim = fresh_sim(tmp_path)
        box = Box((0.0, 0.3, 0.0), (0.3, 0.7, 0.125))
        with pytest.raises(SteeringError, match="inflow"):
            validate_command(sim, SteeringCommand(kind=CommandKind.ADD_OBSTACLE,
                                                  box=box))

    def test_out_of_domain_rejected(self, tmp_path):
        sim = fresh_sim(tmp_path)
        box = Box((1.5, 0.5, 0.0), (2.5, 0.8, 0.125))
        with pytest.raises(SteeringError, match="domain"):
            validate_command(sim, SteeringCommand(kind=CommandKind.ADD_OBSTACLE,
                                                  box=box))

    def test_set_bc_temperature_edit(self, tmp_path):
        sim = fresh_sim(tmp_path)
        box = Box((0.9, 0.4, 0.0), (1.1, 0.6, 0.125))
        sim.object_registry["lamp"] = BoundaryItem(
            name="lamp", kind="temp_dirichlet", box=box, temperature=324.66)
        from steerflow.fields import CellType
        from steerflow.scenarios import stamp_box
        stamp_box(sim.dom, box, CellType(CellCode.TEMP_DIRICHLET,
                                         temperature=324.66))
        sim.solver.invalidate()
        sim.solver.exchange_types()
        apply_steering(sim, SteeringCommand(kind=CommandKind.SET_BC, target="lamp",
                                            temperature=374.66))
        sim.solver.refresh_bc("cur")
        lut = sim.dom.table.codes()
        found = False
        for d, blk in sim.dom.levels.items():
            m = lut[blk.ctype[:, 1:-1, 1:-1, 1:-1]] == int(CellCode.TEMP_DIRICHLET)
            if m.any():
                assert np.allclose(blk.cur[:, 4, 1:-1, 1:-1, 1:-1][m], 374.66)
                found = True
        assert found

    def test_refine_region_leaf_count(self, tmp_path):
        sim = fresh_sim(tmp_path)
        before = len(sim.dom.tree.leaves())
        region = Box((1.0, 0.0, 0.0), (2.0, 1.0, 0.125))
        in_region = sum(1 for n in sim.dom.tree.leaves()
                        if region.contains(n.bbox))
        apply_steering(sim, SteeringCommand(kind=CommandKind.REFINE_REGION,
                                            box=region, depth=2))
        after = len(sim.dom.tree.leaves())
        # uniform depth-1 start: each refined leaf turns into r_x*r_y leaves
        assert after == before + (4 - 1) * in_region

    def test_refine_preserves_uniform_field(self, tmp_path):
        sim = fresh_sim(tmp_path)
        for blk in sim.dom.levels.values():
            blk.cur[:, 4] = 305.0
        region = Box((1.0, 0.0, 0.0), (2.0, 1.0, 0.125))
        apply_steering(sim, SteeringCommand(kind=CommandKind.REFINE_REGION,
                                            box=region, depth=2))
        for blk in sim.dom.levels.values():
            assert np.allclose(blk.cur[:, 4], 305.0)

    def test_coarsen_round_trip_structure(self, tmp_path):
        sim = fresh_sim(tmp_path)
        before = len(sim.dom.tree.leaves())
        region = Box((1.0, 0.0, 0.0), (2.0, 1.0, 0.125))
        apply_steering(sim, SteeringCommand(kind=CommandKind.REFINE_REGION,
                                            box=region, depth=2))
        apply_steering(sim, SteeringCommand(kind=CommandKind.COARSEN_REGION,
                                            box=region, depth=1))
        assert len(sim.dom.tree.leaves()) == before

    def test_stepping_works_after_refine(self, tmp_path):
        sim = fresh_sim(tmp_path)
        sim.step()
        region = Box((1.0, 0.25, 0.0), (1.75, 0.75, 0.125))
        apply_steering(sim, SteeringCommand(kind=CommandKind.REFINE_REGION,
                                            box=region, depth=2))
        t = sim.step()
        assert t > 0
        for d, blk in sim.dom.levels.items():
            assert np.isfinite(blk.cur[:, :, 1:-1, 1:-1, 1:-1]).all()


class TestSession:
    def test_commands_apply_at_step_boundary(self, tmp_path):
        sim = fresh_sim(tmp_path)
        ses = Session(sim)
        box = Box((0.9, 0.4, 0.0), (1.1, 0.6, 0.125))
        out = ses.submit(SteeringCommand(kind=CommandKind.ADD_OBSTACLE,
                                         target="b", box=box))
        assert out["status"] == "queued"
        assert count_cells(sim.dom, CellCode.OBSTACLE) == 0  # not yet applied
        ses.step()
        assert count_cells(sim.dom, CellCode.OBSTACLE) > 0

    def test_rejected_command_reported(self, tmp_path):
        sim = fresh_sim(tmp_path)
        ses = Session(sim)
        out = ses.submit(SteeringCommand(
            kind=CommandKind.ADD_OBSTACLE,
            box=Box((0.0, 0.3, 0.0), (0.2, 0.7, 0.125))))
        assert out["status"] == "rejected"
        assert "inflow" in out["reason"]

    def test_window_query_idempotent_when_paused(self, tmp_path):
        sim = fresh_sim(tmp_path)
        ses = Session(sim)
        ses.step()
        q = WindowQuery(window=DOMAIN, budget=64)
        a = ses.window_query(q)
        b = ses.window_query(q)
        assert a == b

    def test_window_payload_respects_budget(self, tmp_path):
        sim = fresh_sim(tmp_path)
        ses = Session(sim)
        for budget in (1, 7, 33, 129):
            out = ses.window_query(WindowQuery(window=DOMAIN, budget=budget))
            total = sum(np.prod(e["cells"]) for e in out["entries"])
            assert total <= budget


class TestReload:
    def test_reload_latest_state_matches_snapshot(self, tmp_path):
        sim = fresh_sim(tmp_path)
        ses = Session(sim)
        for _ in range(10):
            ses.step()
        t = sim.solver.time
        ref = {d: blk.cur[blk.leaf][:, :, 1:-1, 1:-1, 1:-1].copy()
               for d, blk in sim.dom.levels.items()}
        path = ses.reload(BranchPoint(file=sim.file.path, t=t))
        assert path.endswith(".b1.h5")
        for d, blk in ses.sim.dom.levels.items():
            assert np.array_equal(blk.cur[blk.leaf][:, :, 1:-1, 1:-1, 1:-1], ref[d])

    def test_parent_untouched_and_three_way_branch(self, tmp_path):
        sim = fresh_sim(tmp_path)
        ses = Session(sim)
        for _ in range(10):
            ses.step()
        t0 = CheckpointFile(sim.file.path).list_timesteps()[0]
        parent_path = sim.file.path
        before = content_hash(parent_path)
        paths = []
        for _ in range(3):
            paths.append(ses.reload(BranchPoint(file=parent_path, t=t0)))
        assert content_hash(parent_path) == before
        assert len(set(paths)) == 3
        for p in paths:
            f = CheckpointFile(p)
            assert f.branch_meta() == (parent_path, t0)
            assert f.list_timesteps() == [t0]

    def test_branch_tree_matches_issued_reloads(self, tmp_path):
        sim = fresh_sim(tmp_path)
        ses = Session(sim)
        for _ in range(10):
            ses.step()
        root_path = sim.file.path
        t0 = CheckpointFile(root_path).list_timesteps()[0]
        b1 = ses.reload(BranchPoint(file=root_path, t=t0))
        for _ in range(5):
            ses.step()
        t1 = CheckpointFile(b1).list_timesteps()[-1]
        b2 = ses.reload(BranchPoint(file=b1, t=t1))
        tree = ses.branch_tree()
        edges = {e["file"]: (e["parent"], e["branch_time"]) for e in tree["edges"]}
        assert edges[b1] == (root_path, t0)
        assert edges[b2] == (b1, t1)
        # acyclic by construction: parents precede children in files order
        assert [n["file"] for n in tree["nodes"]].index(root_path) == 0

    def test_missing_snapshot_raises(self, tmp_path):
        sim = fresh_sim(tmp_path)
        ses = Session(sim)
        for _ in range(5):
            ses.step()
        with pytest.raises(SteeringError):
            ses.reload(BranchPoint(file=sim.file.path, t=99.0))

    def test_reload_with_pending_command_diverges(self, tmp_path):
        sim = fresh_sim(tmp_path)
        ses = Session(sim)
        for _ in range(10):
            ses.step()
        t0 = CheckpointFile(sim.file.path).list_timesteps()[0]
        box = Box((0.9, 0.4, 0.0), (1.1, 0.6, 0.125))
        cmd = SteeringCommand(kind=CommandKind.ADD_OBSTACLE, target="b", box=box)
        ses.reload(BranchPoint(file=sim.file.path, t=t0, pending=[cmd]))
        assert count_cells(ses.sim.dom, CellCode.OBSTACLE) > 0
        for _ in range(3):
            ses.step()
        for d, blk in ses.sim.dom.levels.items():
            assert np.isfinite(blk.cur[:, :, 1:-1, 1:-1, 1:-1]).all()
