"""Checkpoint kernel: hyperslabs, round trips, aggregators, branching, labels."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steerflow.ckptio import (
    CheckpointFile,
    CkptError,
    CommonParams,
    Hyperslab,
    SnapshotSource,
    compute_hyperslab,
    content_hash,
    last_write_stats,
)
from steerflow.fields import DomainState, T as FT
from steerflow.geometry import Box, GridGeometry
from steerflow.runtime import Communicator
from steerflow.scenarios import seal_domain, set_uniform_state
from steerflow.spacetree import build_tree, distribute
from steerflow.topology import TopologyRepo, WindowQuery

SQUARE = Box((0.0, 0.0, 0.0), (1.0, 1.0, 0.25))


def make_domain(d_max=2, s=(4, 4, 1), P=2, seed=0, regions=None):
    geom = GridGeometry(r=(2, 2, 1), s=s, d_max=d_max, domain_box=SQUARE)
    tree = distribute(build_tree(geom, regions or [(SQUARE, d_max)]), P)
    dom = DomainState(geom, tree)
    set_uniform_state(dom, temperature=300.0)
    seal_domain(dom)
    rng = np.random.default_rng(seed)
    for blk in dom.levels.values():
        blk.cur[:] = rng.standard_normal(blk.cur.shape)
        blk.prev[:] = rng.standard_normal(blk.cur.shape)
        blk.tmp[:] = rng.standard_normal(blk.cur.shape)
    return dom


def common_for(dom, dt=0.001):
    return CommonParams(dt=dt, r=dom.geom.r, s=dom.geom.s, d_max=dom.geom.d_max,
                        domain_box=dom.geom.domain_box,
                        fluid_properties=np.arange(10.0))


class TestHyperslab:
    def test_prefix_sum(self):
        slabs = compute_hyperslab([3, 5, 2])
        assert [(s.row_offset, s.row_count) for s in slabs] == [(0, 3), (3, 5), (8, 2)]
        assert slabs[0].total_rows == 10

    def test_single_rank(self):
        (s,) = compute_hyperslab([7])
        assert (s.row_offset, s.row_count, s.total_rows) == (0, 7, 7)

    @given(counts=st.lists(st.integers(0, 50), min_size=1, max_size=8))
    @settings(max_examples=200, deadline=None)
    def test_disjoint_covering_property(self, counts):
        slabs = compute_hyperslab(counts)
        seen = []
        for s in slabs:
            seen.extend(range(s.row_offset, s.row_offset + s.row_count))
        assert seen == list(range(sum(counts)))

    def test_slab_bounds_validated(self):
        with pytest.raises(ValueError):
            Hyperslab(5, 6, 10)


class TestCreateFile:
    def test_create_then_empty_timesteps(self, tmp_path):
        dom = make_domain()
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), Communicator(2))
        assert f.list_timesteps() == []

    def test_dt_round_trip_exact(self, tmp_path):
        dom = make_domain()
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom, dt=0.001),
                                  Communicator(2))
        assert f.common().dt == 0.001

    def test_refuses_existing(self, tmp_path):
        dom = make_domain()
        CheckpointFile.create(tmp_path / "a.h5", common_for(dom), Communicator(2))
        with pytest.raises(CkptError):
            CheckpointFile.create(tmp_path / "a.h5", common_for(dom), Communicator(2))
        CheckpointFile.create(tmp_path / "a.h5", common_for(dom), Communicator(2),
                              overwrite=True)

    def test_collective_mismatch(self, tmp_path):
        from steerflow.ckptio import CollectiveMismatch
        from steerflow.runtime import PerRank
        comm = Communicator(2)
        with pytest.raises(CollectiveMismatch):
            comm.check_collective("create_file", PerRank([("a", 1), ("a", 2)]))


class TestWriteRead:
    def test_round_trip_bitwise(self, tmp_path):
        dom = make_domain(P=2, seed=5)
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        f.write_snapshot(0.1, SnapshotSource(dom), comm)
        back = f.read_snapshot(0.1, comm)
        for d, blk in dom.levels.items():
            rblk = back.dom.levels[d]
            assert np.array_equal(blk.cur[:, :, 1:-1, 1:-1, 1:-1],
                                  rblk.cur[:, :, 1:-1, 1:-1, 1:-1])
            assert np.array_equal(blk.prev[:, :, 1:-1, 1:-1, 1:-1],
                                  rblk.prev[:, :, 1:-1, 1:-1, 1:-1])
            assert np.array_equal(blk.tmp[:, :, 1:-1, 1:-1, 1:-1],
                                  rblk.tmp[:, :, 1:-1, 1:-1, 1:-1])
            assert np.array_equal(blk.ctype[:, 1:-1, 1:-1, 1:-1],
                                  rblk.ctype[:, 1:-1, 1:-1, 1:-1])
            assert np.array_equal(blk.uids, rblk.uids)
            assert np.array_equal(blk.bboxes, rblk.bboxes)

    def test_row_zero_is_root(self, tmp_path):
        import h5py
        dom = make_domain(P=4)
        comm = Communicator(4)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        f.write_snapshot(0.1, SnapshotSource(dom), comm)
        with h5py.File(f.path, "r") as h:
            uid0 = int(h["simulation"]["0.100000"]["grid_property"][0, 0])
        assert uid0 == 0

    def test_rank_row_ranges(self, tmp_path):
        import h5py
        dom = make_domain(P=2)
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        f.write_snapshot(0.1, SnapshotSource(dom), comm)
        with h5py.File(f.path, "r") as h:
            uids = h["simulation"]["0.100000"]["grid_property"][:, 0]
        ranks = [int(u) >> 52 for u in uids]
        assert ranks == sorted(ranks)

    def test_monotonic_time_enforced(self, tmp_path):
        dom = make_domain()
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        f.write_snapshot(0.2, SnapshotSource(dom), comm)
        with pytest.raises(CkptError):
            f.write_snapshot(0.1, SnapshotSource(dom), comm)

    def test_read_missing_time(self, tmp_path):
        dom = make_domain()
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        f.write_snapshot(0.1, SnapshotSource(dom), comm)
        with pytest.raises(CkptError, match="0.1"):
            f.read_snapshot(0.7, comm)

    def test_repartition_preserves_cells(self, tmp_path):
        dom = make_domain(P=2, seed=9)
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        f.write_snapshot(0.1, SnapshotSource(dom), comm)
        back = f.read_snapshot(0.1, Communicator(3))

        def dump(dm):
            rows = []
            for node in dm.tree.nodes.values():
                d, r = dm.locate(node.uid.value)
                rows.append((node.uid.path,
                             dm.levels[d].cur[r, :, 1:-1, 1:-1, 1:-1].tobytes()))
            return sorted(rows)

        assert dump(dom) == dump(back.dom)
        ranks = {n.uid.rank for n in back.dom.tree.nodes.values()}
        assert ranks == {0, 1, 2}

    def test_memory_hook_bounded_by_largest_slab(self, tmp_path):
        from steerflow import ckptio
        dom = make_domain(P=2, d_max=2)
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        f.write_snapshot(0.1, SnapshotSource(dom), comm)
        stats = ckptio.last_write_stats
        assert stats.peak_extra_bytes <= stats.max_slab_bytes
        assert stats.max_slab_bytes > 0


class TestAggregators:
    def test_aggregator_count_never_changes_bytes(self, tmp_path):
        hashes = []
        for A in (1, 2, 4):
            dom = make_domain(P=4, seed=11)
            comm = Communicator(4)
            path = tmp_path / f"agg{A}.h5"
            f = CheckpointFile.create(path, common_for(dom), comm)
            f.write_snapshot(0.1, SnapshotSource(dom), comm, aggregators=A)
            hashes.append(content_hash(str(path)))
        assert hashes[0] == hashes[1] == hashes[2]


class TestLabels:
    def test_three_writes_sorted(self, tmp_path):
        dom = make_domain()
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        for t in (0.1, 0.2, 0.3):
            f.write_snapshot(t, SnapshotSource(dom), comm)
        assert f.list_timesteps() == [0.1, 0.2, 0.3]

    def test_label_round_trip_bit_exact(self, tmp_path):
        # the exact float64 time is the authoritative label (stored as an
        # attribute; the group name is only the human-readable rendering)
        dom = make_domain(d_max=1)
        comm = Communicator(1) if False else Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        rng = np.random.default_rng(1)
        times = np.sort(rng.random(100) * 1e3)  # distinct with prob ~1
        times = np.unique(times)
        src = SnapshotSource(dom)
        for t in times:
            f.write_snapshot(float(t), src, comm)
        got = np.array(f.list_timesteps())
        assert np.array_equal(got, times)

    def test_colliding_display_names(self, tmp_path):
        # two times inside one microsecond share the %.6f rendering but stay
        # distinct labels
        dom = make_domain(d_max=1)
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        src = SnapshotSource(dom)
        t1 = 0.1
        t2 = 0.1 + 2e-8
        f.write_snapshot(t1, src, comm)
        f.write_snapshot(t2, src, comm)
        assert f.list_timesteps() == [t1, t2]


class TestBranching:
    def test_branch_latest_single_snapshot(self, tmp_path):
        dom = make_domain()
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        src = SnapshotSource(dom)
        f.write_snapshot(0.1, src, comm)
        f.write_snapshot(0.2, src, comm)
        b = f.open_branch(0.2, tmp_path / "b.h5")
        assert b.list_timesteps() == [0.2]
        assert b.branch_meta() == (str(tmp_path / "a.h5"), 0.2)

    def test_parent_unmodified(self, tmp_path):
        dom = make_domain()
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        f.write_snapshot(0.1, SnapshotSource(dom), comm)
        before = content_hash(f.path)
        f.open_branch(0.1, tmp_path / "b.h5")
        assert content_hash(f.path) == before

    def test_branch_of_branch_chain(self, tmp_path):
        dom = make_domain()
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        f.write_snapshot(0.1, SnapshotSource(dom), comm)
        b = f.open_branch(0.1, tmp_path / "b.h5")
        src = SnapshotSource(dom)
        b.write_snapshot(0.2, src, comm)
        c = b.open_branch(0.2, tmp_path / "c.h5")
        chain = c.branch_chain()
        assert chain[0] == (str(tmp_path / "b.h5"), 0.2)
        assert chain[1] == (str(tmp_path / "a.h5"), 0.1)

    def test_branch_missing_time(self, tmp_path):
        dom = make_domain()
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        f.write_snapshot(0.1, SnapshotSource(dom), comm)
        with pytest.raises(CkptError):
            f.open_branch(0.5, tmp_path / "b.h5")

    def test_branch_round_trip_state(self, tmp_path):
        dom = make_domain(seed=3)
        comm = Communicator(2)
        f = CheckpointFile.create(tmp_path / "a.h5", common_for(dom), comm)
        f.write_snapshot(0.1, SnapshotSource(dom), comm)
        b = f.open_branch(0.1, tmp_path / "b.h5")
        back = b.read_snapshot(0.1, comm)
        for d, blk in dom.levels.items():
            assert np.array_equal(blk.cur[:, :, 1:-1, 1:-1, 1:-1],
                                  back.dom.levels[d].cur[:, :, 1:-1, 1:-1, 1:-1])


class TestOfflineWindow:
    def _write(self, tmp_path, dom, P=2):
        comm = Communicator(P)
        f = CheckpointFile.create(tmp_path / "w.h5", common_for(dom), comm)
        f.write_snapshot(0.1, SnapshotSource(dom), comm)
        return f

    def test_full_domain_all_leaves(self, tmp_path):
        dom = make_domain(d_max=2)
        f = self._write(tmp_path, dom)
        q = WindowQuery(window=SQUARE, budget=10_000)
        sel, values = f.offline_select_window(0.1, q)
        leaf_uids = sorted(n.uid.value for n in dom.tree.leaves())
        assert [u for u, _ in sel.entries] == leaf_uids
        assert set(values) == set(leaf_uids)

    def test_outside_window_empty(self, tmp_path):
        dom = make_domain(d_max=1)
        f = self._write(tmp_path, dom)
        q = WindowQuery(window=Box((5, 5, 0), (6, 6, 0.25)), budget=10)
        sel, values = f.offline_select_window(0.1, q)
        assert sel.entries == [] and values == {}

    def test_online_offline_equivalence(self, tmp_path):
        dom = make_domain(d_max=2, seed=4)
        f = self._write(tmp_path, dom)
        repo = dom.repo
        rng = np.random.default_rng(12)
        for _ in range(40):
            x0, y0 = rng.random(2) * 0.8
            w = 0.05 + rng.random() * 0.9
            budget = int(rng.integers(1, 400))
            q = WindowQuery(window=Box((x0, y0, 0.0),
                                       (min(x0 + w, 1.0), min(y0 + w, 1.0), 0.25)),
                            budget=budget)
            online = repo.select_window(q)
            offline, _vals = f.offline_select_window(0.1, q)
            assert online.entries == offline.entries, (q.window, budget)
            assert offline.point_count <= budget

    def test_values_are_decimated_cur_data(self, tmp_path):
        dom = make_domain(d_max=1, seed=8)
        f = self._write(tmp_path, dom)
        q = WindowQuery(window=SQUARE, budget=5, fields=("T",))
        sel, values = f.offline_select_window(0.1, q)
        assert sel.point_count <= 5
        for uid, block in values.items():
            d, r = dom.locate(uid)
            assert block.shape[0] == 1  # one field requested
