"""Shared-file checkpoint kernel on HDF5.

One file serves every run: a ``common`` group written once at creation and a
``simulation`` group with one subgroup per written time step.  Every time-step
dataset follows the row paradigm: row i of every dataset describes the same
grid, rows are ordered by owning rank (rank 0 first, curve order within a
rank) and the root grid is always row 0.  Ranks write disjoint contiguous row
slabs, funnelled through a configurable number of aggregators; the file bytes
never depend on the aggregator count.

Object-header time tracking is disabled everywhere so identical writes give
identical bytes (hashable files).
"""

from __future__ import annotations

import hashlib
import math
import os
import time as _time
from dataclasses import dataclass, field

import h5py
import numpy as np

from .fields import NFIELDS, DomainState, TypeTable
from .geometry import Box, GridGeometry
from .spacetree import (
    UID_SENTINEL,
    LGrid,
    SpaceTree,
    Uid,
    distribute,
    lebesgue_key,
    uid_decode,
    uid_rank,
)
from .topology import TopologyRepo, WindowQuery, WindowSelection
from . import windowing

SNAP_GROUP = "simulation"
COMMON_GROUP = "common"
CELL_DATASETS = ("current_cell_data", "previous_cell_data", "temp_cell_data")
DEFAULT_ALIGN_BYTES = 4 * 1024 * 1024


class CkptError(RuntimeError):
    pass


class CorruptFile(CkptError):
    pass


class CollectiveMismatch(CkptError):
    """Ranks disagreed on the arguments of a collective call."""


@dataclass(frozen=True)
class Hyperslab:
    row_offset: int
    row_count: int
    total_rows: int

    def __post_init__(self):
        if self.row_offset + self.row_count > self.total_rows:
            raise ValueError("slab exceeds dataset extent")


def compute_hyperslab(local_counts) -> list[Hyperslab]:
    """Exclusive prefix over rank order; one slab per rank, disjoint and covering."""
    counts = [int(c) for c in local_counts]
    if any(c < 0 for c in counts):
        raise ValueError("negative row count")
    total = sum(counts)
    out = []
    offset = 0
    for c in counts:
        out.append(Hyperslab(offset, c, total))
        offset += c
    return out


# ---------------------------------------------------------------------------
# allocation tracking (the linear write buffer accounting)
# ---------------------------------------------------------------------------


class AllocTracker:
    """Tracks extra buffer bytes alive during a write."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def reset(self):
        self.current = 0
        self.peak = 0

    def push(self, nbytes: int):
        self.current += int(nbytes)
        self.peak = max(self.peak, self.current)

    def pop(self, nbytes: int):
        self.current -= int(nbytes)


alloc_tracker = AllocTracker()


@dataclass
class WriteStats:
    payload_bytes: int = 0      # the seven row datasets
    aux_bytes: int = 0          # params side table
    seconds: float = 0.0
    peak_extra_bytes: int = 0
    max_slab_bytes: int = 0
    rows: int = 0


last_write_stats = WriteStats()


# ---------------------------------------------------------------------------
# deterministic h5py helpers
# ---------------------------------------------------------------------------


def _notime_fcpl():
    fcpl = h5py.h5p.create(h5py.h5p.FILE_CREATE)
    fcpl.set_obj_track_times(False)
    return fcpl


def _notime_group(parent, name: str) -> h5py.Group:
    gcpl = h5py.h5p.create(h5py.h5p.GROUP_CREATE)
    gcpl.set_obj_track_times(False)
    gid = h5py.h5g.create(parent.id, name.encode(), gcpl=gcpl)
    return h5py.Group(gid)


def _chunked(n_rows: int, row_width: int, itemsize: int, align_bytes: int):
    if n_rows == 0 or row_width == 0:
        return None
    rows_per_chunk = max(1, min(n_rows, align_bytes // max(1, row_width * itemsize)))
    return (rows_per_chunk, row_width)


def _create_row_dataset(group, name, n_rows, row_width, dtype, align_bytes):
    return group.create_dataset(
        name, shape=(n_rows, row_width), dtype=dtype,
        chunks=_chunked(n_rows, row_width, np.dtype(dtype).itemsize, align_bytes),
        track_times=False)


def content_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _label(t: float) -> str:
    return f"{t:.6f}"


# ---------------------------------------------------------------------------
# file lifecycle
# ---------------------------------------------------------------------------


@dataclass
class CommonParams:
    dt: float
    r: tuple[int, int, int]
    s: tuple[int, int, int]
    d_max: int
    domain_box: Box
    fluid_properties: np.ndarray  # the 10-value property row
    solver_attrs: dict = field(default_factory=dict)

    def geometry(self) -> GridGeometry:
        return GridGeometry(r=self.r, s=self.s, d_max=self.d_max, domain_box=self.domain_box)


class CheckpointFile:
    """Handle over one shared checkpoint file."""

    def __init__(self, path: str):
        self.path = str(path)

    # -- creation -------------------------------------------------------------

    @staticmethod
    def create(path, common: CommonParams, comm=None, overwrite: bool = False,
               branch_meta=None) -> "CheckpointFile":
        """Collective creation: the common group is written exactly once here."""
        path = str(path)
        if comm is not None:
            comm.check_collective("create_file", (path, common.dt, common.r, common.s,
                                                  common.d_max, overwrite))
        if os.path.exists(path) and not overwrite:
            raise CkptError(f"{path} exists; pass overwrite to replace it")
        tmp_ok = False
        try:
            fid = h5py.h5f.create(path.encode(), h5py.h5f.ACC_TRUNC, fcpl=_notime_fcpl())
            with h5py.File(fid) as f:
                g = _notime_group(f, COMMON_GROUP)
                g.create_dataset("dt", data=np.float64(common.dt), track_times=False)
                g.create_dataset("r", data=np.asarray(common.r, np.int64), track_times=False)
                g.create_dataset("s", data=np.asarray(common.s, np.int64), track_times=False)
                g.create_dataset("d_max", data=np.int64(common.d_max), track_times=False)
                g.create_dataset("domain_box", data=common.domain_box.as_row(),
                                 track_times=False)
                g.create_dataset("fluid_properties",
                                 data=np.asarray(common.fluid_properties, np.float64),
                                 track_times=False)
                for k in sorted(common.solver_attrs):
                    g.attrs[k] = common.solver_attrs[k]
                _notime_group(f, SNAP_GROUP)
                if branch_meta is not None:
                    f.attrs["parent_path"] = str(branch_meta[0])
                    f.attrs["branch_time"] = np.float64(branch_meta[1])
            tmp_ok = True
        finally:
            if not tmp_ok and os.path.exists(path):
                os.remove(path)  # no partial files
        return CheckpointFile(path)

    # -- metadata -------------------------------------------------------------

    def common(self) -> CommonParams:
        with h5py.File(self.path, "r") as f:
            g = f[COMMON_GROUP]
            return CommonParams(
                dt=float(g["dt"][()]),
                r=tuple(int(v) for v in g["r"][...]),
                s=tuple(int(v) for v in g["s"][...]),
                d_max=int(g["d_max"][()]),
                domain_box=Box.from_row(g["domain_box"][...]),
                fluid_properties=np.array(g["fluid_properties"][...]),
                solver_attrs={k: g.attrs[k] for k in g.attrs},
            )

    def branch_meta(self):
        with h5py.File(self.path, "r") as f:
            if "parent_path" in f.attrs:
                return str(f.attrs["parent_path"]), float(f.attrs["branch_time"])
        return None

    def list_timesteps(self) -> list[float]:
        """Exact written times, numerically ascending."""
        try:
            with h5py.File(self.path, "r") as f:
                out = [float(grp.attrs["time"]) for _, grp in f[SNAP_GROUP].items()]
        except OSError as e:
            raise CkptError(f"cannot read {self.path}: {e}") from None
        return sorted(out)

    def _group_for(self, f, t: float):
        for name, grp in f[SNAP_GROUP].items():
            if float(grp.attrs["time"]) == float(t):
                return grp
        raise CkptError(
            f"time {t!r} not in {self.path}; available: {self.list_timesteps()}")

    def snapshot_attr(self, t: float, key: str):
        with h5py.File(self.path, "r") as f:
            return self._group_for(f, t).attrs[key]

    # -- writing ----------------------------------------------------------------

    def write_snapshot(self, t: float, source, comm, aggregators: int = 1,
                       align_bytes: int = DEFAULT_ALIGN_BYTES, step: int | None = None):
        """Collective snapshot write.

        ``source`` provides the per-rank rows (see :class:`SnapshotSource`).
        Each rank linearizes one dataset slab at a time into a contiguous
        buffer which its aggregator writes at the rank's hyperslab; no byte is
        written twice.
        """
        global last_write_stats
        existing = self.list_timesteps()
        if existing and t <= existing[-1]:
            raise CkptError(f"snapshot time {t} not after last {existing[-1]}")
        P = comm.size
        A = max(1, min(int(aggregators), P))
        counts = [source.rank_count(r) for r in range(P)]
        comm.check_collective("write_snapshot", (float(t), tuple(counts), A))
        slabs = compute_hyperslab(counts)
        total = slabs[0].total_rows if slabs else 0
        cells = source.cells_per_grid
        children = source.children_per_grid
        params = source.type_table_array()

        alloc_tracker.reset()
        t0 = _time.perf_counter()
        payload = 0
        max_slab = 0

        name = _label(t)
        with h5py.File(self.path, "a") as f:
            sim = f[SNAP_GROUP]
            if name in sim:
                name = f"{name}_{len(sim)}"
            grp = _notime_group(sim, name)
            grp.attrs["time"] = np.float64(t)
            if step is not None:
                grp.attrs["step"] = np.int64(step)
            spec = [
                ("grid_property", 1, np.uint64),
                ("subgrid_uid", children, np.uint64),
                ("bounding_box", 6, np.float64),
                ("current_cell_data", cells * NFIELDS, np.float64),
                ("previous_cell_data", cells * NFIELDS, np.float64),
                ("temp_cell_data", cells * NFIELDS, np.float64),
                ("cell_type", cells, np.int32),
            ]
            dsets = {}
            for dname, width, dtype in spec:
                dsets[dname] = _create_row_dataset(grp, dname, total, width, dtype,
                                                   align_bytes)
                payload += total * width * np.dtype(dtype).itemsize
            pt = grp.create_dataset("cell_type_params", data=params, track_times=False)
            aux = pt.size * pt.dtype.itemsize

            # aggregator j handles ranks with floor(r*A/P) == j, in rank order
            for dname, width, dtype in spec:
                ds = dsets[dname]
                for agg in range(A):
                    members = [r for r in range(P) if (r * A) // P == agg]
                    for r in members:
                        slab = slabs[r]
                        if slab.row_count == 0:
                            continue
                        buf = source.linearize(r, dname)
                        nbytes = buf.nbytes
                        alloc_tracker.push(nbytes)
                        max_slab = max(max_slab, nbytes)
                        ds[slab.row_offset : slab.row_offset + slab.row_count, :] = buf
                        alloc_tracker.pop(nbytes)
                        del buf

        last_write_stats = WriteStats(
            payload_bytes=payload,
            aux_bytes=aux,
            seconds=_time.perf_counter() - t0,
            peak_extra_bytes=alloc_tracker.peak,
            max_slab_bytes=max_slab,
            rows=total,
        )
        return last_write_stats

    # -- reading ------------------------------------------------------------------

    def read_snapshot(self, t: float, comm) -> "RestoredState":
        """Collective read: rebuild grids, cell data and the topology registration.

        With the writing rank count the stored uids are kept verbatim; with a
        different count the structural tree is re-partitioned and every uid is
        relabelled.
        """
        common = self.common()
        geom = common.geometry()
        P = comm.size
        comm.check_collective("read_snapshot", (float(t), P))
        with h5py.File(self.path, "r") as f:
            grp = self._group_for(f, t)
            uids = grp["grid_property"][..., 0]
            sub = grp["subgrid_uid"][...]
            bbox = grp["bounding_box"][...]
            cur = grp["current_cell_data"][...]
            prev = grp["previous_cell_data"][...]
            tmp = grp["temp_cell_data"][...]
            ctype = grp["cell_type"][...]
            params = grp["cell_type_params"][...]
            step = int(grp.attrs.get("step", -1))

        n = len(uids)
        if n == 0:
            raise CorruptFile("snapshot has no rows")
        decoded = []
        for v in uids:
            try:
                decoded.append(uid_decode(int(v)))
            except Exception as e:
                raise CorruptFile(f"bad uid {int(v):#x}: {e}") from None
        if decoded[0].depth != 0:
            raise CorruptFile("row 0 is not the root grid")
        for i in range(1, n):
            a, b = decoded[i - 1], decoded[i]
            if (a.rank, lebesgue_key(a)) >= (b.rank, lebesgue_key(b)):
                raise CorruptFile(f"rows {i-1},{i} violate rank/curve ordering")

        row_of_uid = {int(v): i for i, v in enumerate(uids)}
        wrote_ranks = max(d.rank for d in decoded) + 1

        # structural tree from paths/children
        nodes = {}
        for i, d in enumerate(decoded):
            kids = [int(s) for s in sub[i]]
            has_kids = any(k != UID_SENTINEL for k in kids)
            if has_kids:
                for k in kids:
                    if k == UID_SENTINEL or int(k) not in row_of_uid:
                        raise CorruptFile(f"row {i}: dangling subgrid uid")
                children = tuple(uid_decode(int(k)) for k in kids)
            else:
                children = None
            nodes[d.path] = LGrid(uid=d, bbox=Box.from_row(bbox[i]), children=children)
        tree = SpaceTree(geom=geom, nodes=nodes,
                         residency={d.value: d.rank for d in decoded})
        if P != wrote_ranks:
            tree = distribute(tree, P)

        dom = DomainState(geom, tree)
        dom.table = TypeTable.from_array(params)
        sx, sy, sz = geom.s
        for path, node in tree.nodes.items():
            row = row_of_uid[nodes[path].uid.value]
            d, r = dom.locate(node.uid.value)
            blk = dom.levels[d]
            shape5 = (NFIELDS, sz, sy, sx)
            blk.cur[r, :, 1:-1, 1:-1, 1:-1] = cur[row].reshape(shape5)
            blk.prev[r, :, 1:-1, 1:-1, 1:-1] = prev[row].reshape(shape5)
            blk.tmp[r, :, 1:-1, 1:-1, 1:-1] = tmp[row].reshape(shape5)
            blk.ctype[r, 1:-1, 1:-1, 1:-1] = ctype[row].reshape(sz, sy, sx)
        repo = TopologyRepo(geom=geom)
        repo.register_tree(tree)
        dom.repo = repo
        return RestoredState(dom=dom, time=float(t), step=step, common=common)

    # -- branching --------------------------------------------------------------

    def open_branch(self, t: float, new_path, comm=None) -> "CheckpointFile":
        """New file seeded with this file's common group and the snapshot at t."""
        if t not in self.list_timesteps():
            raise CkptError(f"cannot branch at {t}: not in {self.list_timesteps()}")
        common = self.common()
        out = CheckpointFile.create(new_path, common, comm=comm,
                                    branch_meta=(self.path, t))
        with h5py.File(self.path, "r") as src, h5py.File(out.path, "a") as dst:
            sgrp = self._group_for(src, t)
            name = _label(t)
            grp = _notime_group(dst[SNAP_GROUP], name)
            for k in sgrp.attrs:
                grp.attrs[k] = sgrp.attrs[k]
            for dname, ds in sgrp.items():
                data = ds[...]
                grp.create_dataset(dname, data=data, dtype=ds.dtype,
                                   chunks=ds.chunks, track_times=False)
        return out

    def branch_chain(self) -> list[tuple[str, float]]:
        """(parent path, branch time) pairs from here to the original run."""
        out = []
        node = self
        seen = set()
        while True:
            meta = node.branch_meta()
            if meta is None or meta[0] in seen:
                break
            out.append(meta)
            seen.add(meta[0])
            if not os.path.exists(meta[0]):
                break
            node = CheckpointFile(meta[0])
        return out

    # -- offline sliding window ----------------------------------------------------

    def offline_select_window(self, t: float, query: WindowQuery):
        """Row-walk twin of the online selection, plus decimated cell values.

        Starts at row 0, descends via subgrid_uid, maps uids to rows through
        grid_property; returns (selection, values) with values keyed by uid.
        """
        common = self.common()
        geom = common.geometry()
        with h5py.File(self.path, "r") as f:
            grp = self._group_for(f, t)
            uids = grp["grid_property"][..., 0]
            sub = grp["subgrid_uid"][...]
            bbox = grp["bounding_box"][...]
            row_of = {int(v): i for i, v in enumerate(uids)}

            def children_rows(row):
                kids = [int(k) for k in sub[row]]
                if all(k == UID_SENTINEL for k in kids):
                    return None
                out = []
                for k in kids:
                    if k == UID_SENTINEL or k not in row_of:
                        raise CorruptFile(f"row {row}: dangling subgrid uid")
                    out.append(row_of[k])
                return out

            def box_of(row):
                return Box.from_row(bbox[row])

            root_row = 0
            if not box_of(root_row).intersects(query.window):
                return WindowSelection(entries=[], level=0, point_count=0), {}

            max_stride = max(geom.s)
            cover = [root_row]
            level = 0
            while True:
                nxt = []
                grew = False
                for row in cover:
                    kids = children_rows(row)
                    if kids is None:
                        nxt.append(row)
                        continue
                    hit = [k for k in kids if box_of(k).intersects(query.window)]
                    if hit:
                        grew = True
                        nxt.extend(hit)
                    else:
                        nxt.append(row)
                if not grew:
                    break
                slabs = [windowing.window_slab(box_of(r), geom.s, query.window)
                         for r in nxt]
                fit = windowing.smallest_fitting_stride(slabs, query.budget, max_stride)
                if fit is None or sum(windowing.slab_point_count(s) for s in slabs) == 0:
                    break
                cover = nxt
                level += 1

            slabs = [windowing.window_slab(box_of(r), geom.s, query.window)
                     for r in cover]
            fit = windowing.smallest_fitting_stride(slabs, query.budget, max_stride)
            if fit is None:
                return WindowSelection(entries=[], level=level, point_count=0), {}
            stride, total = fit
            order = sorted(zip(cover, slabs), key=lambda rs: int(uids[rs[0]]))
            entries = []
            values = {}
            field_idx = {"u": 0, "v": 1, "w": 2, "p": 3, "T": 4}
            sx, sy, sz = geom.s
            cur_ds = grp["current_cell_data"]
            for row, slab in order:
                if windowing.strided_count(slab, stride) < 1:
                    continue
                uid = int(uids[row])
                entries.append((uid, (stride, stride, stride)))
                data = cur_ds[row].reshape(NFIELDS, sz, sy, sx)
                xi, yi, zi = windowing.strided_indices(slab, stride)
                comps = [field_idx[ff] for ff in query.fields]
                block = data[np.ix_(comps, zi, yi, xi)]
                values[uid] = block
            sel = WindowSelection(entries=entries, level=level,
                                  point_count=total, stride=stride)
            return sel, values


@dataclass
class RestoredState:
    dom: DomainState
    time: float
    step: int
    common: CommonParams


# ---------------------------------------------------------------------------
# snapshot source adapter
# ---------------------------------------------------------------------------


class SnapshotSource:
    """Per-rank row provider over a DomainState."""

    def __init__(self, dom: DomainState):
        self.dom = dom
        geom = dom.geom
        self.cells_per_grid = geom.cells_per_grid
        self.children_per_grid = geom.children_per_grid
        per_rank: dict[int, list] = {}
        for node in dom.tree.nodes.values():
            per_rank.setdefault(node.uid.rank, []).append(node)
        self._rows = {}
        for r, nodes in per_rank.items():
            nodes.sort(key=lambda n: lebesgue_key(n.uid))
            self._rows[r] = nodes

    def rank_count(self, rank: int) -> int:
        return len(self._rows.get(rank, []))

    def type_table_array(self) -> np.ndarray:
        return self.dom.table.as_array()

    def linearize(self, rank: int, dataset: str) -> np.ndarray:
        """One contiguous buffer holding this rank's rows of one dataset."""
        nodes = self._rows.get(rank, [])
        n = len(nodes)
        dom = self.dom
        if dataset == "grid_property":
            out = np.empty((n, 1), np.uint64)
            for i, node in enumerate(nodes):
                out[i, 0] = node.uid.value
            return out
        if dataset == "subgrid_uid":
            out = np.full((n, self.children_per_grid), UID_SENTINEL, np.uint64)
            for i, node in enumerate(nodes):
                if node.children is not None:
                    out[i] = [c.value for c in node.children]
            return out
        if dataset == "bounding_box":
            out = np.empty((n, 6), np.float64)
            for i, node in enumerate(nodes):
                out[i] = node.bbox.as_row()
            return out
        if dataset == "cell_type":
            out = np.empty((n, self.cells_per_grid), np.int32)
            for i, node in enumerate(nodes):
                d, r = dom.locate(node.uid.value)
                out[i] = dom.levels[d].ctype[r, 1:-1, 1:-1, 1:-1].ravel()
            return out
        buf_name = {"current_cell_data": "cur", "previous_cell_data": "prev",
                    "temp_cell_data": "tmp"}[dataset]
        out = np.empty((n, self.cells_per_grid * NFIELDS), np.float64)
        for i, node in enumerate(nodes):
            d, r = dom.locate(node.uid.value)
            arr = getattr(dom.levels[d], buf_name)
            out[i] = arr[r, :, 1:-1, 1:-1, 1:-1].ravel()
        return out
