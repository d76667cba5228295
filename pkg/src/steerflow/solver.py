"""Incompressible Navier-Stokes with thermal coupling on the block hierarchy.

Fractional-step time integration: explicit predictor, pressure Poisson solve,
velocity correction, then the energy equation.  The pressure operator is the
exact composition of the coded divergence and gradient (with their boundary
closures), which makes the post-projection divergence equal the linear-solve
residual identically; the solve runs conjugate gradients preconditioned by
V-cycles over the grid hierarchy (damped Jacobi smoothing, averaging
restriction, piecewise-constant prolongation, smoothing counts doubled per
coarser level, 64 sweeps on the root grid).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .fields import (
    ALL_FIELDS,
    CellType,
    FACE_CLOSED,
    FACE_DATA,
    FACE_DEAD,
    FACE_EXTRAP,
    FACE_OPEN,
    NFIELDS,
    P,
    T,
    U,
    V,
    W,
    CellCode,
    DomainState,
)

log = logging.getLogger(__name__)

_SOLID_INTS = (int(CellCode.OBSTACLE), int(CellCode.WALL_NOSLIP),
               int(CellCode.WALL_SLIP), int(CellCode.TEMP_DIRICHLET))


class SolverDivergence(RuntimeError):
    """A field stopped being finite."""


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, cycles: int):
        super().__init__(f"pressure solve stalled at relative residual {residual:.3e} "
                         f"after {cycles} cycles")
        self.residual = residual
        self.cycles = cycles


@dataclass(frozen=True)
class FluidProperties:
    rho_inf: float = 1.0           # kg/m^3
    mu: float = 1e-3               # Pa s
    beta: float = 0.0              # 1/K
    t_inf: float = 293.15          # K
    g: tuple[float, float, float] = (0.0, 0.0, 0.0)
    k_cond: float = 0.0257         # W/(m K)
    c_p: float = 1005.0            # J/(kg K)
    q_int: float = 0.0             # W/m^3

    def __post_init__(self):
        if self.rho_inf <= 0 or self.c_p <= 0 or self.mu < 0:
            raise ValueError("rho_inf and c_p must be positive, mu non-negative")

    @property
    def alpha(self) -> float:
        return self.k_cond / (self.rho_inf * self.c_p)

    def as_row(self) -> np.ndarray:
        return np.array([self.rho_inf, self.mu, self.beta, self.t_inf,
                         *self.g, self.k_cond, self.c_p, self.q_int])

    @staticmethod
    def from_row(row) -> "FluidProperties":
        r = [float(x) for x in row]
        return FluidProperties(r[0], r[1], r[2], r[3], (r[4], r[5], r[6]), r[7], r[8], r[9])


@dataclass(frozen=True)
class SolverParams:
    dt: float = 1e-3
    nu1: int = 2
    nu2: int = 2
    omega: float = 0.8
    eps_mg: float = 1e-6
    max_cycles: int = 400
    cfl_limit: float = 1.0
    convection_blend: float = 0.0   # 0 = first-order upwind, 1 = central

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0 < self.omega <= 1:
            raise ValueError("omega must lie in (0, 1]")
        if self.eps_mg <= 0:
            raise ValueError("eps_mg must be positive")
        if not 0 <= self.convection_blend <= 1:
            raise ValueError("convection blend must lie in [0, 1]")


def _interior(arr):
    return arr[..., 1:-1, 1:-1, 1:-1]


class _LevelOps:
    """Per-depth masks, face categories and boundary refresh index lists."""

    def __init__(self, dom: DomainState, depth: int):
        blk = dom.levels[depth]
        geom = dom.geom
        self.depth = depth
        self.h = blk.h
        self.active = [a for a in range(3)
                       if geom.s[a] > 1 or geom.grids_per_axis(depth)[a] > 1]
        code_lut = dom.table.codes()
        self.codes = code_lut[blk.ctype]
        self.fluid = _interior(self.codes) == int(CellCode.FLUID)
        self.cell_volume = float(np.prod(self.h))

        self.cats = {}
        self.fluid_side_left = {}
        for a in self.active:
            left, right = _face_pairs(self.codes, a)
            cat = np.full(left.shape, FACE_DEAD, dtype=np.int8)
            lf = left == int(CellCode.FLUID)
            rf = right == int(CellCode.FLUID)
            cat[lf & rf] = FACE_OPEN
            cat[(lf & (right == int(CellCode.OUTFLOW)))
                | (rf & (left == int(CellCode.OUTFLOW)))] = FACE_EXTRAP
            cat[(lf & (right == int(CellCode.INFLOW)))
                | (rf & (left == int(CellCode.INFLOW)))] = FACE_DATA
            cat[(lf & np.isin(right, _SOLID_INTS))
                | (rf & np.isin(left, _SOLID_INTS))] = FACE_CLOSED
            self.cats[a] = cat
            self.fluid_side_left[a] = lf

        # Jacobi diagonal of div(grad .), from the closure case table
        diag = np.zeros(self.fluid.shape)
        for a in self.active:
            w_cat = _west(self.cats[a], a)
            e_cat = _east(self.cats[a], a)
            h2 = self.h[a] * self.h[a]
            per = np.zeros(self.fluid.shape)
            blocked = (FACE_CLOSED, FACE_DATA, FACE_DEAD)
            open_w, open_e = w_cat == FACE_OPEN, e_cat == FACE_OPEN
            blk_w, blk_e = np.isin(w_cat, blocked), np.isin(e_cat, blocked)
            ex_w, ex_e = w_cat == FACE_EXTRAP, e_cat == FACE_EXTRAP
            per[(open_w | blk_w) & (open_e | blk_e)] = 0.5 / h2
            per[blk_w & blk_e] = 0.0
            per[(ex_w & open_e) | (open_w & ex_e)] = 0.5 / h2
            per[(ex_w & blk_e) | (blk_w & ex_e)] = 1.0 / h2
            per[ex_w & ex_e] = 0.0
            diag -= per
        self.diag = diag
        # Jacobi sweeps divide by the interior diagonal everywhere: boundary
        # cells have smaller true diagonals and the wide stencil is no
        # M-matrix, so exact-diagonal updates overshoot there
        self.smooth_diag = -sum(0.5 / (self.h[a] * self.h[a]) for a in self.active)
        self.solve_mask = self.fluid & (diag < 0)

        # derived per-axis masks, precomputed once for the stencil hot paths
        self.face_open = {}
        self.face_extrap = {}
        self.face_data = {}
        self.grad_mirror_w = {}
        self.grad_mirror_e = {}
        self.grad_extrap_w = {}
        self.grad_extrap_e = {}
        mirrorish = (FACE_CLOSED, FACE_DATA, FACE_DEAD)
        for a in self.active:
            cat = self.cats[a]
            self.face_open[a] = cat == FACE_OPEN
            self.face_extrap[a] = cat == FACE_EXTRAP
            self.face_data[a] = cat == FACE_DATA
            w_cat = _west(cat, a)
            e_cat = _east(cat, a)
            self.grad_mirror_w[a] = np.isin(w_cat, mirrorish)
            self.grad_mirror_e[a] = np.isin(e_cat, mirrorish)
            self.grad_extrap_w[a] = w_cat == FACE_EXTRAP
            self.grad_extrap_e[a] = e_cat == FACE_EXTRAP
        self._refresh = None
        self._dom = dom

    # boundary refresh index tuples, padded coordinates -----------------------

    def refresh_lists(self):
        if self._refresh is not None:
            return self._refresh
        dom = self._dom
        blk = dom.levels[self.depth]
        codes = self.codes
        shape = codes.shape
        table = dom.table
        vel_lut = np.stack([np.array(r.velocity) for r in table.rows])
        t_lut = np.array([np.nan if r.temperature is None else r.temperature
                          for r in table.rows])

        inner = np.zeros(shape, dtype=bool)
        inner[:, 1:-1, 1:-1, 1:-1] = True

        def cells_of(*wanted):
            m = np.isin(codes, [int(c) for c in wanted]) & inner
            return np.nonzero(m)

        def first_fluid_src(cells):
            """Per cell: first fluid neighbour (padded coords) in fixed order."""
            n = len(cells[0])
            src = tuple(np.zeros(n, dtype=np.int64) for _ in range(4))
            axes = np.full(n, -1, dtype=np.int8)
            found = np.zeros(n, dtype=bool)
            for a in (0, 1, 2):
                for sgn in (-1, +1):
                    if found.all():
                        break
                    cand = [c.copy() for c in cells]
                    cand[1 + (2 - a)] = cand[1 + (2 - a)] + sgn
                    ok = ((cand[1] >= 0) & (cand[1] < shape[1])
                          & (cand[2] >= 0) & (cand[2] < shape[2])
                          & (cand[3] >= 0) & (cand[3] < shape[3]))
                    ok &= ~found
                    sel = tuple(c[ok] for c in cand)
                    is_fluid = codes[sel] == int(CellCode.FLUID)
                    hit = np.nonzero(ok)[0][is_fluid]
                    for i in range(4):
                        src[i][hit] = cand[i][hit]
                    axes[hit] = a
                    found[hit] = True
            keep = found
            return (tuple(c[keep] for c in cells),
                    tuple(s[keep] for s in src),
                    axes[keep])

        flat_ct = blk.ctype

        solid = cells_of(CellCode.OBSTACLE, CellCode.WALL_NOSLIP)
        dirt = cells_of(CellCode.TEMP_DIRICHLET)
        infl = cells_of(CellCode.INFLOW)
        outf = cells_of(CellCode.OUTFLOW)
        slip = cells_of(CellCode.WALL_SLIP)

        copy_dst, copy_src, _ = first_fluid_src(outf)
        slip_dst, slip_src, slip_axes = first_fluid_src(slip)
        heat_all = tuple(np.concatenate([a, b]) for a, b in zip(solid, dirt))
        heat_dst, heat_src, _ = first_fluid_src(heat_all)
        # dirichlet cells keep their own T; drop them from the adiabatic copy
        dirt_set = set(zip(*[d.tolist() for d in dirt])) if len(dirt[0]) else set()
        if dirt_set and len(heat_dst[0]):
            keep = np.array([c not in dirt_set for c in zip(*[d.tolist() for d in heat_dst])])
            heat_dst = tuple(h[keep] for h in heat_dst)
            heat_src = tuple(h[keep] for h in heat_src)

        self._refresh = {
            "solid": solid,
            "dirichlet_t": (dirt, t_lut[flat_ct[dirt]]),
            "inflow": (infl, vel_lut[flat_ct[infl]], t_lut[flat_ct[infl]]),
            "copy": (copy_dst, copy_src),
            "slip": (slip_dst, slip_src, slip_axes),
            "adiabatic": (heat_dst, heat_src),
        }
        return self._refresh


def _face_pairs(codes, axis):
    a = 2 - axis
    left = [slice(1, -1)] * 3
    right = [slice(1, -1)] * 3
    left[a] = slice(0, -1)
    right[a] = slice(1, None)
    return codes[(slice(None),) + tuple(left)], codes[(slice(None),) + tuple(right)]


def _west(cat, axis):
    sl = [slice(None)] * 4
    sl[1 + (2 - axis)] = slice(0, -1)
    return cat[tuple(sl)]


def _east(cat, axis):
    sl = [slice(None)] * 4
    sl[1 + (2 - axis)] = slice(1, None)
    return cat[tuple(sl)]


def _face_vals(v, axis):
    """Left/right padded cell values adjacent to every face of the interior."""
    a = 2 - axis
    left = [slice(1, -1)] * 3
    right = [slice(1, -1)] * 3
    left[a] = slice(0, -1)
    right[a] = slice(1, None)
    return v[(slice(None),) + tuple(left)], v[(slice(None),) + tuple(right)]


def _with_comp(arr, comp):
    """Contiguity-safe component view of (G, C, Z, Y, X)."""
    return arr[:, comp]


class FlowSolver:
    """Time integrator over a DomainState."""

    def __init__(self, dom: DomainState, props: FluidProperties, params: SolverParams):
        self.dom = dom
        self.props = props
        self.params = params
        self.time = 0.0
        self.step_count = 0
        self.cfl_warnings = 0
        self.last_cfl = 0.0
        self._ops: dict[int, _LevelOps] = {}
        self._scratch = None
        self.last_solve_cycles = 0
        self.last_solve_residual = 0.0

    def ops(self, depth: int) -> _LevelOps:
        if depth not in self._ops:
            self._ops[depth] = _LevelOps(self.dom, depth)
        return self._ops[depth]

    def invalidate(self):
        """Drop caches after structure or cell-type changes."""
        self._ops.clear()
        self._scratch = None
        self.dom.invalidate()

    # -- boundary refresh -----------------------------------------------------

    def refresh_bc(self, buf: str = "cur"):
        """Write boundary-cell values from their codes and parameters."""
        for d, blk in self.dom.levels.items():
            lists = self.ops(d).refresh_lists()
            arr = getattr(blk, buf)

            def at(cells, comp):
                g, z, y, x = cells
                return (g, np.full_like(g, comp), z, y, x)

            solid = lists["solid"]
            for comp in (U, V, W):
                arr[at(solid, comp)] = 0.0
            dirt, tvals = lists["dirichlet_t"]
            for comp in (U, V, W):
                arr[at(dirt, comp)] = 0.0
            arr[at(dirt, T)] = tvals
            infl, vels, tv = lists["inflow"]
            for comp in (U, V, W):
                arr[at(infl, comp)] = vels[:, comp]
            have_t = ~np.isnan(tv)
            arr[at(tuple(c[have_t] for c in infl), T)] = tv[have_t]
            dst, src = lists["copy"]
            for comp in (U, V, W, T):
                arr[at(dst, comp)] = arr[at(src, comp)]
            sdst, ssrc, sax = lists["slip"]
            for comp in (U, V, W):
                vals = arr[at(ssrc, comp)]
                arr[at(sdst, comp)] = np.where(sax == comp, -vals, vals)
            hd, hs = lists["adiabatic"]
            arr[at(hd, T)] = arr[at(hs, T)]

    # -- ghost exchange ---------------------------------------------------------

    def ghost_update(self, comps=None, buf: str = "cur"):
        """Bottom-up restriction, horizontal exchange, cross-level halo fill."""
        comps = ALL_FIELDS if comps is None else np.asarray(comps)
        plans = self.dom.plans()
        arrays = {d: getattr(blk, buf) for d, blk in self.dom.levels.items()}
        neg = np.asarray([c for c in comps if c in (U, V, W)])
        plans.restrict(arrays, comps)
        self.refresh_bc(buf)
        plans.exchange(arrays, comps, level=None, mirror_negate=neg)

    def exchange_types(self):
        """Restrict cell types upward and propagate them into halos.

        Boundary-condition strips (inflow, outflow, walls, fixed-temperature
        surfaces) are one cell thick and must survive on every level, so they
        take priority in the restriction; obstacles on the other hand yield to
        fluid children (apertures stay open on coarse levels).
        """
        dom = self.dom
        plans = dom.plans()
        code_lut = dom.table.codes()
        geom = dom.geom
        strip_codes = (int(CellCode.INFLOW), int(CellCode.OUTFLOW),
                       int(CellCode.TEMP_DIRICHLET), int(CellCode.WALL_NOSLIP),
                       int(CellCode.WALL_SLIP))

        def block_reduce(mask, op):
            out = mask
            for a in range(3):
                r = geom.r[a]
                if r == 1:
                    continue
                dim = 1 + (2 - a)
                shp = list(out.shape)
                shp[dim: dim + 1] = [shp[dim] // r, r]
                out = op(out.reshape(shp), axis=dim + 1)
            return out

        for d in sorted(dom.levels, reverse=True):
            if d == 0 or d - 1 not in dom.levels:
                continue
            blk, pblk = dom.levels[d], dom.levels[d - 1]
            m = [geom.s[a] // geom.r[a] for a in range(3)]
            for digit, (crows, prows) in plans.restrict_groups.get(d, {}).items():
                dx, dy, dz = geom.digit_to_xyz(digit)
                child = blk.ctype[np.ix_(crows,
                                         np.arange(1, geom.s[2] + 1),
                                         np.arange(1, geom.s[1] + 1),
                                         np.arange(1, geom.s[0] + 1))]
                child_codes = code_lut[child]
                # densest strip code per parent cell, ties to the smaller code
                best_cnt = None
                best_idx = None
                for code in strip_codes:
                    hit = child_codes == code
                    cnt = block_reduce(hit.astype(np.int16), np.sum)
                    # representative type index: subsampled pick among hits
                    rep = block_reduce(np.where(hit, child, -1), np.max)
                    if best_cnt is None:
                        best_cnt, best_idx = cnt, rep
                    else:
                        take = cnt > best_cnt
                        best_cnt = np.where(take, cnt, best_cnt)
                        best_idx = np.where(take, rep, best_idx)
                anyfl = block_reduce(child_codes == int(CellCode.FLUID), np.any)
                sub = child[:, ::geom.r[2], ::geom.r[1], ::geom.r[0]]
                out = np.where(best_cnt > 0, best_idx,
                               np.where(anyfl, 0, sub))
                pblk.ctype[np.ix_(prows,
                                  dz * m[2] + np.arange(1, m[2] + 1),
                                  dy * m[1] + np.arange(1, m[1] + 1),
                                  dx * m[0] + np.arange(1, m[0] + 1))] = out
        arrays = {d: blk.ctype[:, None].astype(np.float64)
                  for d, blk in dom.levels.items()}
        plans.exchange(arrays, np.array([0]), level=None, reduce="sample")
        for d, blk in dom.levels.items():
            blk.ctype[:] = np.rint(arrays[d][:, 0]).astype(np.int32)
        # the physical domain boundary always reads as a wall, even on coarse
        # levels where the aperture rule re-opened boundary-layer cells
        wall_idx = dom.table.add(CellType(CellCode.WALL_NOSLIP))
        for d, blk in dom.levels.items():
            for (dd, axis, sign), rows in plans.mirror.items():
                if dd != d:
                    continue
                sl = [slice(None)] * 3
                sl[2 - axis] = slice(0, 1) if sign < 0 else slice(-1, None)
                blk.ctype[(rows,) + tuple(sl)] = wall_idx
        self._ops.clear()
        self._scratch = None

    # -- stencils ----------------------------------------------------------------

    @staticmethod
    def _shift(arr, axis, sign):
        sl = [slice(1, -1)] * 3
        sl[2 - axis] = slice(2, None) if sign > 0 else slice(0, -2)
        return arr[(slice(None),) + tuple(sl)]

    def _convection(self, q, adv, ops):
        gamma = self.params.convection_blend
        c = _interior(q)
        out = np.zeros_like(c)
        for a in ops.active:
            h = ops.h[a]
            qm = self._shift(q, a, -1)
            qp = self._shift(q, a, +1)
            av = _interior(adv[a])
            up = np.where(av > 0, (c - qm) / h, (qp - c) / h)
            if gamma > 0:
                out += av * (gamma * (qp - qm) / (2 * h) + (1 - gamma) * up)
            else:
                out += av * up
        return out

    def _laplacian(self, q, ops):
        c = _interior(q)
        out = np.zeros_like(c)
        for a in ops.active:
            h2 = ops.h[a] * ops.h[a]
            out += (self._shift(q, a, +1) - 2 * c + self._shift(q, a, -1)) / h2
        return out

    # -- predictor -----------------------------------------------------------------

    def momentum_predictor(self) -> float:
        """Predictor velocities into tmp (leaves); returns the max CFL number."""
        dt = self.params.dt
        pr = self.props
        cfl = 0.0
        for d, blk in self.dom.levels.items():
            ops = self.ops(d)
            leaf = blk.leaf
            np.copyto(blk.tmp, blk.cur)
            cur = blk.cur
            adv = [cur[:, U], cur[:, V], cur[:, W]]
            buoy_base = pr.beta * (_interior(cur[:, T]) - pr.t_inf)
            upd_mask = ops.fluid & leaf[:, None, None, None]
            for comp in (U, V, W):
                if comp not in ops.active and pr.g[comp] == 0.0:
                    continue
                q = cur[:, comp]
                rhs = -self._convection(q, adv, ops) \
                    + (pr.mu / pr.rho_inf) * self._laplacian(q, ops) \
                    + buoy_base * pr.g[comp]
                tgt = _interior(blk.tmp[:, comp])
                tgt[upd_mask] = (_interior(q) + dt * rhs)[upd_mask]
            for a in ops.active:
                if upd_mask.any():
                    vmax = float(np.abs(_interior(cur[:, a])[upd_mask]).max())
                    cfl = max(cfl, vmax * dt / ops.h[a])
        self.last_cfl = cfl
        if cfl > self.params.cfl_limit:
            self.cfl_warnings += 1
            log.warning("CFL %.3f exceeds limit %.3f at t=%.6f",
                        cfl, self.params.cfl_limit, self.time)
        for d, blk in self.dom.levels.items():
            m = self.ops(d).fluid & blk.leaf[:, None, None, None]
            block = _interior(blk.tmp).transpose(0, 2, 3, 4, 1)[m]
            if block.size and not np.isfinite(block).all():
                raise SolverDivergence(f"predictor produced non-finite values at depth {d}")
        return cfl

    # -- divergence / gradient with closures ----------------------------------------

    def _flux_div(self, comp_arrays, d: int, homogeneous: bool):
        """Face-flux divergence over all rows of depth d.

        ``comp_arrays[a]`` is the padded (G, Z+2, Y+2, X+2) velocity component.
        """
        ops = self.ops(d)
        out = None
        for a in ops.active:
            v = comp_arrays[a]
            lf = ops.fluid_side_left[a]
            left, right = _face_vals(v, a)
            flux = np.where(ops.face_open[a], 0.5 * (left + right), 0.0)
            fluid_side = np.where(lf, left, right)
            flux = np.where(ops.face_extrap[a], fluid_side, flux)
            if not homogeneous:
                data_side = np.where(lf, right, left)
                flux = np.where(ops.face_data[a], data_side, flux)
            div_a = np.diff(flux, axis=1 + (2 - a)) / ops.h[a]
            out = div_a if out is None else out + div_a
        if out is None:
            out = np.zeros_like(_interior(comp_arrays[0]))
        return out

    def _gradient(self, q, d: int):
        """Adjoint-closure central gradient of a padded scalar (G, Z+2, Y+2, X+2)."""
        ops = self.ops(d)
        ci = _interior(q)
        out = []
        for a in range(3):
            if a not in ops.active:
                out.append(np.zeros_like(ci))
                continue
            qm = self._shift(q, a, -1)
            qp = self._shift(q, a, +1)
            pw = np.where(ops.grad_mirror_w[a], ci, qm)
            pw = np.where(ops.grad_extrap_w[a], -ci, pw)
            pe = np.where(ops.grad_mirror_e[a], ci, qp)
            pe = np.where(ops.grad_extrap_e[a], -ci, pe)
            g = (pe - pw) / (2 * ops.h[a])
            g[~ops.fluid] = 0.0
            out.append(g)
        return out

    def divergence(self, buf: str = "tmp") -> dict:
        """Physical divergence per depth on the leaf composite, zero elsewhere."""
        out = {}
        for d, blk in self.dom.levels.items():
            arr = getattr(blk, buf)
            div = self._flux_div([arr[:, U], arr[:, V], arr[:, W]], d, homogeneous=False)
            div[~(self.ops(d).fluid & blk.leaf[:, None, None, None])] = 0.0
            out[d] = div
        return out

    # -- pressure solve ----------------------------------------------------------------

    def _scratch_arrays(self):
        if self._scratch is None:
            L = self.dom.max_depth

            def mk(c):
                return {d: np.zeros((blk.count, c) + blk.cur.shape[2:])
                        for d, blk in self.dom.levels.items()}

            self._scratch = {
                "q": mk(1), "g": mk(3), "res": mk(1),
                "rhs": [mk(1) for _ in range(L + 1)],
                "e": [mk(1) for _ in range(L + 1)],
                "r": mk(1), "z": mk(1), "pdir": mk(1), "Ap": mk(1),
            }
        return self._scratch

    def _apply_A(self, q, out, level: int):
        """out <- div_hom(grad(q)) over the depth-``level`` composite."""
        plans = self.dom.plans()
        sc = self._scratch_arrays()
        g = sc["g"]
        sub = {d: q[d] for d in self.dom.cover_rows(level)}
        plans.exchange(sub, np.array([0]), level=level)
        for d in sub:
            gx = self._gradient(q[d][:, 0], d)
            for a in range(3):
                _interior(g[d])[:, a] = gx[a]
        plans.exchange({d: g[d] for d in sub}, np.arange(3), level=level)
        for d in sub:
            div = self._flux_div([g[d][:, 0], g[d][:, 1], g[d][:, 2]], d,
                                 homogeneous=True)
            ops = self.ops(d)
            div[~ops.solve_mask] = 0.0
            _interior(out[d])[:, 0] = div

    def _smooth(self, q, rhs, level: int, sweeps: int):
        sc = self._scratch_arrays()
        res = sc["res"]
        om = self.params.omega
        cover = self.dom.cover_rows(level)
        for _ in range(sweeps):
            self._apply_A(q, res, level)
            for d in cover:
                ops = self.ops(d)
                qi = _interior(q[d])[:, 0]
                corr = (_interior(rhs[d])[:, 0] - _interior(res[d])[:, 0]) \
                    / ops.smooth_diag
                qi += om * np.where(ops.solve_mask, corr, 0.0)

    def _vcycle(self, rhs, level: int, out):
        """One correction V-cycle from zero; result written into ``out``."""
        sc = self._scratch_arrays()
        plans = self.dom.plans()
        L = self.dom.max_depth
        for d in out:
            out[d][:] = 0.0
        if level == 0:
            self._smooth(out, rhs, 0, 64)
            return
        factor = 1 << (L - level)
        self._smooth(out, rhs, level, self.params.nu1 * factor)
        res = sc["res"]
        self._apply_A(out, res, level)
        cover = self.dom.cover_rows(level)
        for d in cover:
            res[d][:, 0] = rhs[d][:, 0] - res[d][:, 0]
        plans.restrict({d: res[d] for d in (level, level - 1) if d in res},
                       np.array([0]))
        rhs_next = sc["rhs"][level - 1]
        for d in self.dom.cover_rows(level - 1):
            rhs_next[d][:, 0] = res[d][:, 0]
        e = sc["e"][level - 1]
        self._vcycle(rhs_next, level - 1, e)
        plans.inject_correction({level: out[level], level - 1: e[level - 1]},
                                np.array([0]), level)
        for d in cover:
            if d < level:
                out[d][:, 0] += e[d][:, 0]
        self._smooth(out, rhs, level, self.params.nu2 * factor)

    def _dot(self, a, b, level: int) -> float:
        total = 0.0
        for d, rows in self.dom.cover_rows(level).items():
            m = self.ops(d).solve_mask[rows]
            av = _interior(a[d])[rows, 0][m]
            bv = _interior(b[d])[rows, 0][m]
            total += self.ops(d).cell_volume * float((av * bv).sum())
        return total

    # -- oscillatory deflation space ------------------------------------------

    def _deflation(self):
        """Cell-parity coarse space for the modes the V-cycle cannot see.

        The wide div(grad) stencil decouples odd/even cell sublattices in the
        interior, so checkerboard-modulated smooth modes are invisible to the
        averaging restriction and nearly untouched by Jacobi.  A handful of
        parity-carrier vectors with low-order cosine envelopes, solved exactly
        in a dense subspace, removes that branch from the iteration.
        """
        if self._scratch is not None and "defl" in self._scratch:
            return self._scratch["defl"]
        sc = self._scratch_arrays()
        L = self.dom.max_depth
        geom = self.dom.geom
        box = geom.domain_box
        active = [a for a in range(3) if geom.s[a] > 1 or geom.grids_per_axis(L)[a] > 1]
        parities = []
        for bits in range(1, 1 << len(active)):
            parities.append(tuple(active[i] for i in range(len(active))
                                  if bits >> i & 1))

        def envelopes_for(par):
            # rich resolution along the parity-carrying axes, low across
            out = []
            kcap = [6 if (a in par and len(par) == 1) else 1 for a in range(3)]
            for a in range(3):
                if a not in active:
                    kcap[a] = 0
            for kx in range(kcap[0] + 1):
                for ky in range(kcap[1] + 1):
                    for kz in range(kcap[2] + 1):
                        out.append((kx, ky, kz))
            return out

        from .scenarios import cell_centers

        cover = self.dom.cover_rows(L)
        basis = []
        for par in parities:
            for ks in envelopes_for(par):
                vec = {d: np.zeros_like(sc["q"][d]) for d in sc["q"]}
                norm2 = 0.0
                for d, rows in cover.items():
                    blk = self.dom.levels[d]
                    ctr = cell_centers(blk)
                    val = np.ones(ctr.shape[:-1])
                    for a in range(3):
                        frac = (ctr[..., a] - box.lo[a]) / max(box.size[a], 1e-300)
                        if ks[a]:
                            val = val * np.cos(np.pi * ks[a] * frac)
                        if a in par:
                            n_cells = geom.grids_per_axis(d)[a] * geom.s[a]
                            idx = np.floor(frac * n_cells).astype(int)
                            val = val * np.where(idx % 2 == 0, 1.0, -1.0)
                    m = self.ops(d).solve_mask
                    val = np.where(m, val, 0.0)
                    _interior(vec[d])[:, 0] = val
                    norm2 += self.ops(d).cell_volume * float((val[m] ** 2).sum())
                if norm2 < 1e-12:
                    continue
                scale = 1.0 / np.sqrt(norm2)
                for d in vec:
                    vec[d] *= scale
                basis.append(vec)
        res = sc["res"]
        S = np.zeros((len(basis), len(basis)))
        images = []
        for j, bj in enumerate(basis):
            self._apply_A(bj, res, L)
            img = {d: res[d].copy() for d in res}
            images.append(img)
        for i, bi in enumerate(basis):
            for j in range(i, len(basis)):
                S[i, j] = S[j, i] = self._dot(bi, images[j], L)
        Sinv = np.linalg.pinv(S, rcond=1e-10)
        # flat masked views for fast projections
        flat = {}
        for d, rows in cover.items():
            m = self.ops(d).solve_mask[rows]
            Bm = np.stack([_interior(b[d])[rows, 0][m] for b in basis]) \
                if basis else np.zeros((0, 0))
            flat[d] = (rows, m, Bm, self.ops(d).cell_volume)
        defl = {"basis": basis, "Sinv": Sinv, "flat": flat}
        self._scratch["defl"] = defl
        return defl

    def _precondition(self, r, z):
        """z <- V-cycle(r) plus the exact solve on the parity coarse space."""
        L = self.dom.max_depth
        self._vcycle(r, L, z)
        defl = self._deflation()
        basis, Sinv, flat = defl["basis"], defl["Sinv"], defl["flat"]
        if not basis:
            return
        nb = len(basis)
        proj = np.zeros(nb)
        for d, (rows, m, Bm, vol) in flat.items():
            rv = _interior(r[d])[rows, 0][m]
            proj += vol * (Bm @ rv)
        coef = Sinv @ proj
        for d, (rows, m, Bm, vol) in flat.items():
            upd = coef @ Bm
            zi = _interior(z[d])[:, 0]
            tmp = zi[rows]
            tmp[m] += upd
            zi[rows] = tmp

    def has_pressure_pin(self) -> bool:
        """True when an outflow face fixes the pressure level."""
        for d in self.dom.levels:
            ops = self.ops(d)
            for a in ops.active:
                if (ops.cats[a] == FACE_EXTRAP).any():
                    return True
        return False

    def _gauge(self, arrs, level: int):
        """Subtract the volume-weighted mean over solve cells."""
        vol = mean = 0.0
        for d, rows in self.dom.cover_rows(level).items():
            m = self.ops(d).solve_mask[rows]
            vol += self.ops(d).cell_volume * int(m.sum())
            mean += self.ops(d).cell_volume * float(_interior(arrs[d])[rows, 0][m].sum())
        if vol == 0.0:
            return
        mean /= vol
        for d in self.dom.cover_rows(level):
            qi = _interior(arrs[d])[:, 0]
            qi[self.ops(d).solve_mask] -= mean

    def pressure_poisson_solve(self, rhs_by_depth: dict) -> dict:
        """Solve div(grad p) = rhs on the leaf composite; returns scratch arrays.

        Flexible conjugate gradients with one hierarchy V-cycle per iteration
        as the preconditioner; stops at eps_mg relative residual or raises
        after max_cycles.
        """
        sc = self._scratch_arrays()
        L = self.dom.max_depth
        q, res = sc["q"], sc["res"]
        rhs = sc["rhs"][L]
        r, z, pdir, Ap = sc["r"], sc["z"], sc["pdir"], sc["Ap"]
        cover = self.dom.cover_rows(L)
        pinned = self.has_pressure_pin()

        for d in rhs:
            rhs[d][:] = 0.0
        for d in cover:
            ops = self.ops(d)
            vals = np.where(ops.solve_mask, rhs_by_depth.get(d, 0.0), 0.0)
            _interior(rhs[d])[:, 0] = vals
        if not pinned:
            self._gauge(rhs, L)

        nrm0 = np.sqrt(self._dot(rhs, rhs, L))
        for d, blk in self.dom.levels.items():
            q[d][:, 0] = blk.cur[:, P]
        if nrm0 == 0.0:
            for d in q:
                q[d][:] = 0.0
            self.last_solve_cycles = 0
            self.last_solve_residual = 0.0
            return q

        self._apply_A(q, res, L)
        for d in cover:
            r[d][:, 0] = rhs[d][:, 0] - res[d][:, 0]
        rel = np.sqrt(self._dot(r, r, L)) / nrm0
        it = 0
        if rel > self.params.eps_mg:
            self._precondition(r, z)
            for d in pdir:
                pdir[d][:] = z[d]
            rz = self._dot(r, z, L)
            for it in range(1, self.params.max_cycles + 1):
                self._apply_A(pdir, Ap, L)
                dAd = self._dot(pdir, Ap, L)
                if dAd >= 0.0:
                    break  # operator is negative semidefinite; direction exhausted
                alpha = rz / dAd
                for d in cover:
                    q[d][:, 0] += alpha * pdir[d][:, 0]
                    r[d][:, 0] -= alpha * Ap[d][:, 0]
                if it % 25 == 0:
                    # guard against recursion drift on hard modes
                    self._apply_A(q, res, L)
                    for d in cover:
                        r[d][:, 0] = rhs[d][:, 0] - res[d][:, 0]
                rel = np.sqrt(self._dot(r, r, L)) / nrm0
                if rel <= self.params.eps_mg:
                    self._apply_A(q, res, L)
                    for d in cover:
                        r[d][:, 0] = rhs[d][:, 0] - res[d][:, 0]
                    rel = np.sqrt(self._dot(r, r, L)) / nrm0
                    if rel <= self.params.eps_mg:
                        break
                self._precondition(r, z)
                rz_new = self._dot(r, z, L)
                beta = rz_new / rz
                for d in pdir:
                    pdir[d][:] = z[d] + beta * pdir[d]
                rz = rz_new
        self.last_solve_cycles = it
        self.last_solve_residual = rel
        if rel > self.params.eps_mg:
            raise ConvergenceError(rel, it)
        if not pinned:
            self._gauge(q, L)
        return q

    def project(self, q: dict):
        """cur velocity <- tmp velocity - dt/rho grad(q); cur pressure <- q."""
        dt = self.params.dt
        rho = self.props.rho_inf
        plans = self.dom.plans()
        L = self.dom.max_depth
        cover = self.dom.cover_rows(L)
        plans.exchange({d: q[d] for d in cover}, np.array([0]), level=L)
        for d, rows in cover.items():
            blk = self.dom.levels[d]
            ops = self.ops(d)
            g = self._gradient(q[d][:, 0], d)
            mask = ops.fluid & blk.leaf[:, None, None, None]
            for comp in (U, V, W):
                tgt = _interior(blk.cur[:, comp])
                tgt[mask] = (_interior(blk.tmp[:, comp]) - dt / rho * g[comp])[mask]
            tp = _interior(blk.cur[:, P])
            tp[mask] = _interior(q[d])[:, 0][mask]

    def energy_step(self):
        """Advance temperature with the projected velocities."""
        dt = self.params.dt
        pr = self.props
        for d, blk in self.dom.levels.items():
            ops = self.ops(d)
            cur = blk.cur
            adv = [cur[:, U], cur[:, V], cur[:, W]]
            q = cur[:, T]
            rhs = -self._convection(q, adv, ops) + pr.alpha * self._laplacian(q, ops) \
                + pr.q_int / (pr.rho_inf * pr.c_p)
            mask = ops.fluid & blk.leaf[:, None, None, None]
            tgt = _interior(blk.cur[:, T])
            tgt[mask] = (_interior(q) + dt * rhs)[mask]
            if mask.any() and not np.isfinite(tgt[mask]).all():
                raise SolverDivergence(f"energy step produced non-finite values at depth {d}")

    def time_step(self) -> float:
        """One full fractional step; returns the new elapsed time."""
        for blk in self.dom.levels.values():
            np.copyto(blk.prev, blk.cur)
        self.ghost_update()
        self.momentum_predictor()
        self.refresh_bc("tmp")
        plans = self.dom.plans()
        arrays = {d: blk.tmp for d, blk in self.dom.levels.items()}
        plans.restrict(arrays, np.arange(3))
        plans.exchange(arrays, np.arange(3), level=None,
                       mirror_negate=np.arange(3))
        rho_dt = self.props.rho_inf / self.params.dt
        rhs = {d: rho_dt * dv for d, dv in self.divergence(buf="tmp").items()}
        q = self.pressure_poisson_solve(rhs)
        self.project(q)
        self.energy_step()
        self.refresh_bc("cur")
        for d, blk in self.dom.levels.items():
            mask = self.ops(d).fluid & blk.leaf[:, None, None, None]
            vals = _interior(blk.cur).transpose(0, 2, 3, 4, 1)[mask]
            if vals.size and not np.isfinite(vals).all():
                raise SolverDivergence("non-finite state after step")
        self.time += self.params.dt
        self.step_count += 1
        return self.time
