"""Run configuration: TOML parsing, validation and canonical round-trip."""

from __future__ import annotations

import io
import os
from dataclasses import asdict

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .geometry import Box, GridGeometry
from .runtime import BoundaryItem, RunSetup
from .solver import FluidProperties, SolverParams

PRESET_DIR = os.path.join(os.path.dirname(__file__), "presets")


class ConfigError(ValueError):
    pass


def preset_path(name: str) -> str:
    p = os.path.join(PRESET_DIR, f"{name}.toml")
    if not os.path.exists(p):
        avail = sorted(f[:-5] for f in os.listdir(PRESET_DIR) if f.endswith(".toml"))
        raise ConfigError(f"unknown preset {name!r}; available: {avail}")
    return p


def load_config(path_or_preset: str) -> "RunSetup":
    """Parse a TOML config file (or a shipped preset name) into a RunSetup."""
    path = path_or_preset
    if not os.path.exists(path):
        path = preset_path(path_or_preset)
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    return parse_config(raw)


def _box(values) -> Box:
    v = [float(x) for x in values]
    if len(v) != 6:
        raise ConfigError(f"box needs 6 numbers, got {values!r}")
    return Box((v[0], v[1], v[2]), (v[3], v[4], v[5]))


def parse_config(raw: dict) -> RunSetup:
    try:
        g = raw["geometry"]
        geometry = GridGeometry(
            r=tuple(int(x) for x in g["refinement"]),
            s=tuple(int(x) for x in g["block_size"]),
            d_max=int(g["max_depth"]),
            domain_box=_box(g["domain"]))
    except KeyError as e:
        raise ConfigError(f"geometry section missing key {e}") from None
    except ValueError as e:
        raise ConfigError(str(e)) from None

    regions = []
    for item in g.get("refine", []):
        regions.append((_box(item["box"]), int(item["depth"])))
    if not regions:
        regions = [(geometry.domain_box, geometry.d_max)]

    f = raw.get("fluid", {})
    props = FluidProperties(
        rho_inf=float(f.get("rho_inf", 1.0)),
        mu=float(f.get("mu", 1e-3)),
        beta=float(f.get("beta", 0.0)),
        t_inf=float(f.get("t_inf", 293.15)),
        g=tuple(float(x) for x in f.get("gravity", (0.0, 0.0, 0.0))),
        k_cond=float(f.get("k_cond", 0.0257)),
        c_p=float(f.get("c_p", 1005.0)),
        q_int=float(f.get("q_int", 0.0)))

    s = raw.get("solver", {})
    params = SolverParams(
        dt=float(s.get("dt", 1e-3)),
        nu1=int(s.get("nu1", 2)), nu2=int(s.get("nu2", 2)),
        omega=float(s.get("omega", 0.8)),
        eps_mg=float(s.get("eps_mg", 1e-6)),
        max_cycles=int(s.get("max_cycles", 400)),
        cfl_limit=float(s.get("cfl_limit", 1.0)),
        convection_blend=float(s.get("convection_blend", 0.0)))

    boundaries = []
    for b in raw.get("boundary", []):
        kind = b.get("kind")
        if kind not in ("inflow", "outflow", "wall_noslip", "wall_slip",
                        "obstacle", "temp_dirichlet"):
            raise ConfigError(f"boundary {b.get('name')!r}: unknown kind {kind!r}")
        cyl = None
        if "cylinder" in b:
            cyl = (tuple(float(x) for x in b["cylinder"]["center"]),
                   float(b["cylinder"]["radius"]))
        boundaries.append(BoundaryItem(
            name=str(b.get("name", f"item{len(boundaries)}")),
            kind=kind,
            faces=tuple(b.get("faces", ())),
            box=_box(b["box"]) if "box" in b else None,
            cylinder=cyl,
            velocity=tuple(float(x) for x in b.get("velocity", (0.0, 0.0, 0.0))),
            profile=str(b.get("profile", "uniform")),
            u_max=float(b.get("u_max", 0.0)),
            temperature=float(b["temperature"]) if "temperature" in b else None))

    r = raw.get("run", {})
    ini = raw.get("initial", {})
    setup = RunSetup(
        geometry=geometry,
        refine_regions=regions,
        props=props,
        params=params,
        boundaries=boundaries,
        ranks=int(r.get("ranks", 1)),
        aggregators=int(r.get("aggregators", 1)),
        snapshot_interval=float(r.get("snapshot_interval", 0.1)),
        end_time=float(r.get("end_time", 1.0)),
        output=str(r.get("output", "run.h5")),
        initial_velocity=tuple(float(x) for x in ini.get("velocity", (0.0, 0.0, 0.0))),
        initial_temperature=float(ini.get("temperature", props.t_inf)),
        perturbation=float(ini.get("perturbation", 0.0)),
        inflow_ramp=float(ini.get("inflow_ramp", 0.0)),
        seal_mode=str(r.get("seal_mode", "cells")))
    if setup.ranks < 1:
        raise ConfigError("run.ranks must be >= 1")
    if setup.end_time <= 0:
        raise ConfigError("run.end_time must be positive")
    return setup


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, int):
        return str(int(v))
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if hasattr(v, "item"):  # numpy scalars
        return _fmt(v.item())
    raise TypeError(f"cannot format {v!r}")


def dump_config(setup: RunSetup) -> str:
    """Canonical TOML rendering; parse(dump(parse(x))) == parse(x)."""
    out = io.StringIO()
    g = setup.geometry
    out.write("[geometry]\n")
    out.write(f"domain = {_fmt(list(g.domain_box.as_row()))}\n")
    out.write(f"refinement = {_fmt(list(g.r))}\n")
    out.write(f"block_size = {_fmt(list(g.s))}\n")
    out.write(f"max_depth = {g.d_max}\n")
    for box, depth in setup.refine_regions:
        out.write("\n[[geometry.refine]]\n")
        out.write(f"box = {_fmt(list(box.as_row()))}\n")
        out.write(f"depth = {depth}\n")
    p = setup.props
    out.write("\n[fluid]\n")
    out.write(f"rho_inf = {_fmt(p.rho_inf)}\nmu = {_fmt(p.mu)}\n")
    out.write(f"beta = {_fmt(p.beta)}\nt_inf = {_fmt(p.t_inf)}\n")
    out.write(f"gravity = {_fmt(list(p.g))}\n")
    out.write(f"k_cond = {_fmt(p.k_cond)}\nc_p = {_fmt(p.c_p)}\nq_int = {_fmt(p.q_int)}\n")
    sp = setup.params
    out.write("\n[solver]\n")
    out.write(f"dt = {_fmt(sp.dt)}\nnu1 = {sp.nu1}\nnu2 = {sp.nu2}\n")
    out.write(f"omega = {_fmt(sp.omega)}\neps_mg = {_fmt(sp.eps_mg)}\n")
    out.write(f"max_cycles = {sp.max_cycles}\ncfl_limit = {_fmt(sp.cfl_limit)}\n")
    out.write(f"convection_blend = {_fmt(sp.convection_blend)}\n")
    out.write("\n[run]\n")
    out.write(f"ranks = {setup.ranks}\naggregators = {setup.aggregators}\n")
    out.write(f"snapshot_interval = {_fmt(setup.snapshot_interval)}\n")
    out.write(f"end_time = {_fmt(setup.end_time)}\noutput = {_fmt(setup.output)}\n")
    out.write(f"seal_mode = {_fmt(setup.seal_mode)}\n")
    out.write("\n[initial]\n")
    out.write(f"velocity = {_fmt(list(setup.initial_velocity))}\n")
    out.write(f"temperature = {_fmt(setup.initial_temperature)}\n")
    out.write(f"perturbation = {_fmt(setup.perturbation)}\n")
    out.write(f"inflow_ramp = {_fmt(setup.inflow_ramp)}\n")
    for b in setup.boundaries:
        out.write("\n[[boundary]]\n")
        out.write(f"name = {_fmt(b.name)}\nkind = {_fmt(b.kind)}\n")
        if b.faces:
            out.write(f"faces = {_fmt(list(b.faces))}\n")
        if b.box is not None:
            out.write(f"box = {_fmt(list(b.box.as_row()))}\n")
        if b.cylinder is not None:
            out.write("cylinder = { center = %s, radius = %s }\n"
                      % (_fmt(list(b.cylinder[0])), _fmt(b.cylinder[1])))
        if b.velocity != (0.0, 0.0, 0.0):
            out.write(f"velocity = {_fmt(list(b.velocity))}\n")
        if b.profile != "uniform":
            out.write(f"profile = {_fmt(b.profile)}\n")
        if b.u_max:
            out.write(f"u_max = {_fmt(b.u_max)}\n")
        if b.temperature is not None:
            out.write(f"temperature = {_fmt(b.temperature)}\n")
    return out.getvalue()
