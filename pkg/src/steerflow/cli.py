"""Command-line driver: run, resume, bench, inspect, serve."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys

import numpy as np

from .ckptio import CheckpointFile, CkptError
from .config import ConfigError, dump_config, load_config
from .gateway import SteeringServer
from .geometry import Box
from .runtime import RunSetup, Simulation, simulation_from_file
from .steering import Session
from .topology import WindowQuery

log = logging.getLogger(__name__)


def _print_write(t, stats, out=sys.stdout):
    mb = stats.payload_bytes / 1e6
    bw = mb / stats.seconds if stats.seconds > 0 else float("inf")
    print(f"snapshot t={t:.6f}: {stats.rows} rows, {mb:.2f} MB "
          f"in {stats.seconds * 1e3:.1f} ms ({bw:.1f} MB/s)", file=out)


def cmd_run(args) -> int:
    setup = load_config(args.config)
    if args.output:
        setup.output = args.output
    if args.end is not None:
        setup.end_time = args.end
    if args.ranks is not None:
        setup.ranks = args.ranks
    if args.aggregators is not None:
        setup.aggregators = args.aggregators
    sim = Simulation(setup).build_fresh()
    sim.attach_file(overwrite=True)
    try:
        sim.run_to(on_snapshot=_print_write)
    except Exception as e:
        log.error("run failed: %s", e)
        return 1
    print(f"finished at t={sim.solver.time:.6f} -> {setup.output}")
    return 0


def cmd_resume(args) -> int:
    f = CheckpointFile(args.file)
    try:
        times = f.list_timesteps()
    except CkptError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if not times:
        print("error: file has no snapshots", file=sys.stderr)
        return 1
    t = times[-1] if args.t is None else args.t
    if t not in times:
        print(f"error: t={t} not in {times}", file=sys.stderr)
        return 1
    if t != times[-1] and not args.branch:
        print(f"error: t={t} is not the latest snapshot ({times[-1]}); "
              "resuming from an intermediate snapshot requires --branch",
              file=sys.stderr)
        return 1
    path = args.file
    if args.branch:
        base, ext = os.path.splitext(args.file)
        n = 1
        new_path = f"{base}.b{n}{ext}"
        while os.path.exists(new_path):
            n += 1
            new_path = f"{base}.b{n}{ext}"
        f.open_branch(t, new_path)
        path = new_path
        print(f"branched {args.file} @ t={t} -> {path}")
    sim = simulation_from_file(path, t, ranks=args.ranks)
    until = args.until if args.until is not None else sim.setup.end_time
    if args.steps is not None:
        until = sim.solver.time + args.steps * sim.setup.params.dt
    sim.run_to(until, on_snapshot=_print_write)
    print(f"finished at t={sim.solver.time:.6f} -> {path}")
    return 0


def analytic_snapshot_bytes(n_rows: int, cells: int, children: int) -> int:
    """Expected bytes of the seven row datasets for one snapshot."""
    return n_rows * (3 * cells * 5 * 8 + cells * 4 + 6 * 8 + (1 + children) * 8)


def cmd_bench(args) -> int:
    import psutil

    setup = load_config(args.config)
    if args.depth is not None:
        setup.geometry = type(setup.geometry)(
            r=setup.geometry.r, s=setup.geometry.s, d_max=args.depth,
            domain_box=setup.geometry.domain_box)
        setup.refine_regions = [(setup.geometry.domain_box, args.depth)]
    ranks = [int(x) for x in args.ranks.split(",")]
    aggs = [int(x) for x in args.aggregators.split(",")]
    rows = []
    cells = setup.geometry.cells_per_grid
    children = setup.geometry.children_per_grid
    for P in ranks:
        for A in aggs:
            n_grids = sum(children ** d for d in range(setup.geometry.d_max + 1))
            est = analytic_snapshot_bytes(n_grids, cells, children)
            if est * 2 > psutil.virtual_memory().available:
                print(f"P={P} A={A}: skipped, snapshot of {est/1e9:.2f} GB "
                      "exceeds the memory budget", file=sys.stderr)
                rows.append({"ranks": P, "aggregators": A, "rows": n_grids,
                             "payload_bytes": est, "seconds": "", "mb_per_s": "",
                             "skipped": 1})
                continue
            s = RunSetup(**{**setup.__dict__, "ranks": P, "aggregators": min(A, P),
                            "output": args.output or "bench.h5"})
            sim = Simulation(s).build_fresh()
            sim.attach_file(overwrite=True)
            stats = sim.write_snapshot()
            rows.append({"ranks": P, "aggregators": A, "rows": stats.rows,
                         "payload_bytes": stats.payload_bytes,
                         "seconds": round(stats.seconds, 6),
                         "mb_per_s": round(stats.payload_bytes / 1e6 / stats.seconds, 3),
                         "skipped": 0})
            print(f"P={P} A={A}: {stats.rows} rows, "
                  f"{stats.payload_bytes/1e6:.2f} MB, {stats.seconds*1e3:.1f} ms, "
                  f"{stats.payload_bytes/1e6/stats.seconds:.1f} MB/s")
    fields = ["ranks", "aggregators", "rows", "payload_bytes", "seconds",
              "mb_per_s", "skipped"]
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=fields)
    w.writeheader()
    w.writerows(rows)
    text = out.getvalue()
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(text)
        print(f"wrote {args.csv}")
    else:
        print(text, end="")
    return 0


def cmd_inspect(args) -> int:
    f = CheckpointFile(args.file)
    try:
        times = f.list_timesteps()
    except CkptError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    common = f.common()
    print(f"file: {args.file}")
    print(f"geometry: r={common.r} s={common.s} d_max={common.d_max} "
          f"domain={list(common.domain_box.as_row())}")
    print(f"dt: {common.dt}")
    chain = f.branch_chain()
    if chain:
        for parent, t in chain:
            print(f"branched from {parent} at t={t}")
    print(f"timesteps ({len(times)}): {times}")
    if args.t is None:
        return 0
    if args.t not in times:
        print(f"error: t={args.t} not in file", file=sys.stderr)
        return 1
    if args.window is None:
        return 0
    w = [float(x) for x in args.window.split(",")]
    q = WindowQuery(window=Box((w[0], w[1], w[2]), (w[3], w[4], w[5])),
                    budget=args.budget,
                    fields=tuple(args.fields.split(",")))
    sel, values = f.offline_select_window(args.t, q)
    print(f"selection: level={sel.level} stride={sel.stride} "
          f"points={sel.point_count} grids={len(sel.entries)}")
    writer = csv.writer(sys.stdout)
    writer.writerow(["uid", "stride"] + list(q.fields))
    for uid, strides in sel.entries:
        block = values[uid]
        flat = block.reshape(block.shape[0], -1)
        for k in range(flat.shape[1]):
            writer.writerow([f"{uid:#018x}", strides[0]]
                            + [f"{v:.9g}" for v in flat[:, k]])
    return 0


def cmd_serve(args) -> int:
    setup = load_config(args.config)
    if args.output:
        setup.output = args.output
    sim = Simulation(setup).build_fresh()
    sim.attach_file(overwrite=True)
    session = Session(sim)
    static_root = args.static
    if static_root is None:
        guess = os.path.join(os.path.dirname(os.path.dirname(
            os.path.dirname(os.path.abspath(__file__)))), "frontend", "dist")
        static_root = guess if os.path.isdir(guess) else None
    http_port = args.port if args.port is not None else \
        int(os.environ.get("STEERFLOW_PORT", "8750"))
    server = SteeringServer(session, tcp_port=args.tcp_port, http_port=http_port,
                            static_root=static_root, run=not args.paused)
    server.start()
    print(f"gateway: tcp://127.0.0.1:{server.tcp.port} "
          f"http://127.0.0.1:{server.http.port}/ (console)", flush=True)
    try:
        import time
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        print("shutting down")
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="steerflow",
        description="desk-scale steerable CFD with shared-file checkpoints")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario to its end time")
    p.add_argument("config", help="TOML config path or preset name")
    p.add_argument("--output")
    p.add_argument("--end", type=float)
    p.add_argument("--ranks", type=int)
    p.add_argument("--aggregators", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue (or branch) from a checkpoint")
    p.add_argument("file")
    p.add_argument("--t", type=float, help="snapshot label (default: latest)")
    p.add_argument("--branch", action="store_true")
    p.add_argument("--until", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--ranks", type=int)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("bench", help="write-bandwidth sweep over ranks/aggregators")
    p.add_argument("config")
    p.add_argument("--ranks", default="1,2,4")
    p.add_argument("--aggregators", default="1")
    p.add_argument("--depth", type=int)
    p.add_argument("--csv")
    p.add_argument("--output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="list snapshots, ancestry, window dumps")
    p.add_argument("file")
    p.add_argument("--t", type=float)
    p.add_argument("--window", help="x0,y0,z0,x1,y1,z1")
    p.add_argument("--budget", type=int, default=1000)
    p.add_argument("--fields", default="u,v,w,p,T")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("serve", help="run with the steering gateway attached")
    p.add_argument("config")
    p.add_argument("--port", type=int, help="HTTP/WebSocket port "
                   "(default: env STEERFLOW_PORT or 8750)")
    p.add_argument("--tcp-port", type=int, default=0)
    p.add_argument("--static", help="console asset directory")
    p.add_argument("--paused", action="store_true", help="start paused")
    p.add_argument("--output")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("config", help="print the canonical form of a config")
    p.add_argument("config")
    p.set_defaults(func=lambda a: (print(dump_config(load_config(a.config))), 0)[1])
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("STEERFLOW_LOG", "WARNING"))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
