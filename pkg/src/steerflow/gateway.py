"""Wire protocol gateway: length-prefixed JSON over TCP, the same payloads
over WebSocket, and static assets for the browser console.

Frames on TCP are a 4-byte big-endian length followed by UTF-8 JSON.  The
WebSocket side implements the minimal server half of RFC 6455 (masked client
text frames, unmasked server frames, ping/pong, close) so no extra
dependencies are needed.  See protocol.md for every message shape.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import socket
import socketserver
import struct
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .ckptio import CheckpointFile
from .geometry import Box
from .steering import BranchPoint, Mode, Session, SteeringCommand, SteeringError
from .topology import WindowQuery

log = logging.getLogger(__name__)

_WS_MAGIC = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------


def send_frame(sock: socket.socket, payload: dict):
    raw = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack(">I", len(raw)) + raw)


def recv_frame(sock: socket.socket):
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (n,) = struct.unpack(">I", head)
    if n > 1 << 28:
        raise ValueError(f"frame of {n} bytes refused")
    body = _recv_exact(sock, n)
    if body is None:
        return None
    return json.loads(body.decode("utf-8"))


def _recv_exact(sock, n):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


# ---------------------------------------------------------------------------
# message dispatch (shared between TCP and WebSocket)
# ---------------------------------------------------------------------------


class GatewayCore:
    """Routes protocol messages to the session; owns the step loop."""

    def __init__(self, session: Session, run_until: float | None = None):
        self.session = session
        self.run_until = run_until
        self._subscribers: list = []   # callables taking a dict
        self._sub_lock = threading.Lock()
        self._stop = threading.Event()
        self._runner: threading.Thread | None = None
        session.sim.step_listeners.append(self._on_step)

    # -- step loop ---------------------------------------------------------------

    def _on_step(self, step: int, t: float):
        self.broadcast({"type": "event", "step": step, "t": t})

    def start(self, run: bool = True):
        self.session.mode = Mode.RUNNING if run else Mode.PAUSED
        self._runner = threading.Thread(target=self._loop, daemon=True)
        self._runner.start()

    def stop(self):
        self._stop.set()
        if self._runner is not None:
            self._runner.join(timeout=10)

    def _loop(self):
        while not self._stop.is_set():
            if self.session.mode is not Mode.RUNNING:
                time.sleep(0.01)
                continue
            end = self.run_until or self.session.sim.setup.end_time
            if self.session.sim.solver.time >= end - 1e-12:
                self.session.mode = Mode.PAUSED
                self.broadcast({"type": "finished", "t": self.session.sim.solver.time})
                continue
            self.session.step()

    # -- pub/sub --------------------------------------------------------------------

    def subscribe(self, push):
        with self._sub_lock:
            self._subscribers.append(push)

    def unsubscribe(self, push):
        with self._sub_lock:
            if push in self._subscribers:
                self._subscribers.remove(push)

    def broadcast(self, payload: dict):
        with self._sub_lock:
            subs = list(self._subscribers)
        for push in subs:
            try:
                push(payload)
            except Exception:
                self.unsubscribe(push)

    # -- dispatch ----------------------------------------------------------------------

    def handle(self, msg: dict, push=None) -> dict:
        try:
            kind = msg.get("type")
            rid = msg.get("id")
            out = self._dispatch(kind, msg, push)
            if rid is not None:
                out["id"] = rid
            return out
        except (SteeringError, KeyError, ValueError, TypeError) as e:
            reply = {"type": "error", "error": f"{type(e).__name__}: {e}"}
            if isinstance(msg, dict) and msg.get("id") is not None:
                reply["id"] = msg["id"]
            return reply

    def _dispatch(self, kind, msg, push):
        ses = self.session
        if kind == "window_query":
            w = msg["window"]
            q = WindowQuery(window=Box((w[0], w[1], w[2]), (w[3], w[4], w[5])),
                            budget=int(msg["budget"]),
                            fields=tuple(msg.get("fields", ("u", "v", "w", "p", "T"))))
            return ses.window_query(q)
        if kind == "snapshot_window":
            w = msg["window"]
            q = WindowQuery(window=Box((w[0], w[1], w[2]), (w[3], w[4], w[5])),
                            budget=int(msg["budget"]),
                            fields=tuple(msg.get("fields", ("u", "v", "w", "p", "T"))))
            path = msg.get("file") or ses.sim.file.path
            sel, values = CheckpointFile(path).offline_select_window(float(msg["t"]), q)
            entries = []
            with ses.lock:
                f = CheckpointFile(path)
                import h5py
                import numpy as np
                with h5py.File(f.path, "r") as h:
                    grp = f._group_for(h, float(msg["t"]))
                    bbox = grp["bounding_box"][...]
                    uid_rows = {int(u): i for i, u in
                                enumerate(grp["grid_property"][:, 0])}
            for uid, strides in sel.entries:
                block = values[uid]
                entries.append({
                    "uid": f"{uid:#018x}", "stride": strides[0],
                    "bbox": list(map(float, bbox[uid_rows[uid]])),
                    "cells": [block.shape[3], block.shape[2], block.shape[1]],
                    "values": [round(float(v), 9) for v in block.ravel()],
                })
            return {"type": "window_data", "level": sel.level,
                    "point_count": sel.point_count, "fields": list(q.fields),
                    "entries": entries, "t": float(msg["t"]), "offline": True}
        if kind == "command":
            cmd = SteeringCommand.from_json(msg)
            out = ses.submit(cmd)
            return {"type": "command_ack", **out}
        if kind == "reload":
            bp = BranchPoint(file=msg["file"], t=float(msg["t"]))
            pending = [SteeringCommand.from_json(m) for m in msg.get("commands", [])]
            bp.pending.extend(pending)
            was_running = ses.mode is Mode.RUNNING
            ses.mode = Mode.PAUSED
            path = ses.reload(bp)
            ses.sim.step_listeners.append(self._on_step)
            if was_running:
                ses.mode = Mode.RUNNING
            self.broadcast({"type": "branches_changed"})
            return {"type": "reload_ack", "file": path, "t": float(msg["t"])}
        if kind == "timesteps":
            path = msg.get("file") or (ses.sim.file.path if ses.sim.file else None)
            times = CheckpointFile(path).list_timesteps() if path else []
            return {"type": "timesteps", "file": path, "times": times}
        if kind == "branches":
            return ses.branch_tree()
        if kind == "pause":
            ses.mode = Mode.PAUSED
            return {"type": "mode", "mode": ses.mode.value}
        if kind == "resume":
            ses.mode = Mode.RUNNING
            return {"type": "mode", "mode": ses.mode.value}
        if kind == "subscribe":
            if push is not None:
                self.subscribe(push)
            return {"type": "subscribed"}
        if kind == "unsubscribe":
            if push is not None:
                self.unsubscribe(push)
            return {"type": "unsubscribed"}
        if kind == "domain":
            geom = ses.sim.dom.geom
            return {
                "type": "domain",
                "box": list(geom.domain_box.as_row()),
                "r": list(geom.r), "s": list(geom.s), "d_max": geom.d_max,
                "fields": ["u", "v", "w", "p", "T"],
                "max_budget": 200_000,
                "t": ses.sim.solver.time,
                "step": ses.sim.solver.step_count,
                "mode": ses.mode.value,
                "file": ses.sim.file.path if ses.sim.file else None,
            }
        raise ValueError(f"unknown message type {kind!r}")


# ---------------------------------------------------------------------------
# TCP server
# ---------------------------------------------------------------------------


class _TcpHandler(socketserver.BaseRequestHandler):
    def handle(self):
        core: GatewayCore = self.server.core
        sock = self.request
        lock = threading.Lock()

        def push(payload):
            with lock:
                send_frame(sock, payload)

        try:
            while True:
                try:
                    msg = recv_frame(sock)
                except (ValueError, json.JSONDecodeError) as e:
                    push({"type": "error", "error": str(e)})
                    continue
                if msg is None:
                    break
                reply = core.handle(msg, push=push)
                push(reply)
        except (ConnectionError, OSError):
            pass
        finally:
            core.unsubscribe(push)


class TcpGateway(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, core: GatewayCore, host="127.0.0.1", port=0):
        super().__init__((host, port), _TcpHandler)
        self.core = core

    @property
    def port(self):
        return self.server_address[1]


# ---------------------------------------------------------------------------
# WebSocket + static HTTP
# ---------------------------------------------------------------------------


def _ws_accept_key(key: str) -> str:
    digest = hashlib.sha1((key + _WS_MAGIC).encode()).digest()
    return base64.b64encode(digest).decode()


def ws_encode_text(payload: str) -> bytes:
    data = payload.encode("utf-8")
    n = len(data)
    head = b"\x81"  # FIN + text
    if n < 126:
        head += bytes([n])
    elif n < (1 << 16):
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + data


def ws_read_message(rfile):
    """One complete (possibly fragmented) client message; None on close."""
    parts = []
    while True:
        head = rfile.read(2)
        if len(head) < 2:
            return None
        fin = bool(head[0] & 0x80)
        opcode = head[0] & 0x0F
        masked = bool(head[1] & 0x80)
        n = head[1] & 0x7F
        if n == 126:
            (n,) = struct.unpack(">H", rfile.read(2))
        elif n == 127:
            (n,) = struct.unpack(">Q", rfile.read(8))
        mask = rfile.read(4) if masked else b"\x00" * 4
        data = bytearray(rfile.read(n))
        if masked:
            for i in range(n):
                data[i] ^= mask[i % 4]
        if opcode == 0x8:  # close
            return None
        if opcode == 0x9:  # ping: caller answers with pong via returned marker
            return ("ping", bytes(data))
        if opcode in (0x1, 0x2, 0x0):
            parts.append(bytes(data))
            if fin:
                return ("text", b"".join(parts))
        # pong (0xA) and unknown opcodes are ignored


class _HttpWsHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("http: " + fmt, *args)

    def do_GET(self):
        if self.headers.get("Upgrade", "").lower() == "websocket":
            self._websocket()
            return
        self._static()

    def _static(self):
        root = self.server.static_root
        path = self.path.split("?", 1)[0]
        if path == "/":
            path = "/index.html"
        full = os.path.realpath(os.path.join(root, path.lstrip("/"))) if root else None
        if not root or not full.startswith(os.path.realpath(root)) \
           or not os.path.isfile(full):
            body = (b"<html><body><h1>steerflow gateway</h1>"
                    b"<p>No console bundle found. Build the frontend and serve "
                    b"again, or connect over TCP/WebSocket.</p></body></html>")
            self.send_response(200 if path == "/index.html" else 404)
            self.send_header("Content-Type", "text/html")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
            return
        ctype = {
            ".html": "text/html", ".js": "text/javascript", ".mjs": "text/javascript",
            ".css": "text/css", ".map": "application/json", ".json": "application/json",
        }.get(os.path.splitext(full)[1], "application/octet-stream")
        with open(full, "rb") as f:
            body = f.read()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _websocket(self):
        key = self.headers.get("Sec-WebSocket-Key")
        if not key:
            self.send_error(400, "missing websocket key")
            return
        self.send_response(101, "Switching Protocols")
        self.send_header("Upgrade", "websocket")
        self.send_header("Connection", "Upgrade")
        self.send_header("Sec-WebSocket-Accept", _ws_accept_key(key))
        self.end_headers()
        core: GatewayCore = self.server.core
        wlock = threading.Lock()

        def push(payload):
            raw = ws_encode_text(json.dumps(payload, separators=(",", ":")))
            with wlock:
                self.wfile.write(raw)
                self.wfile.flush()

        try:
            while True:
                msg = ws_read_message(self.rfile)
                if msg is None:
                    break
                kind, data = msg
                if kind == "ping":
                    with wlock:
                        self.wfile.write(b"\x8a" + bytes([len(data)]) + data)
                    continue
                try:
                    parsed = json.loads(data.decode("utf-8"))
                except json.JSONDecodeError as e:
                    push({"type": "error", "error": f"bad json: {e}"})
                    continue
                push(core.handle(parsed, push=push))
        except (ConnectionError, OSError, BrokenPipeError):
            pass
        finally:
            core.unsubscribe(push)
            self.close_connection = True


class HttpWsGateway(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, core: GatewayCore, host="127.0.0.1", port=0, static_root=None):
        super().__init__((host, port), _HttpWsHandler)
        self.core = core
        self.static_root = static_root

    @property
    def port(self):
        return self.server_address[1]


# ---------------------------------------------------------------------------
# combined server
# ---------------------------------------------------------------------------


class SteeringServer:
    """Step loop + TCP gateway + WebSocket/static gateway around one session."""

    def __init__(self, session: Session, tcp_port=0, http_port=0,
                 static_root=None, run=True, run_until=None):
        self.core = GatewayCore(session, run_until=run_until)
        self.tcp = TcpGateway(self.core, port=tcp_port)
        self.http = HttpWsGateway(self.core, port=http_port, static_root=static_root)
        self._threads = []
        self._run = run

    def start(self):
        self.core.start(run=self._run)
        for srv in (self.tcp, self.http):
            th = threading.Thread(target=srv.serve_forever, daemon=True)
            th.start()
            self._threads.append(th)
        return self

    def stop(self):
        self.core.stop()
        for srv in (self.tcp, self.http):
            srv.shutdown()
            srv.server_close()


class GatewayClient:
    """Minimal TCP client for tests and scripts."""

    def __init__(self, port: int, host="127.0.0.1", timeout=30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._pushed = []

    def request(self, msg: dict) -> dict:
        send_frame(self.sock, msg)
        while True:
            reply = recv_frame(self.sock)
            if reply is None:
                raise ConnectionError("gateway closed")
            if msg.get("id") is not None and reply.get("id") != msg.get("id") \
               and reply.get("type") in ("event", "branches_changed", "finished"):
                self._pushed.append(reply)
                continue
            return reply

    def drain_events(self, seconds: float):
        self.sock.settimeout(seconds)
        out = list(self._pushed)
        self._pushed.clear()
        try:
            while True:
                f = recv_frame(self.sock)
                if f is None:
                    break
                out.append(f)
        except (TimeoutError, socket.timeout):
            pass
        self.sock.settimeout(30.0)
        return out

    def close(self):
        self.sock.close()
