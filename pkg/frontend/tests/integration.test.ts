// Live gateway integration: spawns `steerflow serve`, talks the TCP framing
// (same JSON payloads as the WebSocket), and checks the console's three
// contracts: rendered point counts stay inside the budget, the branch tree
// stays acyclic across reloads, and a submitted obstacle shows up in the next
// window frame.

import { spawn, type ChildProcess } from "node:child_process";
import net from "node:net";
import path from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { framePoints, type Branches, type Vec6, type WindowData } from "../src/protocol.js";
import { isAcyclic } from "../src/timeline.js";

const here = path.dirname(fileURLToPath(import.meta.url));
const repo = path.resolve(here, "..", "..");

const MINI = `
[geometry]
domain = [0.0, 0.0, 0.0, 2.0, 1.0, 0.125]
refinement = [2, 2, 1]
block_size = [8, 4, 1]
max_depth = 2

[fluid]
mu = 0.005
t_inf = 300.0

[solver]
dt = 0.002
eps_mg = 1e-5
max_cycles = 300

[run]
ranks = 2
snapshot_interval = 0.02
end_time = 30.0
output = "OUT"

[initial]
temperature = 300.0

[[boundary]]
name = "in"
kind = "inflow"
faces = ["west"]
profile = "parabolic"
u_max = 0.5

[[boundary]]
name = "out"
kind = "outflow"
faces = ["east"]
`;

class TcpClient {
  private sock!: net.Socket;
  private buf = Buffer.alloc(0);
  private waiters: ((m: Record<string, unknown>) => void)[] = [];
  private queue: Record<string, unknown>[] = [];
  private nextId = 1;

  async connect(port: number) {
    this.sock = net.createConnection({ port, host: "127.0.0.1" });
    await new Promise<void>((res, rej) => {
      this.sock.once("connect", () => res());
      this.sock.once("error", rej);
    });
    this.sock.on("data", (chunk) => {
      this.buf = Buffer.concat([this.buf, chunk]);
      for (;;) {
        if (this.buf.length < 4) return;
        const n = this.buf.readUInt32BE(0);
        if (this.buf.length < 4 + n) return;
        const msg = JSON.parse(this.buf.subarray(4, 4 + n).toString("utf-8"));
        this.buf = this.buf.subarray(4 + n);
        const w = this.waiters.shift();
        if (w) w(msg);
        else this.queue.push(msg);
      }
    });
  }

  private recv(): Promise<Record<string, unknown>> {
    const q = this.queue.shift();
    if (q) return Promise.resolve(q);
    return new Promise((res) => this.waiters.push(res));
  }

  async request<T>(msg: Record<string, unknown>): Promise<T> {
    const id = this.nextId++;
    const raw = Buffer.from(JSON.stringify({ ...msg, id }), "utf-8");
    const head = Buffer.alloc(4);
    head.writeUInt32BE(raw.length, 0);
    this.sock.write(Buffer.concat([head, raw]));
    for (;;) {
      const reply = await this.recv();
      if (reply.id === id) return reply as T;
      // unsolicited pushes (events) are skipped here
    }
  }

  close() {
    this.sock.destroy();
  }
}

let proc: ChildProcess;
let client: TcpClient;
let runFile: string;

beforeAll(async () => {
  const fs = await import("node:fs/promises");
  const os = await import("node:os");
  const dir = await fs.mkdtemp(path.join(os.tmpdir(), "sf-it-"));
  runFile = path.join(dir, "mini.h5");
  const cfg = path.join(dir, "mini.toml");
  await fs.writeFile(cfg, MINI.replace("OUT", runFile));
  proc = spawn("python3", ["-m", "steerflow.cli", "serve", cfg,
                           "--port", "0", "--tcp-port", "0"],
               { cwd: repo, stdio: ["ignore", "pipe", "pipe"] });
  const port = await new Promise<number>((resolve, reject) => {
    let out = "";
    const t = setTimeout(() => reject(new Error("serve did not start: " + out)), 60000);
    proc.stdout!.on("data", (d) => {
      out += d.toString();
      const m = out.match(/tcp:\/\/127\.0\.0\.1:(\d+)/);
      if (m) { clearTimeout(t); resolve(Number(m[1])); }
    });
    proc.stderr!.on("data", (d) => { out += d.toString(); });
    proc.once("exit", (code) => reject(new Error(`serve exited ${code}: ${out}`)));
  });
  client = new TcpClient();
  await client.connect(port);
}, 90000);

afterAll(() => {
  client?.close();
  proc?.kill("SIGKILL");
});

const FULL: Vec6 = [0, 0, 0, 2.0, 1.0, 0.125];

describe("live gateway", () => {
  it("keeps rendered point counts inside the budget", async () => {
    for (const budget of [1, 16, 100, 900]) {
      const frame = await client.request<WindowData>(
        { type: "window_query", window: FULL, budget, fields: ["u", "v"] });
      expect(frame.type).toBe("window_data");
      expect(frame.point_count).toBeLessThanOrEqual(budget);
      expect(framePoints(frame)).toBeLessThanOrEqual(budget);
      for (const e of frame.entries) {
        expect(e.values).toHaveLength(2 * e.cells[0] * e.cells[1] * e.cells[2]);
      }
    }
  }, 60000);

  it("keeps the branch tree acyclic over three reloads", async () => {
    // let the run produce a few snapshots first
    for (;;) {
      const ts = await client.request<{ times: number[] }>({ type: "timesteps" });
      if (ts.times.length >= 2) break;
      await new Promise((r) => setTimeout(r, 250));
    }
    await client.request({ type: "pause" });
    for (let k = 0; k < 3; k++) {
      const tree = await client.request<Branches>({ type: "branches" });
      const active = tree.nodes.find((n) => n.active)!;
      const t = active.timesteps[active.timesteps.length - 1];
      const ack = await client.request<{ type: string }>(
        { type: "reload", file: active.file, t });
      expect(ack.type).toBe("reload_ack");
      const after = await client.request<Branches>({ type: "branches" });
      expect(isAcyclic(after)).toBe(true);
      expect(after.nodes.length).toBe(tree.nodes.length + 1);
    }
  }, 120000);

  it("reflects a submitted obstacle in the next frame", async () => {
    const box: Vec6 = [0.9, 0.4, 0.0, 1.1, 0.6, 0.125];
    const ack = await client.request<{ status: string }>(
      { type: "command", kind: "add_obstacle", target: "plug", box });
    expect(ack.status).toBe("queued");
    await client.request({ type: "resume" });
    await new Promise((r) => setTimeout(r, 800)); // a few steps pass
    await client.request({ type: "pause" });
    const frame = await client.request<WindowData>(
      { type: "window_query", window: box, budget: 4000, fields: ["u", "v"] });
    const vals = frame.entries.flatMap((e) => e.values);
    expect(vals.length).toBeGreaterThan(0);
    const inner = frame.entries.flatMap((e) => {
      // centre cells of the stamped box footprint must be stilled
      const n = e.cells[0] * e.cells[1] * e.cells[2];
      return e.values.slice(0, n); // u component
    });
    const zeros = inner.filter((v) => v === 0).length;
    expect(zeros).toBeGreaterThan(0);
  }, 60000);

  it("serves offline snapshot windows through the same protocol", async () => {
    const ts = await client.request<{ times: number[] }>({ type: "timesteps" });
    const frame = await client.request<WindowData>(
      { type: "snapshot_window", t: ts.times[0], window: FULL, budget: 50,
        fields: ["T"] });
    expect(frame.type).toBe("window_data");
    expect(frame.offline).toBe(true);
    expect(framePoints(frame)).toBeLessThanOrEqual(50);
  }, 60000);
});
