// Console wiring: live/snapshot views, pan/zoom, command entry, timeline.

import { GatewayClient } from "./client.js";
import { renderWindow } from "./heatmap.js";
import type { Branches, DomainInfo, Vec6, WindowData } from "./protocol.js";
import { buildTimeline, flatten } from "./timeline.js";
import { fullWindow, pan, windowInsideDomain, zoom, type ViewState } from "./view.js";

const $ = (id: string) => document.getElementById(id)!;

async function start() {
  const url = `ws://${location.host}/ws`;
  const client = new GatewayClient(url);
  await client.ready;
  const domain = (await client.request<DomainInfo>({ type: "domain" }));
  const canvas = $("view") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;

  const view: ViewState = {
    window: fullWindow(domain.box),
    budget: 4096,
    field: "u",
    live: true,
    snapshotTime: null,
  };
  let lastFrame: WindowData | null = null;
  let lastStep = -1;
  let cachedFields = ["u", "v", "w", "p", "T"];

  const status = (s: string) => { $("status").textContent = s; };

  async function refresh() {
    const snap = !view.live && view.snapshotTime !== null
      ? { t: view.snapshotTime } : undefined;
    const frame = await client.query(view.window, view.budget, cachedFields, snap);
    if (!frame) return;
    if (!snap && frame.step !== undefined && frame.step < lastStep) return; // stale
    lastStep = frame.step ?? lastStep;
    lastFrame = frame;
    draw();
  }

  function draw() {
    if (!lastFrame) return;
    const stats = renderWindow(ctx, canvas.width, canvas.height, view.window,
                               lastFrame, { field: view.field, arrows: true });
    status(`level ${stats.level}, ${stats.drawnPoints} pts `
      + `(budget ${view.budget}), t=${lastFrame.t?.toFixed(3) ?? "?"}`
      + `${lastFrame.offline ? " [snapshot]" : ""}`);
  }

  // field toggle re-renders from the cached frame: no re-query needed
  ($("field") as HTMLSelectElement).onchange = (e) => {
    view.field = (e.target as HTMLSelectElement).value;
    draw();
  };
  ($("budget") as HTMLInputElement).onchange = (e) => {
    view.budget = Math.max(1, Number((e.target as HTMLInputElement).value));
    refresh();
  };

  // pan with drag, zoom with wheel
  let dragging: [number, number] | null = null;
  canvas.onmousedown = (e) => { dragging = [e.offsetX, e.offsetY]; };
  window.onmouseup = () => { dragging = null; };
  canvas.onmousemove = (e) => {
    if (!dragging) return;
    const [px, py] = dragging;
    dragging = [e.offsetX, e.offsetY];
    const wx = view.window[3] - view.window[0];
    const wy = view.window[4] - view.window[1];
    view.window = pan(view.window, domain.box,
                      (-(e.offsetX - px) / canvas.width) * wx,
                      ((e.offsetY - py) / canvas.height) * wy);
    refresh();
  };
  canvas.onwheel = (e) => {
    e.preventDefault();
    view.window = zoom(view.window, domain.box, e.deltaY > 0 ? 1.25 : 0.8,
                       e.offsetX / canvas.width, 1 - e.offsetY / canvas.height);
    refresh();
  };

  // steering form
  $("send-obstacle").onclick = async () => {
    const box = ($("obstacle-box") as HTMLInputElement).value
      .split(",").map(Number) as Vec6;
    if (box.length !== 6 || box.some((v) => !isFinite(v))
        || !windowInsideDomain(box, domain.box)) {
      status("rejected locally: box must be 6 finite numbers inside the domain");
      return;
    }
    const ack = await client.command({ type: "command", kind: "add_obstacle", box });
    status(`command: ${JSON.stringify(ack)}`);
  };
  $("send-temp").onclick = async () => {
    const target = ($("bc-target") as HTMLInputElement).value;
    const temperature = Number(($("bc-temp") as HTMLInputElement).value);
    if (!isFinite(temperature)) { status("temperature must be finite"); return; }
    const ack = await client.command({ type: "command", kind: "set_bc", target, temperature });
    status(`command: ${JSON.stringify(ack)}`);
  };
  $("pause").onclick = () => client.request({ type: "pause" });
  $("resume").onclick = () => { view.live = true; client.request({ type: "resume" }); };

  // timeline
  async function refreshTimeline() {
    const b = await client.request<Branches>({ type: "branches" });
    const roots = buildTimeline(b); // throws on a cyclic graph
    const host = $("timeline");
    host.innerHTML = "";
    for (const node of flatten(roots)) {
      const div = document.createElement("div");
      div.className = "tl-node" + (node.active ? " active" : "");
      div.style.marginLeft = `${node.depth * 18}px`;
      const name = node.file.split("/").pop();
      div.textContent = `${name} (${node.timesteps.length} snaps)`;
      for (const t of node.timesteps) {
        const b2 = document.createElement("button");
        b2.textContent = t.toFixed(2);
        b2.title = `view snapshot t=${t}; shift-click to branch here`;
        b2.onclick = async (ev) => {
          if (ev.shiftKey) {
            await client.request({ type: "reload", file: node.file, t });
            await refreshTimeline();
            view.live = true;
          } else {
            view.live = false;
            view.snapshotTime = t;
          }
          refresh();
        };
        div.appendChild(b2);
      }
      host.appendChild(div);
    }
  }
  $("refresh-branches").onclick = refreshTimeline;

  client.onEvent = (m) => {
    if (m.type === "event" && view.live) refresh();
    if (m.type === "branches_changed") refreshTimeline();
  };
  await client.subscribe();
  await refreshTimeline();
  await refresh();
}

start().catch((e) => { $("status").textContent = String(e); });
