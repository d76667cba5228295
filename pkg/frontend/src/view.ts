// Window-box state: pan, zoom and clamping against the domain box.

import type { Vec6 } from "./protocol.js";

export interface ViewState {
  window: Vec6;
  budget: number;
  field: string;
  live: boolean;
  snapshotTime: number | null;
}

export function fullWindow(domain: Vec6): Vec6 {
  return [...domain] as Vec6;
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(Math.max(v, lo), hi);
}

/** Shift the window by (dx, dy) in metres, staying inside the domain. */
export function pan(win: Vec6, domain: Vec6, dx: number, dy: number): Vec6 {
  const w = win[3] - win[0];
  const h = win[4] - win[1];
  const x0 = clamp(win[0] + dx, domain[0], domain[3] - w);
  const y0 = clamp(win[1] + dy, domain[1], domain[4] - h);
  return [x0, y0, win[2], x0 + w, y0 + h, win[5]];
}

/**
 * Zoom about a focus point (fx, fy in window fractions 0..1); factor < 1
 * shrinks the window (zooms in). The window never exceeds the domain and
 * never collapses below a thousandth of it per axis.
 */
export function zoom(win: Vec6, domain: Vec6, factor: number, fx = 0.5, fy = 0.5): Vec6 {
  const dw = domain[3] - domain[0];
  const dh = domain[4] - domain[1];
  const w = clamp((win[3] - win[0]) * factor, dw / 1000, dw);
  const h = clamp((win[4] - win[1]) * factor, dh / 1000, dh);
  const cx = win[0] + (win[3] - win[0]) * fx;
  const cy = win[1] + (win[4] - win[1]) * fy;
  let x0 = cx - w * fx;
  let y0 = cy - h * fy;
  x0 = clamp(x0, domain[0], domain[3] - w);
  y0 = clamp(y0, domain[1], domain[4] - h);
  return [x0, y0, win[2], x0 + w, y0 + h, win[5]];
}

export function windowInsideDomain(win: Vec6, domain: Vec6): boolean {
  return (
    win[0] >= domain[0] - 1e-12 && win[1] >= domain[1] - 1e-12 &&
    win[3] <= domain[3] + 1e-12 && win[4] <= domain[4] + 1e-12 &&
    win[0] < win[3] && win[1] < win[4]
  );
}
