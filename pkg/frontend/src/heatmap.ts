// Canvas heatmap + velocity arrows for window_data frames.
//
// Sampled cells draw at their real bounding-box positions; a stride-s entry
// paints glyphs s times larger, so decimated regions look coarser instead of
// sparser.

import { colorFor, valueRange } from "./colormap.js";
import { entryValue, framePoints, type Vec6, type WindowData } from "./protocol.js";

export interface RenderStats {
  drawnPoints: number;
  level: number;
  range: [number, number];
}

export interface RenderOptions {
  field: string;
  arrows: boolean;
  fixedRange?: [number, number];
}

export function renderWindow(
  ctx: CanvasRenderingContext2D,
  widthPx: number,
  heightPx: number,
  win: Vec6,
  frame: WindowData,
  opts: RenderOptions,
): RenderStats {
  const f = frame.fields.indexOf(opts.field);
  if (f < 0) throw new Error(`field ${opts.field} not in frame`);
  const uIdx = frame.fields.indexOf("u");
  const vIdx = frame.fields.indexOf("v");

  const wx = win[3] - win[0];
  const wy = win[4] - win[1];
  const sx = widthPx / wx;
  const sy = heightPx / wy;

  ctx.fillStyle = "#11131a";
  ctx.fillRect(0, 0, widthPx, heightPx);

  const all: number[] = [];
  for (const e of frame.entries) {
    const n = e.cells[0] * e.cells[1] * e.cells[2];
    for (let c = 0; c < n; c++) all.push(e.values[f * n + c]);
  }
  const range = opts.fixedRange ?? valueRange(all);

  let drawn = 0;
  let maxSpeed = 1e-9;
  if (opts.arrows && uIdx >= 0 && vIdx >= 0) {
    for (const e of frame.entries) {
      const n = e.cells[0] * e.cells[1] * e.cells[2];
      for (let c = 0; c < n; c++) {
        maxSpeed = Math.max(maxSpeed, Math.hypot(e.values[uIdx * n + c], e.values[vIdx * n + c]));
      }
    }
  }

  for (const e of frame.entries) {
    const [nx, ny, nz] = e.cells;
    const cw = ((e.bbox[3] - e.bbox[0]) / nx) * 1; // cell span covered per sample
    const ch = (e.bbox[4] - e.bbox[1]) / ny;
    // sampled cells sit stride cells apart inside the entry bbox
    const gx = (e.bbox[3] - e.bbox[0]) / nx;
    const gy = (e.bbox[4] - e.bbox[1]) / ny;
    for (let iz = 0; iz < nz; iz++) {
      for (let iy = 0; iy < ny; iy++) {
        for (let ix = 0; ix < nx; ix++) {
          const val = entryValue(e, frame.fields.length, f, ix, iy, iz);
          const x = e.bbox[0] + (ix + 0.5) * gx;
          const y = e.bbox[1] + (iy + 0.5) * gy;
          const px = (x - win[0]) * sx;
          const py = heightPx - (y - win[1]) * sy;
          const gw = Math.max(gx * sx, 1.5);
          const gh = Math.max(gy * sy, 1.5);
          ctx.fillStyle = colorFor(val, range[0], range[1]);
          ctx.fillRect(px - gw / 2, py - gh / 2, gw, gh);
          drawn += 1;
          if (opts.arrows && uIdx >= 0 && vIdx >= 0) {
            const n = nx * ny * nz;
            const cell = ix + nx * (iy + ny * iz);
            const u = e.values[uIdx * n + cell];
            const v = e.values[vIdx * n + cell];
            const len = (Math.hypot(u, v) / maxSpeed) * Math.min(gw, 18);
            if (len > 2) {
              ctx.strokeStyle = "rgba(255,255,255,0.55)";
              ctx.beginPath();
              ctx.moveTo(px, py);
              ctx.lineTo(px + (u / maxSpeed) * len * 3, py - (v / maxSpeed) * len * 3);
              ctx.stroke();
            }
          }
        }
      }
    }
  }
  if (drawn !== framePoints(frame)) {
    throw new Error(`drew ${drawn} points but frame carries ${framePoints(frame)}`);
  }
  return { drawnPoints: drawn, level: frame.level, range };
}
