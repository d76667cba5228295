// Message shapes of the gateway JSON protocol (see ../protocol.md).

export type Vec6 = [number, number, number, number, number, number];

export interface DomainInfo {
  type: "domain";
  box: Vec6;
  r: number[];
  s: number[];
  d_max: number;
  fields: string[];
  max_budget: number;
  t: number;
  step: number;
  mode: "running" | "paused" | "reloading";
  file: string | null;
}

export interface WindowEntry {
  uid: string; // hex string: uint64 exceeds JS safe integers
  stride: number;
  bbox: Vec6;
  cells: [number, number, number]; // nx, ny, nz
  values: number[]; // field-major, z-slowest / x-fastest cell order
}

export interface WindowData {
  type: "window_data";
  level: number;
  point_count: number;
  fields: string[];
  entries: WindowEntry[];
  step?: number;
  t?: number;
  offline?: boolean;
  id?: number;
}

export interface BranchNode {
  file: string;
  timesteps: number[];
  active: boolean;
}

export interface BranchEdge {
  file: string;
  parent: string;
  branch_time: number;
}

export interface Branches {
  type: "branches";
  nodes: BranchNode[];
  edges: BranchEdge[];
}

export interface StepEvent {
  type: "event";
  step: number;
  t: number;
}

export type ServerMessage =
  | DomainInfo
  | WindowData
  | Branches
  | StepEvent
  | { type: "command_ack"; status: "queued" | "rejected"; reason?: string; id?: number }
  | { type: "reload_ack"; file: string; t: number; id?: number }
  | { type: "timesteps"; file: string; times: number[]; id?: number }
  | { type: "mode"; mode: string; id?: number }
  | { type: "subscribed"; id?: number }
  | { type: "branches_changed" }
  | { type: "finished"; t: number }
  | { type: "error"; error: string; id?: number };

export interface CommandMessage {
  type: "command";
  kind: "add_obstacle" | "move_obstacle" | "set_bc" | "refine_region" | "coarsen_region";
  target?: string;
  box?: Vec6;
  cylinder?: { center: [number, number, number]; radius: number };
  delta?: [number, number, number];
  velocity?: [number, number, number];
  temperature?: number;
  depth?: number;
}

/** Total cell count an entry contributes to the display. */
export function entryPoints(e: WindowEntry): number {
  return e.cells[0] * e.cells[1] * e.cells[2];
}

/** Sum of drawable points in a frame; never exceeds the requested budget. */
export function framePoints(frame: WindowData): number {
  return frame.entries.reduce((acc, e) => acc + entryPoints(e), 0);
}

/** Value of field f at cell (ix, iy, iz) inside an entry. */
export function entryValue(
  e: WindowEntry, nFields: number, f: number, ix: number, iy: number, iz: number,
): number {
  const [nx, ny, nz] = e.cells;
  const cell = ix + nx * (iy + ny * iz);
  return e.values[f * nx * ny * nz + cell];
}
