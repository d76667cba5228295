// WebSocket client: correlation ids, at most one in-flight window query,
// step-event subscription.

import type { CommandMessage, ServerMessage, Vec6, WindowData } from "./protocol.js";

type Pending = { resolve: (m: ServerMessage) => void; reject: (e: Error) => void };

export class GatewayClient {
  private ws: WebSocket;
  private nextId = 1;
  private pending = new Map<number, Pending>();
  private queryInFlight = false;
  private supersededQuery: { msg: Record<string, unknown>; p: Pending } | null = null;
  onEvent: ((m: ServerMessage) => void) | null = null;
  ready: Promise<void>;

  constructor(url: string) {
    this.ws = new WebSocket(url);
    this.ready = new Promise((resolve, reject) => {
      this.ws.onopen = () => resolve();
      this.ws.onerror = () => reject(new Error(`cannot reach ${url}`));
    });
    this.ws.onmessage = (ev) => this.dispatch(JSON.parse(ev.data as string));
  }

  private dispatch(msg: ServerMessage & { id?: number }) {
    if (msg.id !== undefined && this.pending.has(msg.id)) {
      const p = this.pending.get(msg.id)!;
      this.pending.delete(msg.id);
      p.resolve(msg);
      return;
    }
    this.onEvent?.(msg);
  }

  request<T extends ServerMessage>(msg: Record<string, unknown>): Promise<T> {
    const id = this.nextId++;
    return new Promise<T>((resolve, reject) => {
      this.pending.set(id, { resolve: resolve as (m: ServerMessage) => void, reject });
      this.ws.send(JSON.stringify({ ...msg, id }));
    });
  }

  /**
   * Window query with client-side supersession: while one query is in
   * flight, newer ones replace the queued follow-up instead of piling up.
   */
  async query(window: Vec6, budget: number, fields: string[],
              snapshot?: { file?: string; t: number }): Promise<WindowData | null> {
    const msg: Record<string, unknown> = snapshot
      ? { type: "snapshot_window", window, budget, fields, ...snapshot }
      : { type: "window_query", window, budget, fields };
    if (this.queryInFlight) {
      return new Promise((resolve, reject) => {
        if (this.supersededQuery) {
          this.supersededQuery.p.resolve(null as unknown as ServerMessage);
        }
        this.supersededQuery = {
          msg,
          p: { resolve: resolve as (m: ServerMessage | null) => void, reject } as Pending,
        };
      }) as Promise<WindowData | null>;
    }
    this.queryInFlight = true;
    try {
      const out = await this.request<WindowData>(msg);
      return out.type === "window_data" ? out : null;
    } finally {
      this.queryInFlight = false;
      const next = this.supersededQuery;
      this.supersededQuery = null;
      if (next) {
        this.query(next.msg.window as Vec6, next.msg.budget as number,
                   next.msg.fields as string[]).then(
          (m) => next.p.resolve(m as unknown as ServerMessage),
          next.p.reject);
      }
    }
  }

  command(cmd: CommandMessage) {
    return this.request<ServerMessage>(cmd as unknown as Record<string, unknown>);
  }

  subscribe() {
    return this.request({ type: "subscribe" });
  }

  close() {
    this.ws.close();
  }
}
