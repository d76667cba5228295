// Branch-tree model for the time-reversal timeline.

import type { Branches } from "./protocol.js";

export interface TimelineNode {
  file: string;
  timesteps: number[];
  parent: string | null;
  branchTime: number | null;
  children: TimelineNode[];
  active: boolean;
  depth: number;
}

/**
 * Build the tree from the server's branches frame. Throws if the edges form
 * a cycle or reference unknown nodes -- the timeline must always be a tree.
 */
export function buildTimeline(b: Branches): TimelineNode[] {
  const nodes = new Map<string, TimelineNode>();
  for (const n of b.nodes) {
    nodes.set(n.file, {
      file: n.file, timesteps: n.timesteps, parent: null, branchTime: null,
      children: [], active: n.active, depth: 0,
    });
  }
  for (const e of b.edges) {
    const child = nodes.get(e.file);
    const parent = nodes.get(e.parent);
    if (!child) throw new Error(`edge for unknown node ${e.file}`);
    if (!parent) continue; // parent file may have been pruned from disk
    child.parent = e.parent;
    child.branchTime = e.branch_time;
    parent.children.push(child);
  }
  // acyclicity: walking parents must terminate for every node
  for (const n of nodes.values()) {
    let hops = 0;
    let cur: TimelineNode | undefined = n;
    while (cur && cur.parent !== null) {
      cur = nodes.get(cur.parent);
      hops += 1;
      if (hops > nodes.size) throw new Error("branch graph has a cycle");
    }
    n.depth = hops;
  }
  const roots = [...nodes.values()].filter((n) => n.parent === null
    || !nodes.has(n.parent));
  return roots;
}

export function flatten(roots: TimelineNode[]): TimelineNode[] {
  const out: TimelineNode[] = [];
  const walk = (n: TimelineNode) => {
    out.push(n);
    for (const c of n.children) walk(c);
  };
  for (const r of roots) walk(r);
  return out;
}

export function isAcyclic(b: Branches): boolean {
  try {
    buildTimeline(b);
    return true;
  } catch {
    return false;
  }
}
