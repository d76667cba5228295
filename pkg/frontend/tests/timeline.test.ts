import { describe, expect, it } from "vitest";

import type { Branches } from "../src/protocol.js";
import { buildTimeline, flatten, isAcyclic } from "../src/timeline.js";

function branches(): Branches {
  return {
    type: "branches",
    nodes: [
      { file: "run.h5", timesteps: [0.1, 0.2, 0.3], active: false },
      { file: "run.b1.h5", timesteps: [0.2, 0.4], active: false },
      { file: "run.b2.h5", timesteps: [0.2], active: true },
      { file: "run.b1.b1.h5", timesteps: [0.4], active: false },
    ],
    edges: [
      { file: "run.b1.h5", parent: "run.h5", branch_time: 0.2 },
      { file: "run.b2.h5", parent: "run.h5", branch_time: 0.2 },
      { file: "run.b1.b1.h5", parent: "run.b1.h5", branch_time: 0.4 },
    ],
  };
}

describe("timeline model", () => {
  it("builds the fork tree", () => {
    const roots = buildTimeline(branches());
    expect(roots).toHaveLength(1);
    expect(roots[0].file).toBe("run.h5");
    expect(roots[0].children.map((c) => c.file).sort())
      .toEqual(["run.b1.h5", "run.b2.h5"]);
    const all = flatten(roots);
    expect(all).toHaveLength(4);
    const grandchild = all.find((n) => n.file === "run.b1.b1.h5")!;
    expect(grandchild.depth).toBe(2);
    expect(grandchild.branchTime).toBe(0.4);
  });

  it("marks the active node", () => {
    const all = flatten(buildTimeline(branches()));
    expect(all.filter((n) => n.active).map((n) => n.file)).toEqual(["run.b2.h5"]);
  });

  it("rejects cycles", () => {
    const b = branches();
    b.edges.push({ file: "run.h5", parent: "run.b1.b1.h5", branch_time: 0.1 });
    expect(isAcyclic(b)).toBe(false);
    expect(() => buildTimeline(b)).toThrow(/cycle/);
  });

  it("tolerates pruned parents", () => {
    const b = branches();
    b.nodes = b.nodes.filter((n) => n.file !== "run.h5");
    const roots = buildTimeline(b);
    expect(roots.map((r) => r.file).sort()).toEqual(["run.b1.h5", "run.b2.h5"]);
  });
});
