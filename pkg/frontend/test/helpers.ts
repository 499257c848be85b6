import type { ApiClient } from "../src/api.js";
import type { ApiEdge, ApiNode, Subgraph } from "../src/types.js";

export function makeNode(id: number, name: string, label = "Tool"): ApiNode {
  return {
    id,
    category: label.toUpperCase(),
    label,
    name,
    display_names: [name],
    attributes: {},
  };
}

export function makeEdge(src: number, dst: number, rel = "USE"): ApiEdge {
  return { src, dst, rel_class: rel, verb: null, step_order: null, confidence: 0.9 };
}

/**
 * In-memory stand-in for ApiClient backed by a fixed adjacency map.
 * Applies the same neighbor `limit` contract as the server.
 */
export class FakeApi {
  calls = 0;

  constructor(
    private readonly nodes: Map<number, ApiNode>,
    private readonly edges: ApiEdge[],
  ) {}

  async neighbors(id: number, limit: number): Promise<Subgraph> {
    this.calls += 1;
    if (!this.nodes.has(id)) throw new Error("404 node not found");
    const touching = this.edges.filter((e) => e.src === id || e.dst === id);
    const neighborIds: number[] = [];
    for (const e of touching) {
      const other = e.src === id ? e.dst : e.src;
      if (!neighborIds.includes(other)) neighborIds.push(other);
      if (neighborIds.length >= limit) break;
    }
    const keep = new Set([id, ...neighborIds]);
    return {
      nodes: [...keep].map((n) => this.nodes.get(n)!),
      edges: touching.filter((e) => keep.has(e.src) && keep.has(e.dst)),
    };
  }

  asClient(): ApiClient {
    return this as unknown as ApiClient;
  }
}

/** Hub node 1 connected to 2..n+1, plus optional extra edges. */
export function hubApi(fan: number, extraEdges: ApiEdge[] = []): FakeApi {
  const nodes = new Map<number, ApiNode>();
  nodes.set(1, makeNode(1, "hub", "Actor"));
  const edges: ApiEdge[] = [];
  for (let i = 2; i <= fan + 1; i++) {
    nodes.set(i, makeNode(i, `n${i}`));
    edges.push(makeEdge(1, i));
  }
  for (const e of extraEdges) {
    if (!nodes.has(e.src)) nodes.set(e.src, makeNode(e.src, `n${e.src}`));
    if (!nodes.has(e.dst)) nodes.set(e.dst, makeNode(e.dst, `n${e.dst}`));
    edges.push(e);
  }
  return new FakeApi(nodes, edges);
}
