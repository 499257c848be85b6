import type { ApiClient } from "./api.js";
import type { ApiEdge, ApiNode } from "./types.js";

export interface ViewNode {
  data: ApiNode;
  x: number;
  y: number;
  vx: number;
  vy: number;
  pinned: boolean;
  expanded: boolean;
}

interface Snapshot {
  nodes: { data: ApiNode; x: number; y: number; pinned: boolean; expanded: boolean }[];
  edges: ApiEdge[];
  seeds: number[];
  introduced: [number, number[]][];
}

const edgeKey = (e: ApiEdge) => `${e.src}|${e.dst}|${e.rel_class}|${e.verb ?? ""}`;

/** Deterministic placement hash so layout snapshots are reproducible. */
function seedPosition(id: number): [number, number] {
  let h = (id + 1) >>> 0;
  h = Math.imul(h ^ (h >>> 16), 0x45d9f3b) >>> 0;
  h = Math.imul(h ^ (h >>> 16), 0x45d9f3b) >>> 0;
  const a = (h & 0xffff) / 0xffff;
  const b = ((h >>> 16) & 0xffff) / 0xffff;
  return [a * 600 - 300, b * 600 - 300];
}

/**
 * Client-side mirror of a server subgraph: positions, pin flags,
 * expansion state, and a history stack for back navigation.
 */
export class ViewGraph {
  readonly nodes = new Map<number, ViewNode>();
  private edgeMap = new Map<string, ApiEdge>();
  private history: Snapshot[] = [];
  /** nodes added directly (search hits, query merges) — never auto-removed */
  private seeds = new Set<number>();
  /** expander node id -> ids its expansion brought into the view */
  private introducedBy = new Map<number, Set<number>>();
  maxNodes = 400;
  overflowed = 0;

  constructor(private readonly api: ApiClient) {}

  get edges(): ApiEdge[] {
    return [...this.edgeMap.values()];
  }

  nodeIds(): number[] {
    return [...this.nodes.keys()].sort((a, b) => a - b);
  }

  addNode(data: ApiNode): ViewNode {
    const vn = this.place(data);
    this.seeds.add(data.id);
    return vn;
  }

  private place(data: ApiNode): ViewNode {
    const existing = this.nodes.get(data.id);
    if (existing) return existing;
    if (this.nodes.size >= this.maxNodes) {
      this.overflowed += 1;
      throw new RangeError(`view node cap ${this.maxNodes} reached`);
    }
    const [x, y] = seedPosition(data.id);
    const vn: ViewNode = { data, x, y, vx: 0, vy: 0, pinned: false, expanded: false };
    this.nodes.set(data.id, vn);
    return vn;
  }

  addEdge(e: ApiEdge): void {
    if (!this.nodes.has(e.src) || !this.nodes.has(e.dst)) return;
    this.edgeMap.set(edgeKey(e), e);
  }

  pin(id: number, pinned: boolean): void {
    const n = this.nodes.get(id);
    if (n) n.pinned = pinned;
  }

  snapshot(): Snapshot {
    return {
      nodes: [...this.nodes.values()].map((n) => ({
        data: n.data,
        x: n.x,
        y: n.y,
        pinned: n.pinned,
        expanded: n.expanded,
      })),
      edges: this.edges,
      seeds: [...this.seeds],
      introduced: [...this.introducedBy].map(([k, v]) => [k, [...v]]),
    };
  }

  private restore(s: Snapshot): void {
    this.nodes.clear();
    this.edgeMap.clear();
    for (const n of s.nodes) {
      this.nodes.set(n.data.id, { ...n, vx: 0, vy: 0 });
    }
    for (const e of s.edges) this.edgeMap.set(edgeKey(e), e);
    this.seeds = new Set(s.seeds);
    this.introducedBy = new Map(s.introduced.map(([k, v]) => [k, new Set(v)]));
  }

  /** Go back to the previous graph displayed. Returns false at the root. */
  back(): boolean {
    const prior = this.history.pop();
    if (!prior) return false;
    this.restore(prior);
    return true;
  }

  /**
   * Double-click behavior: a collapsed node fetches up to `cap`
   * neighbors and adds them; an expanded node removes the nodes its
   * expansion introduced (and, recursively, anything exclusively
   * downstream of them). The pre-toggle view is pushed to history.
   */
  async toggleExpand(id: number, cap: number): Promise<void> {
    const node = this.nodes.get(id);
    if (!node) throw new Error(`node ${id} not in view`);
    if (!node.expanded) {
      const sub = await this.api.neighbors(id, cap); // before mutating: may throw
      this.history.push(this.snapshot());
      const added = new Set<number>();
      for (const n of sub.nodes) {
        if (n.id === id || this.nodes.has(n.id)) continue;
        try {
          this.place(n);
          added.add(n.id);
        } catch (e) {
          if (!(e instanceof RangeError)) throw e;
        }
      }
      for (const e of sub.edges) this.addEdge(e);
      this.introducedBy.set(id, added);
      node.expanded = true;
    } else {
      this.history.push(this.snapshot());
      this.collapse(id);
    }
  }

  private collapse(id: number): void {
    const node = this.nodes.get(id);
    if (node) node.expanded = false;
    const introduced = this.introducedBy.get(id) ?? new Set<number>();
    this.introducedBy.delete(id);
    for (const child of introduced) {
      if (this.introducedBy.has(child)) this.collapse(child); // downstream expansion
    }
    for (const child of introduced) {
      const vn = this.nodes.get(child);
      if (!vn || vn.pinned || this.seeds.has(child)) continue;
      const keptElsewhere = [...this.introducedBy.values()].some((s) => s.has(child));
      if (!keptElsewhere) this.nodes.delete(child);
    }
    for (const [k, e] of [...this.edgeMap]) {
      if (!this.nodes.has(e.src) || !this.nodes.has(e.dst)) this.edgeMap.delete(k);
    }
  }
}
