import { QuadTree, type Body } from "./quadtree.js";
import type { ViewGraph, ViewNode } from "./view.js";

export interface LayoutOptions {
  theta: number;
  repulsion: number;
  springStrength: number;
  springLength: number;
  damping: number;
  maxStep: number;
}

export const DEFAULT_LAYOUT: LayoutOptions = {
  theta: 0.5,
  repulsion: 4000,
  springStrength: 0.02,
  springLength: 90,
  damping: 0.85,
  maxStep: 25,
};

/**
 * One force-directed simulation tick: Barnes-Hut approximated
 * repulsion between all nodes plus spring attraction along edges.
 * Pinned nodes accumulate no movement.
 */
export function layoutStep(view: ViewGraph, opts: LayoutOptions = DEFAULT_LAYOUT): void {
  const nodes = [...view.nodes.values()];
  if (nodes.length === 0) return;

  const bodies = new Map<ViewNode, Body>();
  for (const n of nodes) bodies.set(n, { x: n.x, y: n.y, mass: 1 });
  const tree = new QuadTree([...bodies.values()]);

  const force = new Map<ViewNode, [number, number]>();
  for (const n of nodes) {
    force.set(n, tree.repulsion(bodies.get(n)!, opts.repulsion, opts.theta));
  }

  for (const e of view.edges) {
    const a = view.nodes.get(e.src);
    const b = view.nodes.get(e.dst);
    if (!a || !b || a === b) continue;
    const dx = b.x - a.x;
    const dy = b.y - a.y;
    const dist = Math.sqrt(dx * dx + dy * dy) || 1e-6;
    const f = opts.springStrength * (dist - opts.springLength);
    const fx = (f * dx) / dist;
    const fy = (f * dy) / dist;
    const fa = force.get(a)!;
    const fb = force.get(b)!;
    fa[0] += fx;
    fa[1] += fy;
    fb[0] -= fx;
    fb[1] -= fy;
  }

  for (const n of nodes) {
    if (n.pinned) {
      n.vx = 0;
      n.vy = 0;
      continue;
    }
    const [fx, fy] = force.get(n)!;
    n.vx = (n.vx + fx) * opts.damping;
    n.vy = (n.vy + fy) * opts.damping;
    const step = Math.sqrt(n.vx * n.vx + n.vy * n.vy);
    const scale = step > opts.maxStep ? opts.maxStep / step : 1;
    n.x += n.vx * scale;
    n.y += n.vy * scale;
  }
}
