/** 2-D quadtree with centre-of-mass aggregation for Barnes-Hut. */

export interface Body {
  x: number;
  y: number;
  mass: number;
}

interface Quad {
  // bounding square (cx, cy, half)
  cx: number;
  cy: number;
  half: number;
  mass: number;
  comX: number;
  comY: number;
  body: Body | null;
  children: (Quad | null)[] | null;
}

function makeQuad(cx: number, cy: number, half: number): Quad {
  return { cx, cy, half, mass: 0, comX: 0, comY: 0, body: null, children: null };
}

function childIndex(q: Quad, b: Body): number {
  return (b.x >= q.cx ? 1 : 0) + (b.y >= q.cy ? 2 : 0);
}

function insert(q: Quad, b: Body, depth = 0): void {
  if (q.mass === 0 && q.body === null && q.children === null) {
    q.body = b;
    q.mass = b.mass;
    q.comX = b.x;
    q.comY = b.y;
    return;
  }
  if (q.children === null) {
    const prior = q.body!;
    q.body = null;
    q.children = [null, null, null, null];
    if (depth < 32) subInsert(q, prior, depth);
    else {
      // coincident points: merge into the aggregate only
    }
  }
  if (depth < 32) subInsert(q, b, depth);
  const total = q.mass + b.mass;
  q.comX = (q.comX * q.mass + b.x * b.mass) / total;
  q.comY = (q.comY * q.mass + b.y * b.mass) / total;
  q.mass = total;
}

function subInsert(q: Quad, b: Body, depth: number): void {
  const i = childIndex(q, b);
  const h = q.half / 2;
  if (q.children![i] === null) {
    q.children![i] = makeQuad(q.cx + (i & 1 ? h : -h), q.cy + (i & 2 ? h : -h), h);
  }
  insert(q.children![i]!, b, depth + 1);
}

export class QuadTree {
  private root: Quad;

  constructor(bodies: Body[]) {
    let minX = Infinity,
      minY = Infinity,
      maxX = -Infinity,
      maxY = -Infinity;
    for (const b of bodies) {
      minX = Math.min(minX, b.x);
      minY = Math.min(minY, b.y);
      maxX = Math.max(maxX, b.x);
      maxY = Math.max(maxY, b.y);
    }
    const half = Math.max(maxX - minX, maxY - minY, 1) / 2 + 1e-9;
    this.root = makeQuad((minX + maxX) / 2, (minY + maxY) / 2, half);
    for (const b of bodies) insert(this.root, b);
  }

  /**
   * Accumulated repulsive force on `b`, approximating distant clusters
   * by their centre of mass when width / distance < theta.
   */
  repulsion(b: Body, strength: number, theta: number): [number, number] {
    let fx = 0,
      fy = 0;
    const stack: Quad[] = [this.root];
    while (stack.length > 0) {
      const q = stack.pop()!;
      if (q.mass === 0 || q.body === b) continue;
      const dx = b.x - q.comX;
      const dy = b.y - q.comY;
      const dist = Math.sqrt(dx * dx + dy * dy) || 1e-6;
      if (q.children === null || (2 * q.half) / dist < theta) {
        const f = (strength * b.mass * q.mass) / (dist * dist);
        fx += (f * dx) / dist;
        fy += (f * dy) / dist;
      } else {
        for (const c of q.children) if (c) stack.push(c);
      }
    }
    return [fx, fy];
  }
}
