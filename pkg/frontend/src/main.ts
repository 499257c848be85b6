import { ApiClient, ApiError } from "./api.js";
import { DEFAULT_LAYOUT, layoutStep } from "./layout.js";
import { renderQaTrace, renderQueryResult, renderSearchHits } from "./panels.js";
import { ViewGraph } from "./view.js";

const COLORS: Record<string, string> = {
  Actor: "#d9534f",
  Malware: "#b05bd6",
  Tool: "#3a7bd5",
  Technique: "#2aa06a",
  Report: "#9a9a9a",
};

function $(id: string): HTMLElement {
  return document.getElementById(id)!;
}

function toast(msg: string): void {
  const el = $("toast");
  el.textContent = msg;
  el.classList.add("visible");
  setTimeout(() => el.classList.remove("visible"), 4000);
}

export function start(): void {
  const api = new ApiClient("");
  const view = new ViewGraph(api);
  const canvas = $("canvas") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  let neighborCap = 15;
  let dragging: number | null = null;

  function resize(): void {
    canvas.width = canvas.clientWidth;
    canvas.height = canvas.clientHeight;
  }
  window.addEventListener("resize", resize);
  resize();

  function draw(): void {
    layoutStep(view, { ...DEFAULT_LAYOUT });
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.save();
    ctx.translate(canvas.width / 2, canvas.height / 2);
    ctx.strokeStyle = "#ccc";
    for (const e of view.edges) {
      const a = view.nodes.get(e.src)!;
      const b = view.nodes.get(e.dst)!;
      ctx.beginPath();
      ctx.moveTo(a.x, a.y);
      ctx.lineTo(b.x, b.y);
      ctx.stroke();
      const mx = (a.x + b.x) / 2;
      const my = (a.y + b.y) / 2;
      ctx.fillStyle = "#888";
      ctx.font = "9px sans-serif";
      ctx.fillText(e.rel_class, mx, my);
    }
    for (const n of view.nodes.values()) {
      ctx.beginPath();
      ctx.arc(n.x, n.y, 8, 0, Math.PI * 2);
      ctx.fillStyle = COLORS[n.data.label] ?? "#e8a33d";
      ctx.fill();
      if (n.pinned) {
        ctx.strokeStyle = "#222";
        ctx.lineWidth = 2;
        ctx.stroke();
        ctx.lineWidth = 1;
      }
      ctx.fillStyle = "#222";
      ctx.font = "11px sans-serif";
      ctx.fillText(n.data.name, n.x + 10, n.y + 4);
    }
    ctx.restore();
    if (view.overflowed > 0) {
      ctx.fillStyle = "#b00";
      ctx.fillText(`+${view.overflowed} nodes not shown (cap ${view.maxNodes})`, 8, 16);
    }
    requestAnimationFrame(draw);
  }

  function nodeAt(px: number, py: number): number | null {
    const x = px - canvas.width / 2;
    const y = py - canvas.height / 2;
    for (const [id, n] of view.nodes) {
      if ((n.x - x) ** 2 + (n.y - y) ** 2 <= 100) return id;
    }
    return null;
  }

  canvas.addEventListener("dblclick", (ev) => {
    const id = nodeAt(ev.offsetX, ev.offsetY);
    if (id === null) return;
    view.toggleExpand(id, neighborCap).catch((e) => {
      toast(e instanceof ApiError ? e.message : "server unreachable");
    });
  });
  canvas.addEventListener("mousedown", (ev) => {
    dragging = nodeAt(ev.offsetX, ev.offsetY);
  });
  canvas.addEventListener("mousemove", (ev) => {
    if (dragging === null) return;
    const n = view.nodes.get(dragging);
    if (n) {
      n.x = ev.offsetX - canvas.width / 2;
      n.y = ev.offsetY - canvas.height / 2;
    }
  });
  canvas.addEventListener("mouseup", () => (dragging = null));
  canvas.addEventListener("contextmenu", (ev) => {
    ev.preventDefault();
    const id = nodeAt(ev.offsetX, ev.offsetY);
    if (id !== null) view.pin(id, !view.nodes.get(id)!.pinned);
  });

  ($("cap") as HTMLInputElement).addEventListener("change", (ev) => {
    neighborCap = Math.max(1, Number((ev.target as HTMLInputElement).value) || 15);
  });
  $("back").addEventListener("click", () => {
    api.cancelPending();
    if (!view.back()) toast("no earlier view");
  });

  $("search-form").addEventListener("submit", async (ev) => {
    ev.preventDefault();
    const q = ($("search-input") as HTMLInputElement).value.trim();
    if (!q) return;
    api.cancelPending();
    try {
      const hits = await api.search(q);
      $("search-results").innerHTML = renderSearchHits(hits);
      for (const li of $("search-results").querySelectorAll("li[data-node-id]")) {
        li.addEventListener("click", async () => {
          const node = await api.node(Number((li as HTMLElement).dataset.nodeId));
          view.addNode(node);
        });
      }
    } catch (e) {
      toast(e instanceof ApiError ? e.message : "server unreachable");
    }
  });

  $("query-form").addEventListener("submit", async (ev) => {
    ev.preventDefault();
    const text = ($("query-input") as HTMLTextAreaElement).value;
    try {
      const out = await api.query(text);
      $("query-results").innerHTML = renderQueryResult(out.rows);
    } catch (e) {
      $("query-results").innerHTML = renderQueryResult(
        null,
        e instanceof ApiError ? e.message : "server unreachable",
      );
    }
  });

  $("qa-form").addEventListener("submit", async (ev) => {
    ev.preventDefault();
    const q = ($("qa-input") as HTMLInputElement).value;
    try {
      const record = await api.qa(q);
      $("qa-trace").innerHTML = renderQaTrace(record);
      $("qa-trace")
        .querySelector(".rerun")
        ?.addEventListener("click", async () => {
          const edited = ($("qa-trace").querySelector(".bound-query") as HTMLTextAreaElement)
            ?.value;
          if (!edited) return;
          try {
            const out = await api.query(edited);
            $("query-results").innerHTML = renderQueryResult(out.rows);
          } catch (e) {
            $("query-results").innerHTML = renderQueryResult(
              null,
              e instanceof ApiError ? e.message : "server unreachable",
            );
          }
        });
    } catch (e) {
      toast(e instanceof ApiError ? e.message : "server unreachable");
    }
  });

  draw();
}

if (typeof document !== "undefined" && document.getElementById("canvas")) {
  start();
}
