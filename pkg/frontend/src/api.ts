import type { ApiNode, QaRecord, SearchHit, Subgraph } from "./types.js";

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string; signal?: AbortSignal },
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown>; text(): Promise<string> }>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
  }
}

/**
 * Thin JSON client for the explorer.
 *
 * All in-flight requests belong to the current "generation"; calling
 * `cancelPending()` (done on every view change) aborts them so stale
 * responses can never clobber a newer view.
 */
export class ApiClient {
  private controller = new AbortController();

  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = fetch as unknown as FetchLike,
  ) {}

  cancelPending(): void {
    this.controller.abort();
    this.controller = new AbortController();
  }

  private async request<T>(path: string, init?: { method?: string; body?: unknown }): Promise<T> {
    const resp = await this.fetchImpl(this.base + path, {
      method: init?.method ?? "GET",
      headers: init?.body !== undefined ? { "content-type": "application/json" } : undefined,
      body: init?.body !== undefined ? JSON.stringify(init.body) : undefined,
      signal: this.controller.signal,
    });
    if (!resp.ok) {
      let detail = `HTTP ${resp.status}`;
      try {
        const body = (await resp.json()) as { detail?: string };
        if (body && typeof body.detail === "string") detail = body.detail;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  node(id: number): Promise<ApiNode> {
    return this.request(`/api/nodes/${id}`);
  }

  neighbors(id: number, limit: number): Promise<Subgraph> {
    return this.request(`/api/nodes/${id}/neighbors?limit=${limit}`);
  }

  search(q: string, limit = 20): Promise<SearchHit[]> {
    return this.request(`/api/search?q=${encodeURIComponent(q)}&limit=${limit}`);
  }

  query(text: string): Promise<{ rows: string[] }> {
    return this.request("/api/query", { method: "POST", body: { query: text } });
  }

  qa(question: string): Promise<QaRecord> {
    return this.request("/api/qa", { method: "POST", body: { question } });
  }

  stats(): Promise<{ nodes: number; edges: number }> {
    return this.request("/api/stats");
  }
}
