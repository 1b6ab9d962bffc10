import type { CostEstimate, QueryResponse, SessionState } from "./types";

export class ApiError extends Error {
  constructor(
    public code: string,
    message: string,
    public status: number,
  ) {
    super(message);
  }
}

async function parseOrThrow<T>(resp: Response): Promise<T> {
  const body = await resp.json();
  if (!resp.ok) {
    throw new ApiError(body.code ?? "error", body.message ?? resp.statusText, resp.status);
  }
  return body as T;
}

/** Thin typed client over the service HTTP API. */
export class ServiceClient {
  constructor(public baseUrl: string = "") {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async createSession(): Promise<string> {
    const resp = await fetch(this.url("/sessions"), { method: "POST" });
    const body = await parseOrThrow<{ session_id: string }>(resp);
    return body.session_id;
  }

  async getSession(sessionId: string): Promise<SessionState> {
    const resp = await fetch(this.url(`/sessions/${sessionId}`));
    return parseOrThrow<SessionState>(resp);
  }

  async query(sessionId: string, text: string): Promise<QueryResponse> {
    const resp = await fetch(this.url(`/sessions/${sessionId}/query`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ text }),
    });
    return parseOrThrow<QueryResponse>(resp);
  }

  async costEstimate(n: number, t: number): Promise<CostEstimate> {
    const resp = await fetch(this.url(`/cost-estimate?n=${n}&t=${t}`));
    return parseOrThrow<CostEstimate>(resp);
  }
}
