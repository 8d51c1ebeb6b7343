/**
 * Typed client for the fsret feedback service.
 *
 * Every request funnels through one helper that checks the path against the
 * route allowlist below, so the console cannot drift into undocumented
 * endpoints without a test noticing.
 */

export type FeedbackLabel = "positive" | "hard_negative" | "cleared";

export interface SearchResult {
  id: string;
  score: number;
}

export interface SearchResponse {
  results: SearchResult[];
  method: string;
  refined: boolean;
  k: number;
  session_id: string | null;
}

export interface SessionView {
  session_id: string;
  query_text: string;
  feedback: Record<string, string>;
  refinements: string[];
  state: "idle" | "running" | "done" | "failed";
  method: string | null;
  error: string | null;
}

export interface CompareView {
  session_id: string;
  query_id: string;
  method: string;
  k: number;
  zero_shot_ap: number;
  refined_ap: number;
  delta: number;
}

export interface HealthView {
  status: string;
  corpus_loaded: boolean;
  session_count: number;
}

/** The complete set of routes the console is allowed to call. */
export const ROUTES = [
  "GET /health",
  "POST /sessions",
  "POST /search",
  "POST /sessions/{id}/feedback",
  "POST /sessions/{id}/refine",
  "GET /sessions/{id}/status",
  "GET /sessions/{id}/compare",
] as const;

export type Route = (typeof ROUTES)[number];

/** Problem-detail error with the service's machine-readable code. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    readonly detail: string,
  ) {
    super(`${code}: ${detail}`);
    this.name = "ApiError";
  }
}

/** Matches a concrete "METHOD /path" against the allowlist patterns. */
export function routeFor(method: string, path: string): Route | null {
  for (const route of ROUTES) {
    const [routeMethod, pattern] = route.split(" ");
    if (routeMethod !== method) continue;
    const regex = new RegExp(
      "^" + pattern.replace(/\{[^/]+\}/g, "[^/]+") + "$",
    );
    if (regex.test(path)) return route;
  }
  return null;
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ConsoleApi {
  private readonly fetchImpl: FetchLike;

  constructor(
    readonly baseUrl: string,
    fetchImpl?: FetchLike,
  ) {
    // bind so a bare global fetch keeps its expected receiver
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async request<T>(
    method: "GET" | "POST",
    path: string,
    body?: unknown,
    query?: Record<string, string>,
  ): Promise<T> {
    if (routeFor(method, path) === null) {
      throw new Error(`route not in the console allowlist: ${method} ${path}`);
    }
    let url = this.baseUrl + path;
    if (query && Object.keys(query).length > 0) {
      url += "?" + new URLSearchParams(query).toString();
    }
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchImpl(url, init);
    const payload = await response.json().catch(() => null);
    if (!response.ok) {
      const code =
        payload && typeof payload.code === "string"
          ? payload.code
          : "HTTP_" + response.status;
      const detail =
        payload && typeof payload.detail === "string"
          ? payload.detail
          : response.statusText;
      throw new ApiError(response.status, code, detail);
    }
    return payload as T;
  }

  health(): Promise<HealthView> {
    return this.request("GET", "/health");
  }

  createSession(queryText: string): Promise<SessionView> {
    return this.request("POST", "/sessions", { query_text: queryText });
  }

  search(req: {
    sessionId?: string;
    queryText?: string;
    k?: number;
    method?: string;
  }): Promise<SearchResponse> {
    const body: Record<string, unknown> = {};
    if (req.sessionId !== undefined) body.session_id = req.sessionId;
    if (req.queryText !== undefined) body.query_text = req.queryText;
    if (req.k !== undefined) body.k = req.k;
    if (req.method !== undefined) body.method = req.method;
    return this.request("POST", "/search", body);
  }

  sendFeedback(
    sessionId: string,
    itemId: string,
    label: FeedbackLabel,
  ): Promise<{ session_id: string; feedback: Record<string, string> }> {
    return this.request("POST", `/sessions/${sessionId}/feedback`, {
      item_id: itemId,
      label,
    });
  }

  refine(
    sessionId: string,
    method: "pl" | "ctr",
    config: Record<string, unknown> = {},
  ): Promise<{ session_id: string; state: string; method: string }> {
    return this.request("POST", `/sessions/${sessionId}/refine`, {
      method,
      config,
    });
  }

  status(sessionId: string): Promise<SessionView> {
    return this.request("GET", `/sessions/${sessionId}/status`);
  }

  compare(
    sessionId: string,
    method?: string,
    k?: number,
  ): Promise<CompareView> {
    const query: Record<string, string> = {};
    if (method !== undefined) query.method = method;
    if (k !== undefined) query.k = String(k);
    return this.request("GET", `/sessions/${sessionId}/compare`, undefined, query);
  }
}
