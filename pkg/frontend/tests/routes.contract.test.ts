import { describe, expect, it } from "vitest";

import { ApiError, ConsoleApi, ROUTES, routeFor } from "../src/api.js";

interface Recorded {
  method: string;
  path: string;
}

/** Fake fetch that records every call and answers with a canned body. */
function recordingFetch(record: Recorded[], body: unknown = {}, status = 200) {
  return async (input: string, init?: RequestInit): Promise<Response> => {
    const url = new URL(input);
    record.push({ method: init?.method ?? "GET", path: url.pathname });
    return new Response(JSON.stringify(body), {
      status,
      headers: { "Content-Type": "application/json" },
    });
  };
}

describe("route allowlist", () => {
  it("covers every call the client can make, and nothing else", async () => {
    const record: Recorded[] = [];
    const api = new ConsoleApi("http://service", recordingFetch(record));

    await api.health();
    await api.createSession("a photo of a synthetic concept 00");
    await api.search({ sessionId: "s1", k: 10, method: "zero_shot" });
    await api.search({ queryText: "a photo of a synthetic concept 00" });
    await api.sendFeedback("s1", "r00001", "positive");
    await api.sendFeedback("s1", "r00001", "cleared");
    await api.refine("s1", "pl");
    await api.refine("s1", "ctr", { iterations: 10 });
    await api.status("s1");
    await api.compare("s1", "pl", 50);
    await api.compare("s1");

    const matched = new Set<string>();
    for (const { method, path } of record) {
      const route = routeFor(method, path);
      expect(route, `${method} ${path} escaped the allowlist`).not.toBeNull();
      matched.add(route as string);
    }
    // both directions: every request allowed, every route reachable
    expect([...matched].sort()).toEqual([...ROUTES].sort());
  });

  it("rejects a path outside the allowlist before any request is sent", async () => {
    const record: Recorded[] = [];
    const api = new ConsoleApi("http://service", recordingFetch(record));
    // the request helper is private; reach in to prove the guard holds
    const request = (api as unknown as {
      request(method: string, path: string): Promise<unknown>;
    }).request.bind(api);

    await expect(request("DELETE", "/sessions/s1")).rejects.toThrow(
      /route not in the console allowlist/,
    );
    await expect(request("GET", "/corpus")).rejects.toThrow(
      /route not in the console allowlist/,
    );
    expect(record).toEqual([]);
  });

  it("does not match pattern segments across slashes", () => {
    expect(routeFor("GET", "/sessions/a/b/status")).toBeNull();
    expect(routeFor("GET", "/sessions/a/status")).toBe(
      "GET /sessions/{id}/status",
    );
  });

  it("surfaces problem-detail errors with the service code", async () => {
    const api = new ConsoleApi(
      "http://service",
      recordingFetch(
        [],
        {
          type: "about:blank",
          title: "Conflict",
          status: 409,
          code: "INSUFFICIENT_EXAMPLES",
          detail: "refinement needs at least one positive mark",
        },
        409,
      ),
    );
    const failure = await api.refine("s1", "pl").catch((e) => e);
    expect(failure).toBeInstanceOf(ApiError);
    expect(failure.status).toBe(409);
    expect(failure.code).toBe("INSUFFICIENT_EXAMPLES");
    expect(failure.detail).toMatch(/positive mark/);
  });

  it("falls back to the HTTP status when the body is not problem detail", async () => {
    const fetchImpl = async (): Promise<Response> =>
      new Response("gateway exploded", { status: 502, statusText: "Bad Gateway" });
    const api = new ConsoleApi("http://service", fetchImpl);
    const failure = await api.health().catch((e) => e);
    expect(failure).toBeInstanceOf(ApiError);
    expect(failure.code).toBe("HTTP_502");
  });
});
