import { describe, expect, it } from "vitest";

import { ConsoleStore } from "../src/state.js";

const results = [
  { id: "r2", score: 0.9 },
  { id: "r0", score: 0.8 },
  { id: "r1", score: 0.7 },
];

describe("ConsoleStore", () => {
  it("preserves the service ordering verbatim", () => {
    const store = new ConsoleStore();
    store.setResults(results, "zero_shot");
    expect(store.get().results.map((r) => r.id)).toEqual(["r2", "r0", "r1"]);
    expect(store.get().method).toBe("zero_shot");
  });

  it("applies optimistic marks and rolls them back", () => {
    const store = new ConsoleStore();
    expect(store.markLocal("r0", "positive")).toBeNull();
    expect(store.get().feedback).toEqual({ r0: "positive" });

    const previous = store.markLocal("r0", "hard_negative");
    expect(previous).toBe("positive");
    store.rollback("r0", previous);
    expect(store.get().feedback).toEqual({ r0: "positive" });

    const beforeClear = store.markLocal("r0", null);
    expect(store.get().feedback).toEqual({});
    store.rollback("r0", beforeClear);
    expect(store.get().feedback).toEqual({ r0: "positive" });
  });

  it("counts shots by label", () => {
    const store = new ConsoleStore();
    store.markLocal("a", "positive");
    store.markLocal("b", "positive");
    store.markLocal("c", "hard_negative");
    expect(store.shotCounts()).toEqual({ positives: 2, hardNegatives: 1 });
  });

  it("notifies subscribers and supports unsubscribe", () => {
    const store = new ConsoleStore();
    let calls = 0;
    const stop = store.subscribe(() => {
      calls += 1;
    });
    store.update({ k: 10 });
    stop();
    store.update({ k: 20 });
    expect(calls).toBe(1);
  });
});

describe("refine gate", () => {
  function storeWithSession(): ConsoleStore {
    const store = new ConsoleStore();
    store.update({ sessionId: "s1" });
    return store;
  }

  it("requires a session", () => {
    const store = new ConsoleStore();
    expect(store.refineGate()).toEqual({
      enabled: false,
      hint: "run a search first",
    });
  });

  it("is disabled at zero marks", () => {
    const store = storeWithSession();
    const gate = store.refineGate();
    expect(gate.enabled).toBe(false);
    expect(gate.hint).toBe("mark at least one positive result");
  });

  it("prompt refinement needs a hard negative", () => {
    const store = storeWithSession();
    store.markLocal("a", "positive");
    expect(store.refineGate().enabled).toBe(false);
    expect(store.refineGate().hint).toMatch(/hard-negative/);

    store.markLocal("b", "hard_negative");
    expect(store.refineGate()).toEqual({ enabled: true, hint: null });
  });

  it("fusion refinement needs two positives", () => {
    const store = storeWithSession();
    store.update({ refineMethod: "ctr" });
    store.markLocal("a", "positive");
    expect(store.refineGate().enabled).toBe(false);
    expect(store.refineGate().hint).toMatch(/two positive/);

    store.markLocal("b", "positive");
    expect(store.refineGate()).toEqual({ enabled: true, hint: null });
  });

  it("locks while a refinement runs", () => {
    const store = storeWithSession();
    store.markLocal("a", "positive");
    store.markLocal("b", "hard_negative");
    store.update({ refineState: "running" });
    expect(store.refineGate().hint).toBe("refinement in progress");
    store.update({ refineState: "done" });
    expect(store.refineGate().enabled).toBe(true);
  });
});
