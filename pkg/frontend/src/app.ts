import { ApiError, ConsoleApi } from "./api.js";
import type { Badge } from "./state.js";
import { ConsoleStore } from "./state.js";
import { pollRefinement } from "./poll.js";
import { createQueryBar } from "./views/query-bar.js";
import { createResultGrid } from "./views/result-grid.js";
import { createRefinePanel } from "./views/refine-panel.js";
import { createComparePanel } from "./views/compare-panel.js";
import { createStatusToast } from "./views/status-toast.js";

export interface ConsoleHandle {
  store: ConsoleStore;
  root: HTMLElement;
}

export interface ConsoleOptions {
  pollIntervalMs?: number;
  pollTimeoutMs?: number;
}

function badgesFrom(map: Record<string, string>): Record<string, Badge> {
  const out: Record<string, Badge> = {};
  for (const [id, label] of Object.entries(map)) {
    if (label === "positive" || label === "hard_negative") out[id] = label;
  }
  return out;
}

function messageOf(error: unknown): string {
  return error instanceof Error ? error.message : String(error);
}

/**
 * Assemble the operator console inside `root` and wire its views to the
 * feedback service. The grid always shows the service ranking verbatim;
 * badges track the last acknowledged server state, with optimistic marks
 * rolled back when the service rejects them.
 */
export function createConsole(
  root: HTMLElement,
  api: ConsoleApi,
  options: ConsoleOptions = {},
): ConsoleHandle {
  const store = new ConsoleStore();
  const toast = createStatusToast();

  async function onSearch(text: string, k: number): Promise<void> {
    queryBar.setBusy(true);
    try {
      const session = await api.createSession(text);
      store.update({
        sessionId: session.session_id,
        queryText: text,
        k,
        feedback: {},
        refinements: [],
        refineState: "idle",
        refineError: null,
        compare: null,
        compareHint: null,
      });
      const page = await api.search({
        sessionId: session.session_id,
        k,
        method: "zero_shot",
      });
      store.setResults(page.results, page.method);
    } catch (error) {
      toast.show(messageOf(error), "error");
    } finally {
      queryBar.setBusy(false);
    }
  }

  async function onMark(itemId: string, label: Badge | null): Promise<void> {
    const { sessionId } = store.get();
    if (sessionId === null) {
      toast.show("run a search first", "error");
      return;
    }
    const previous = store.markLocal(itemId, label);
    try {
      const ack = await api.sendFeedback(sessionId, itemId, label ?? "cleared");
      store.update({ feedback: badgesFrom(ack.feedback) });
    } catch (error) {
      store.rollback(itemId, previous);
      toast.show(messageOf(error), "error");
    }
  }

  async function onRefine(): Promise<void> {
    if (!store.refineGate().enabled) return;
    const { sessionId, refineMethod, k } = store.get();
    if (sessionId === null) return;
    try {
      await api.refine(sessionId, refineMethod);
    } catch (error) {
      toast.show(messageOf(error), "error");
      return;
    }
    store.update({ refineState: "running", refineError: null });
    let view;
    try {
      view = await pollRefinement(
        api,
        sessionId,
        options.pollIntervalMs ?? 1000,
        options.pollTimeoutMs ?? 120000,
      );
    } catch (error) {
      store.update({ refineState: "failed", refineError: messageOf(error) });
      toast.show(messageOf(error), "error");
      return;
    }
    store.update({ refineState: "done", refinements: view.refinements });
    try {
      const page = await api.search({ sessionId, k, method: refineMethod });
      store.setResults(page.results, page.method);
    } catch (error) {
      toast.show(messageOf(error), "error");
      return;
    }
    try {
      const compare = await api.compare(sessionId, refineMethod, k);
      store.update({ compare, compareHint: null });
      toast.show("refinement complete", "info");
    } catch (error) {
      // comparison is optional: corpora without manifest labels land here
      const hint = error instanceof ApiError ? error.message : messageOf(error);
      store.update({ compare: null, compareHint: hint });
      toast.show("refinement complete (no labels to compare)", "info");
    }
  }

  const queryBar = createQueryBar((text, k) => void onSearch(text, k));
  const grid = createResultGrid((id, label) => void onMark(id, label));
  const refinePanel = createRefinePanel(
    (method) => store.update({ refineMethod: method }),
    () => void onRefine(),
  );
  const comparePanel = createComparePanel();

  root.replaceChildren(
    queryBar.el,
    refinePanel.el,
    comparePanel.el,
    grid.el,
    toast.el,
  );

  function render(): void {
    const state = store.get();
    grid.render(state.results, state.feedback);
    refinePanel.render(
      store.shotCounts(),
      store.refineGate(),
      state.refineMethod,
      state.refineState,
      state.refineError,
    );
    comparePanel.render(state.compare, state.compareHint);
  }

  store.subscribe(render);
  render();

  return { store, root };
}
