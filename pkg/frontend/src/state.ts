import type { CompareView, SearchResult } from "./api.js";

export type Badge = "positive" | "hard_negative";

export type RefineMethod = "pl" | "ctr";

export interface ConsoleState {
  sessionId: string | null;
  queryText: string;
  k: number;
  /** Method whose ranking the grid currently shows. */
  method: string;
  /** Grid items in the exact order the service returned them. */
  results: SearchResult[];
  feedback: Record<string, Badge>;
  refineMethod: RefineMethod;
  refineState: "idle" | "running" | "done" | "failed";
  refineError: string | null;
  /** Methods with a completed refinement for this session. */
  refinements: string[];
  compare: CompareView | null;
  /** Hint shown instead of the panel when comparison is impossible. */
  compareHint: string | null;
}

function initialState(): ConsoleState {
  return {
    sessionId: null,
    queryText: "",
    k: 50,
    method: "zero_shot",
    results: [],
    feedback: {},
    refineMethod: "pl",
    refineState: "idle",
    refineError: null,
    refinements: [],
    compare: null,
    compareHint: null,
  };
}

export interface ShotCounts {
  positives: number;
  hardNegatives: number;
}

export interface RefineGate {
  enabled: boolean;
  hint: string | null;
}

type Listener = (state: ConsoleState) => void;

export class ConsoleStore {
  private state: ConsoleState = initialState();
  private listeners: Listener[] = [];

  get(): ConsoleState {
    return this.state;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  update(partial: Partial<ConsoleState>): void {
    this.state = { ...this.state, ...partial };
    for (const listener of this.listeners) listener(this.state);
  }

  reset(): void {
    this.state = initialState();
    for (const listener of this.listeners) listener(this.state);
  }

  /** Replace the grid, preserving the service ordering verbatim. */
  setResults(results: SearchResult[], method: string): void {
    this.update({ results: [...results], method });
  }

  /**
   * Apply a feedback mark locally before the server acknowledges it.
   * Returns the previous value so a failed request can roll back.
   */
  markLocal(itemId: string, label: Badge | null): Badge | null {
    const previous = this.state.feedback[itemId] ?? null;
    const feedback = { ...this.state.feedback };
    if (label === null) {
      delete feedback[itemId];
    } else {
      feedback[itemId] = label;
    }
    this.update({ feedback });
    return previous;
  }

  rollback(itemId: string, previous: Badge | null): void {
    this.markLocal(itemId, previous);
  }

  shotCounts(): ShotCounts {
    let positives = 0;
    let hardNegatives = 0;
    for (const label of Object.values(this.state.feedback)) {
      if (label === "positive") positives += 1;
      else hardNegatives += 1;
    }
    return { positives, hardNegatives };
  }

  /** Mirror of the service's refine preconditions, for the button gate. */
  refineGate(): RefineGate {
    const { positives, hardNegatives } = this.shotCounts();
    if (this.state.sessionId === null) {
      return { enabled: false, hint: "run a search first" };
    }
    if (this.state.refineState === "running") {
      return { enabled: false, hint: "refinement in progress" };
    }
    if (positives === 0) {
      return { enabled: false, hint: "mark at least one positive result" };
    }
    if (this.state.refineMethod === "pl" && hardNegatives === 0) {
      return {
        enabled: false,
        hint: "prompt refinement needs a hard-negative mark",
      };
    }
    if (this.state.refineMethod === "ctr" && positives < 2) {
      return {
        enabled: false,
        hint: "fusion refinement needs two positive marks",
      };
    }
    return { enabled: true, hint: null };
  }
}
