import type { ConsoleApi, SessionView } from "./api.js";

/**
 * Poll a session's refine job until it reaches a terminal state.
 * Resolves with the final view on "done", rejects on "failed" or timeout.
 */
export function pollRefinement(
  api: ConsoleApi,
  sessionId: string,
  intervalMs = 1000,
  timeoutMs = 120000,
): Promise<SessionView> {
  const deadline = Date.now() + timeoutMs;
  return new Promise((resolve, reject) => {
    const tick = async () => {
      let view: SessionView;
      try {
        view = await api.status(sessionId);
      } catch (error) {
        reject(error);
        return;
      }
      if (view.state === "done") {
        resolve(view);
      } else if (view.state === "failed") {
        reject(new Error(view.error ?? "refinement failed"));
      } else if (Date.now() >= deadline) {
        reject(new Error("refinement polling timed out"));
      } else {
        setTimeout(tick, intervalMs);
      }
    };
    tick();
  });
}
