import type { RefineGate, RefineMethod, ShotCounts } from "../state.js";

export interface RefinePanel {
  el: HTMLElement;
  render(
    counts: ShotCounts,
    gate: RefineGate,
    method: RefineMethod,
    state: string,
    error: string | null,
  ): void;
}

export function createRefinePanel(
  onMethodChange: (method: RefineMethod) => void,
  onRefine: () => void,
): RefinePanel {
  const el = document.createElement("div");
  el.className = "refine-panel";

  const picker = document.createElement("select");
  picker.className = "method-picker";
  for (const [value, label] of [
    ["pl", "Prompt refinement"],
    ["ctr", "Reference fusion"],
  ]) {
    const option = document.createElement("option");
    option.value = value;
    option.textContent = label;
    picker.appendChild(option);
  }
  picker.addEventListener("change", () =>
    onMethodChange(picker.value as RefineMethod),
  );

  const counter = document.createElement("span");
  counter.className = "shot-counter";

  const button = document.createElement("button");
  button.type = "button";
  button.textContent = "Refine";
  button.className = "refine-button";
  button.addEventListener("click", onRefine);

  const hint = document.createElement("span");
  hint.className = "refine-hint";

  const status = document.createElement("span");
  status.className = "refine-status";

  el.append(picker, counter, button, hint, status);

  return {
    el,
    render(counts, gate, method, state, error) {
      picker.value = method;
      counter.textContent =
        `${counts.positives} positive` +
        (counts.positives === 1 ? "" : "s") +
        `, ${counts.hardNegatives} hard negative` +
        (counts.hardNegatives === 1 ? "" : "s") +
        " marked";
      button.disabled = !gate.enabled;
      hint.textContent = gate.hint ?? "";
      status.textContent =
        state === "running"
          ? "refining..."
          : state === "failed"
            ? `failed: ${error ?? "unknown error"}`
            : "";
    },
  };
}
