import type { CompareView } from "../api.js";

export interface ComparePanel {
  el: HTMLElement;
  render(compare: CompareView | null, hint: string | null): void;
}

const ap = (value: number): string => value.toFixed(4);

export function createComparePanel(): ComparePanel {
  const el = document.createElement("div");
  el.className = "compare-panel";

  return {
    el,
    render(compare, hint) {
      el.replaceChildren();
      if (compare === null) {
        const note = document.createElement("span");
        note.className = "compare-hint";
        note.textContent = hint ?? "";
        el.appendChild(note);
        return;
      }
      const zero = document.createElement("div");
      zero.className = "compare-zero-shot";
      zero.textContent = `zero-shot AP ${ap(compare.zero_shot_ap)}`;

      const refined = document.createElement("div");
      refined.className = "compare-refined";
      refined.textContent = `${compare.method} AP ${ap(compare.refined_ap)}`;

      const delta = document.createElement("div");
      delta.className =
        "compare-delta " + (compare.delta >= 0 ? "delta-up" : "delta-down");
      const sign = compare.delta >= 0 ? "+" : "";
      delta.textContent = `delta ${sign}${ap(compare.delta)}`;

      el.append(zero, refined, delta);
    },
  };
}
