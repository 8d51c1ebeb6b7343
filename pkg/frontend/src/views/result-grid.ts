import type { SearchResult } from "../api.js";
import type { Badge } from "../state.js";

export interface ResultGrid {
  el: HTMLElement;
  render(
    results: SearchResult[],
    feedback: Record<string, Badge>,
    thumbnails?: Record<string, string>,
  ): void;
}

/**
 * Ordered grid of result cards. Card order is exactly the order of the
 * results array; no client-side sorting happens here or anywhere else.
 * Cards show a thumbnail when one is known, otherwise id + score.
 */
export function createResultGrid(
  onMark: (itemId: string, label: Badge | null) => void,
): ResultGrid {
  const el = document.createElement("div");
  el.className = "result-grid";

  function card(
    item: SearchResult,
    rank: number,
    badge: Badge | undefined,
    thumbnail: string | undefined,
  ): HTMLElement {
    const node = document.createElement("div");
    node.className = "result-card" + (badge ? ` marked-${badge}` : "");
    node.dataset.id = item.id;
    node.dataset.rank = String(rank);

    if (thumbnail) {
      const img = document.createElement("img");
      img.src = thumbnail;
      img.alt = item.id;
      img.className = "thumb";
      node.appendChild(img);
    }

    const title = document.createElement("div");
    title.className = "item-id";
    title.textContent = item.id;

    const score = document.createElement("div");
    score.className = "item-score";
    score.textContent = item.score.toFixed(4);

    const badgeEl = document.createElement("span");
    badgeEl.className = "badge";
    badgeEl.textContent =
      badge === "positive" ? "P" : badge === "hard_negative" ? "H" : "";

    const buttons = document.createElement("div");
    buttons.className = "mark-buttons";
    const actions: Array<[string, Badge | null, string]> = [
      ["Positive", "positive", "mark-positive"],
      ["Hard neg", "hard_negative", "mark-hard-negative"],
      ["Clear", null, "mark-clear"],
    ];
    for (const [label, value, cls] of actions) {
      const button = document.createElement("button");
      button.type = "button";
      button.textContent = label;
      button.className = cls;
      button.addEventListener("click", () => onMark(item.id, value));
      buttons.appendChild(button);
    }

    node.append(title, score, badgeEl, buttons);
    return node;
  }

  return {
    el,
    render(results, feedback, thumbnails = {}) {
      el.replaceChildren(
        ...results.map((item, index) =>
          card(item, index + 1, feedback[item.id], thumbnails[item.id]),
        ),
      );
    },
  };
}
