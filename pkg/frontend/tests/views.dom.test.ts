// @vitest-environment jsdom
import { describe, expect, it, vi } from "vitest";

import type { Badge } from "../src/state.js";
import { createResultGrid } from "../src/views/result-grid.js";
import { createRefinePanel } from "../src/views/refine-panel.js";
import { createComparePanel } from "../src/views/compare-panel.js";

const results = [
  { id: "r2", score: 0.91234 },
  { id: "r0", score: 0.85 },
  { id: "r1", score: 0.7 },
];

describe("result grid", () => {
  it("renders cards in the exact order given", () => {
    const grid = createResultGrid(() => {});
    grid.render(results, {});
    const ids = [...grid.el.querySelectorAll<HTMLElement>(".result-card")].map(
      (card) => card.dataset.id,
    );
    expect(ids).toEqual(["r2", "r0", "r1"]);
    const ranks = [...grid.el.querySelectorAll<HTMLElement>(".result-card")].map(
      (card) => card.dataset.rank,
    );
    expect(ranks).toEqual(["1", "2", "3"]);
  });

  it("falls back to id + score cards without thumbnails", () => {
    const grid = createResultGrid(() => {});
    grid.render(results, {});
    const first = grid.el.querySelector(".result-card")!;
    expect(first.querySelector("img")).toBeNull();
    expect(first.querySelector(".item-id")!.textContent).toBe("r2");
    expect(first.querySelector(".item-score")!.textContent).toBe("0.9123");
  });

  it("shows a thumbnail when one is known", () => {
    const grid = createResultGrid(() => {});
    grid.render(results, {}, { r2: "data:image/gif;base64,R0lGOD" });
    const cards = grid.el.querySelectorAll(".result-card");
    expect(cards[0].querySelector("img")).not.toBeNull();
    expect(cards[1].querySelector("img")).toBeNull();
  });

  it("badges marked cards from the feedback map", () => {
    const grid = createResultGrid(() => {});
    grid.render(results, { r0: "positive", r1: "hard_negative" });
    const cards = grid.el.querySelectorAll(".result-card");
    expect(cards[1].classList.contains("marked-positive")).toBe(true);
    expect(cards[1].querySelector(".badge")!.textContent).toBe("P");
    expect(cards[2].classList.contains("marked-hard_negative")).toBe(true);
    expect(cards[2].querySelector(".badge")!.textContent).toBe("H");
    expect(cards[0].querySelector(".badge")!.textContent).toBe("");
  });

  it("routes mark clicks to the handler", () => {
    const marks: Array<[string, Badge | null]> = [];
    const grid = createResultGrid((id, label) => marks.push([id, label]));
    grid.render(results, {});
    const card = grid.el.querySelector<HTMLElement>('[data-id="r0"]')!;
    card.querySelector<HTMLButtonElement>(".mark-positive")!.click();
    card.querySelector<HTMLButtonElement>(".mark-hard-negative")!.click();
    card.querySelector<HTMLButtonElement>(".mark-clear")!.click();
    expect(marks).toEqual([
      ["r0", "positive"],
      ["r0", "hard_negative"],
      ["r0", null],
    ]);
  });
});

describe("refine panel", () => {
  it("disables the button and shows the gate hint", () => {
    const panel = createRefinePanel(
      () => {},
      () => {},
    );
    panel.render(
      { positives: 0, hardNegatives: 0 },
      { enabled: false, hint: "mark at least one positive result" },
      "pl",
      "idle",
      null,
    );
    const button = panel.el.querySelector<HTMLButtonElement>(".refine-button")!;
    expect(button.disabled).toBe(true);
    expect(panel.el.querySelector(".refine-hint")!.textContent).toBe(
      "mark at least one positive result",
    );
    expect(panel.el.querySelector(".shot-counter")!.textContent).toBe(
      "0 positives, 0 hard negatives marked",
    );
  });

  it("counts shots with singular forms", () => {
    const panel = createRefinePanel(
      () => {},
      () => {},
    );
    panel.render(
      { positives: 1, hardNegatives: 1 },
      { enabled: true, hint: null },
      "pl",
      "idle",
      null,
    );
    expect(panel.el.querySelector(".shot-counter")!.textContent).toBe(
      "1 positive, 1 hard negative marked",
    );
    const button = panel.el.querySelector<HTMLButtonElement>(".refine-button")!;
    expect(button.disabled).toBe(false);
  });

  it("fires the method change and refine callbacks", () => {
    const onMethod = vi.fn();
    const onRefine = vi.fn();
    const panel = createRefinePanel(onMethod, onRefine);
    const picker = panel.el.querySelector<HTMLSelectElement>(".method-picker")!;
    picker.value = "ctr";
    picker.dispatchEvent(new Event("change"));
    expect(onMethod).toHaveBeenCalledWith("ctr");
    panel.el.querySelector<HTMLButtonElement>(".refine-button")!.click();
    expect(onRefine).toHaveBeenCalledOnce();
  });
});

describe("compare panel", () => {
  it("shows both AP values and a signed delta", () => {
    const panel = createComparePanel();
    panel.render(
      {
        session_id: "s1",
        query_id: "q00",
        method: "pl",
        k: 50,
        zero_shot_ap: 0.31,
        refined_ap: 0.91,
        delta: 0.6,
      },
      null,
    );
    expect(panel.el.querySelector(".compare-zero-shot")!.textContent).toBe(
      "zero-shot AP 0.3100",
    );
    expect(panel.el.querySelector(".compare-refined")!.textContent).toBe(
      "pl AP 0.9100",
    );
    const delta = panel.el.querySelector(".compare-delta")!;
    expect(delta.textContent).toBe("delta +0.6000");
    expect(delta.classList.contains("delta-up")).toBe(true);
  });

  it("falls back to the hint when no comparison exists", () => {
    const panel = createComparePanel();
    panel.render(null, "NO_LABELS: no manifest labels for 'x'");
    expect(panel.el.querySelector(".compare-hint")!.textContent).toMatch(
      /NO_LABELS/,
    );
    expect(panel.el.querySelector(".compare-delta")).toBeNull();
  });
});
