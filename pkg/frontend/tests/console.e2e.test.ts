// @vitest-environment jsdom
//
// End-to-end flow against a live service process on the synthetic corpus:
// search, mark feedback, refine, and compare, all driven through the DOM.
import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import * as path from "node:path";
import { afterAll, beforeAll, expect, it } from "vitest";

import { ConsoleApi } from "../src/api.js";
import { createConsole } from "../src/app.js";

interface ManifestQuery {
  id: string;
  text: string;
  positives: string[];
  hard_negatives: string[];
}

let workDir: string;
let child: ChildProcess;
let base: string;
let query: ManifestQuery;
let serviceLog = "";

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const server = createServer();
    server.listen(0, "127.0.0.1", () => {
      const address = server.address();
      if (address === null || typeof address === "string") {
        reject(new Error("could not allocate a port"));
        return;
      }
      const { port } = address;
      server.close(() => resolve(port));
    });
  });
}

async function until(
  check: () => boolean | Promise<boolean>,
  timeoutMs: number,
  what: string,
): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (!(await check())) {
    if (Date.now() > deadline) {
      throw new Error(`timed out waiting for ${what}\nservice log:\n${serviceLog}`);
    }
    await new Promise((r) => setTimeout(r, 100));
  }
}

function cards(): HTMLElement[] {
  return [...document.querySelectorAll<HTMLElement>(".result-card")];
}

function gridIds(): string[] {
  return cards().map((card) => card.dataset.id as string);
}

function clickMark(id: string, buttonClass: string): void {
  const card = document.querySelector<HTMLElement>(`[data-id="${id}"]`);
  if (card === null) throw new Error(`no card for ${id}`);
  card.querySelector<HTMLButtonElement>(buttonClass)!.click();
}

beforeAll(async () => {
  workDir = mkdtempSync(path.join(tmpdir(), "fsret-console-"));
  const benchDir = path.join(workDir, "bench");

  execFileSync(
    "python3",
    ["-m", "fsret.cli", "synth-bench", "--out-dir", benchDir,
     "--queries", "3", "--dimension", "32", "--seed", "7"],
    { stdio: ["ignore", "ignore", "pipe"] },
  );

  const port = await freePort();
  base = `http://127.0.0.1:${port}`;
  child = spawn(
    "python3",
    ["-m", "fsret.cli", "serve", "--state-dir", path.join(workDir, "state"),
     "--host", "127.0.0.1", "--port", String(port)],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  child.stdout?.on("data", (chunk) => (serviceLog += chunk));
  child.stderr?.on("data", (chunk) => (serviceLog += chunk));

  await until(
    () => fetch(`${base}/health`).then((r) => r.ok).catch(() => false),
    30000,
    "the service to come up",
  );

  const loaded = await fetch(`${base}/corpus`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({
      image_path: path.join(benchDir, "images.fsem"),
      text_path: path.join(benchDir, "texts.fsem"),
      manifest_path: path.join(benchDir, "manifest.json"),
    }),
  });
  expect(loaded.ok).toBe(true);

  const manifest = JSON.parse(readFileSync(path.join(benchDir, "manifest.json"), "utf-8"));
  query = manifest.queries[0];
});

afterAll(() => {
  child?.kill();
  if (workDir) rmSync(workDir, { recursive: true, force: true });
});

it("search, mark, refine, and compare through the console", async () => {
  const api = new ConsoleApi(base);
  const handle = createConsole(document.body, api);

  // search the query text with k=100 so labeled items are on screen
  const queryInput = document.querySelector<HTMLInputElement>(".query-input")!;
  const kInput = document.querySelector<HTMLInputElement>(".k-input")!;
  queryInput.value = query.text;
  kInput.value = "100";
  document
    .querySelector<HTMLFormElement>("form.query-bar")!
    .dispatchEvent(new Event("submit", { cancelable: true }));
  await until(() => cards().length === 100, 15000, "the result grid");

  // grid order is the service ranking verbatim
  const sessionId = handle.store.get().sessionId!;
  const zeroShotIds = gridIds();
  const zeroShotPage = await api.search({ sessionId, k: 100, method: "zero_shot" });
  expect(zeroShotIds).toEqual(zeroShotPage.results.map((r) => r.id));

  // refine is disabled while nothing is marked
  const refineButton = document.querySelector<HTMLButtonElement>(".refine-button")!;
  expect(refineButton.disabled).toBe(true);
  expect(document.querySelector(".refine-hint")!.textContent).toBe(
    "mark at least one positive result",
  );

  // mark 3 labeled positives and 2 labeled hard negatives from the grid
  const visible = new Set(zeroShotIds);
  const positives = query.positives.filter((id) => visible.has(id)).slice(0, 3);
  const hardNegatives = query.hard_negatives
    .filter((id) => visible.has(id))
    .slice(0, 2);
  expect(positives).toHaveLength(3);
  expect(hardNegatives).toHaveLength(2);
  for (const id of positives) clickMark(id, ".mark-positive");
  for (const id of hardNegatives) clickMark(id, ".mark-hard-negative");

  await until(async () => {
    const view = await api.status(sessionId);
    return Object.keys(view.feedback).length === 5;
  }, 10000, "all five marks to be acknowledged");

  expect(document.querySelector(".shot-counter")!.textContent).toBe(
    "3 positives, 2 hard negatives marked",
  );
  const marked = document.querySelector<HTMLElement>(`[data-id="${positives[0]}"]`)!;
  expect(marked.classList.contains("marked-positive")).toBe(true);
  expect(refineButton.disabled).toBe(false);

  // refine with the default prompt-learning method
  refineButton.click();
  await until(() => handle.store.get().refineState === "done", 90000, "refinement");
  // the compare panel arrives after the refined re-search
  await until(
    () => document.querySelector(".compare-delta") !== null,
    15000,
    "the compare panel",
  );

  // the grid was re-ranked to the service's own refined ordering
  const refinedPage = await api.search({ sessionId, k: 100, method: "pl" });
  expect(gridIds()).toEqual(refinedPage.results.map((r) => r.id));
  expect(gridIds()).not.toEqual(zeroShotIds);

  // the comparison shows a positive AP delta for the refined ranking
  const compare = handle.store.get().compare!;
  expect(compare.method).toBe("pl");
  expect(compare.refined_ap).toBeGreaterThan(compare.zero_shot_ap);
  expect(compare.delta).toBeGreaterThan(0);
  expect(document.querySelector(".compare-delta")!.textContent).toMatch(
    /^delta \+/,
  );

  // toggling a mark on and back off round-trips through the service
  const extra = query.positives.find(
    (id) => gridIds().includes(id) && !positives.includes(id),
  )!;
  clickMark(extra, ".mark-positive");
  await until(
    async () => (await api.status(sessionId)).feedback[extra] === "positive",
    10000,
    "the extra mark",
  );
  clickMark(extra, ".mark-clear");
  await until(
    async () => !(extra in (await api.status(sessionId)).feedback),
    10000,
    "the cleared mark",
  );
  const finalView = await api.status(sessionId);
  expect(Object.keys(finalView.feedback).sort()).toEqual(
    [...positives, ...hardNegatives].sort(),
  );
}, 120000);
