import { ConsoleApi } from "./api.js";
import { createConsole } from "./app.js";

const DEFAULT_BASE_URL = "http://127.0.0.1:8008";

function baseUrlFromLocation(): string {
  const params = new URLSearchParams(window.location.search);
  return params.get("api") ?? DEFAULT_BASE_URL;
}

window.addEventListener("DOMContentLoaded", () => {
  const root = document.getElementById("console");
  if (root === null) throw new Error("missing #console element");
  createConsole(root, new ConsoleApi(baseUrlFromLocation()));
});
