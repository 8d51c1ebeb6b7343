import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    include: ["tests/**/*.test.ts"],
    // the e2e test drives a live service process
    testTimeout: 120000,
    hookTimeout: 120000,
  },
});
