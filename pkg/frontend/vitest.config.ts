import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "jsdom",
    // The acceptance test boots a real deployment and waits on payloads.
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
