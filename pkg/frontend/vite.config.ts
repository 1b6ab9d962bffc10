import { defineConfig } from "vitest/config";

export default defineConfig({
  server: {
    port: 5173,
    // Forward API calls to a locally running service during development.
    proxy: {
      "/sessions": "http://127.0.0.1:8400",
      "/cost-estimate": "http://127.0.0.1:8400",
      "/memory-bank": "http://127.0.0.1:8400",
      "/healthz": "http://127.0.0.1:8400",
    },
  },
  test: {
    environment: "jsdom",
  },
});
