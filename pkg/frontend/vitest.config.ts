import { defineConfig } from "vitest/config";

export default defineConfig({
    test: {
        include: ["tests/**/*.test.ts"],
        // The live suite boots a real server process; give it room.
        testTimeout: 60_000,
        hookTimeout: 60_000,
    },
});
