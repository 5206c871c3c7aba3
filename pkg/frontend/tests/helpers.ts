import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import type { AdapterConfig } from "../src/config.js";

/** Identity-connector config small enough to keep capture cheap. */
export function smallIdentityConfig(): AdapterConfig {
  return {
    modelId: "mock-identity",
    promptTemplate: "<image>\nUSER: {question} ASSISTANT:",
    genericInstruction: "Write a general description of the image.",
    captureRoles: ["ans_attn"],
    numLlmLayers: 2,
    numHeads: 2,
    connectorLayers: 0,
    connectorHeads: 0,
    imageTokens: 16,
    patchGrid: 4,
    inputResolution: 32,
    contextWindow: 4096,
  };
}

/** Resampler-connector config with T != N*N. */
export function smallConnectorConfig(): AdapterConfig {
  return {
    modelId: "mock-connector",
    promptTemplate: "<image> Question: {question} Short Answer:",
    genericInstruction: "Write a general description of the image.",
    captureRoles: ["ans_attn", "conn_attn"],
    numLlmLayers: 2,
    numHeads: 2,
    connectorLayers: 2,
    connectorHeads: 3,
    imageTokens: 5,
    patchGrid: 4,
    inputResolution: 32,
    contextWindow: 4096,
  };
}

export function tmpDir(prefix: string): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), prefix));
}

export function rmDir(dir: string): void {
  fs.rmSync(dir, { recursive: true, force: true });
}
