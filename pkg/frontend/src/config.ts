/**
 * Adapter configuration: which model family, how to prompt it, and what
 * the exported bundles look like dimensionally.
 */

import * as fs from "node:fs";

import { ExchangeError, TENSOR_ROLES, TensorRole } from "./exchange.js";

export const QUESTION_PLACEHOLDER = "{question}";

/** Fixed denominator prompt for relative attention; must match the toolkit's pairing. */
export const GENERIC_INSTRUCTION = "Write a general description of the image.";

export interface AdapterConfig {
  modelId: string;
  /** Must contain QUESTION_PLACEHOLDER. */
  promptTemplate: string;
  genericInstruction: string;
  captureRoles: TensorRole[];
  /** LLM self-attention geometry. */
  numLlmLayers: number;
  numHeads: number;
  /** Connector cross-attention geometry; both zero for identity/MLP connectors. */
  connectorLayers: number;
  connectorHeads: number;
  /** Image tokens fed to the LLM; equals N*N when the connector is identity. */
  imageTokens: number;
  patchGrid: number;
  inputResolution: number;
  /** Token budget for a full prompt; guards the doubled-token second pass. */
  contextWindow: number;
  device?: string;
}

export class ConfigError extends Error {}

const PRESETS: Record<string, AdapterConfig> = {
  "llava-1.5": {
    modelId: "llava-1.5-7b",
    promptTemplate:
      "<image>\nUSER: {question} Answer the question using a single word or phrase. ASSISTANT:",
    genericInstruction: GENERIC_INSTRUCTION,
    captureRoles: ["ans_attn"],
    numLlmLayers: 32,
    numHeads: 32,
    connectorLayers: 0,
    connectorHeads: 0,
    imageTokens: 576,
    patchGrid: 24,
    inputResolution: 336,
    contextWindow: 4096,
  },
  instructblip: {
    modelId: "instructblip-vicuna-7b",
    promptTemplate: "<image> Question: {question} Short Answer:",
    genericInstruction: GENERIC_INSTRUCTION,
    captureRoles: ["ans_attn", "conn_attn"],
    numLlmLayers: 32,
    numHeads: 32,
    connectorLayers: 6,
    connectorHeads: 12,
    imageTokens: 32,
    patchGrid: 16,
    inputResolution: 224,
    contextWindow: 2048,
  },
};

export function presetConfig(family: keyof typeof PRESETS | string): AdapterConfig {
  const preset = PRESETS[family];
  if (!preset) {
    throw new ConfigError(
      `unknown model family ${JSON.stringify(family)}; known: ${Object.keys(PRESETS).join(", ")}`,
    );
  }
  // copy so callers can tweak without mutating the table
  return { ...preset, captureRoles: [...preset.captureRoles] };
}

export function validateConfig(config: AdapterConfig): AdapterConfig {
  if (!config.promptTemplate.includes(QUESTION_PLACEHOLDER)) {
    throw new ConfigError(`promptTemplate must contain ${QUESTION_PLACEHOLDER}`);
  }
  if (!config.genericInstruction) {
    throw new ConfigError("genericInstruction must be nonempty");
  }
  for (const role of config.captureRoles) {
    if (!TENSOR_ROLES.includes(role)) {
      throw new ConfigError(`unknown capture role ${JSON.stringify(role)}`);
    }
  }
  const dims: Array<[string, number]> = [
    ["numLlmLayers", config.numLlmLayers],
    ["numHeads", config.numHeads],
    ["imageTokens", config.imageTokens],
    ["patchGrid", config.patchGrid],
    ["inputResolution", config.inputResolution],
    ["contextWindow", config.contextWindow],
  ];
  for (const [name, value] of dims) {
    if (!Number.isInteger(value) || value < 1) {
      throw new ConfigError(`${name} must be a positive integer, got ${value}`);
    }
  }
  if ((config.connectorLayers === 0) !== (config.connectorHeads === 0)) {
    throw new ConfigError("connectorLayers and connectorHeads must be zero together");
  }
  if (config.connectorLayers === 0 && config.imageTokens !== config.patchGrid ** 2) {
    throw new ConfigError(
      `identity connector needs imageTokens == patchGrid^2, got ` +
        `${config.imageTokens} vs ${config.patchGrid ** 2}`,
    );
  }
  return config;
}

export function renderPrompt(config: AdapterConfig, question: string): string {
  if (!question.trim()) {
    throw new ConfigError("question must be nonempty");
  }
  return config.promptTemplate.replace(QUESTION_PLACEHOLDER, question);
}

/** Load a config file: either {"family": "llava-1.5", ...overrides} or a full AdapterConfig. */
export function loadConfigFile(filePath: string): AdapterConfig {
  let data: Record<string, unknown>;
  try {
    data = JSON.parse(fs.readFileSync(filePath, "utf-8"));
  } catch (err) {
    throw new ConfigError(`cannot read config file ${filePath}: ${String(err)}`);
  }
  const { family, ...rest } = data as { family?: string } & Partial<AdapterConfig>;
  const base = family ? presetConfig(family) : ({} as AdapterConfig);
  const merged = { ...base, ...rest } as AdapterConfig;
  return validateConfig(merged);
}
