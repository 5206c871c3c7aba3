/**
 * Model backends.
 *
 * A backend owns the forward pass: given an image and a prompt it produces
 * an answer plus whatever internals the capture roles ask for. The shipped
 * implementation is a deterministic mock that stands in for a real model
 * during integration work. It preprocesses exactly like the real pipelines
 * (square resample, patch pooling) so geometry bugs still surface, but the
 * attention and gradient tensors are seeded pseudo-random draws shaped by
 * the pooled image content.
 */

import type { AdapterConfig } from "./config.js";
import type { TensorRole } from "./exchange.js";
import { ExchangeError, expectedShape } from "./exchange.js";
import type { RgbImage } from "./image.js";
import { resampleSquare } from "./image.js";

export interface ForwardCapture {
  /** LLM-side image token values, length T. */
  tokens: Float64Array;
  /** Pooled patch values in [0, 1], length N*N. */
  patches: Float64Array;
  answer: string;
  tensors: Map<TensorRole, Float32Array>;
}

export interface Backend {
  readonly name: string;
  forward(
    config: AdapterConfig,
    image: RgbImage,
    prompt: string,
    roles: readonly TensorRole[],
  ): ForwardCapture;
  answer(config: AdapterConfig, images: readonly RgbImage[], prompt: string): string;
  /** Token budget estimate for a prompt with `imageCount` embedded images. */
  countTokens(config: AdapterConfig, prompt: string, imageCount: number): number;
}

// 32-bit FNV-1a; cheap, stable across platforms, good enough for seeding.
export function fnv1a(text: string): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 0x01000193);
  }
  return h >>> 0;
}

export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

const ANSWER_VOCAB = [
  "yes", "no", "white", "black", "red", "blue", "green",
  "two", "three", "dog", "cat", "table", "left", "right",
  "frisbee", "kitchen",
] as const;

// Keep a little headroom under the loader's row-mass ceiling; real rows
// rarely put the full mass on image tokens anyway.
const ROW_MASS = 0.9;

function poolPatches(image: RgbImage, resolution: number, grid: number): Float64Array {
  const square = resampleSquare(image, resolution);
  const out = new Float64Array(grid * grid);
  const cell = resolution / grid;
  for (let gy = 0; gy < grid; gy++) {
    const y0 = Math.round(gy * cell);
    const y1 = Math.max(Math.round((gy + 1) * cell), y0 + 1);
    for (let gx = 0; gx < grid; gx++) {
      const x0 = Math.round(gx * cell);
      const x1 = Math.max(Math.round((gx + 1) * cell), x0 + 1);
      let sum = 0;
      for (let y = y0; y < y1; y++) {
        for (let x = x0; x < x1; x++) {
          const i = (y * resolution + x) * 3;
          sum += square.pixels[i]! + square.pixels[i + 1]! + square.pixels[i + 2]!;
        }
      }
      out[gy * grid + gx] = sum / ((y1 - y0) * (x1 - x0) * 3 * 255);
    }
  }
  return out;
}

/** Stable content signature; pooled values are exact rationals so this is safe. */
function signature(values: Float64Array): string {
  const parts = new Array<string>(values.length);
  for (let i = 0; i < values.length; i++) parts[i] = values[i]!.toFixed(6);
  return parts.join(",");
}

function attentionRow(out: Float32Array, offset: number, weights: Float64Array, rand: () => number): void {
  const n = weights.length;
  const row = new Float64Array(n);
  let total = 0;
  for (let i = 0; i < n; i++) {
    row[i] = (0.25 + weights[i]!) * (0.5 + rand());
    total += row[i]!;
  }
  for (let i = 0; i < n; i++) out[offset + i] = (row[i]! / total) * ROW_MASS;
}

function gradients(size: number, rand: () => number): Float32Array {
  const out = new Float32Array(size);
  for (let i = 0; i < size; i++) out[i] = rand() * 2 - 1;
  return out;
}

/**
 * Deterministic stand-in for a captured model. Same config, image, and
 * prompt always reproduce the same bytes; a crop covering the whole image
 * reproduces the full image's tokens exactly (same resample, same pooling).
 */
export class MockBackend implements Backend {
  readonly name = "mock";

  forward(
    config: AdapterConfig,
    image: RgbImage,
    prompt: string,
    roles: readonly TensorRole[],
  ): ForwardCapture {
    const patches = poolPatches(image, config.inputResolution, config.patchGrid);
    const tokens = this.projectTokens(config, patches);
    const tensors = new Map<TensorRole, Float32Array>();
    const seedBase = `${config.modelId}|${prompt}|${signature(tokens)}`;

    for (const role of roles) {
      tensors.set(role, this.capture(config, role, image, patches, tokens, seedBase));
    }
    return { tokens, patches, answer: this.pickAnswer(config, prompt, [tokens]), tensors };
  }

  answer(config: AdapterConfig, images: readonly RgbImage[], prompt: string): string {
    if (images.length === 0) throw new ExchangeError("answer needs at least one image");
    const tokenSets = images.map((image) =>
      this.projectTokens(config, poolPatches(image, config.inputResolution, config.patchGrid)),
    );
    return this.pickAnswer(config, prompt, tokenSets);
  }

  countTokens(config: AdapterConfig, prompt: string, imageCount: number): number {
    const text = prompt.split(/<image>/).join(" ");
    const words = text.split(/\s+/).filter((w) => w.length > 0).length;
    // +2 covers BOS plus the answer position we capture from.
    return words + 2 + imageCount * config.imageTokens;
  }

  private projectTokens(config: AdapterConfig, patches: Float64Array): Float64Array {
    if (config.connectorLayers === 0) {
      if (config.imageTokens !== patches.length) {
        throw new ExchangeError(
          `identity connector needs T == N*N, got T=${config.imageTokens} N*N=${patches.length}`,
        );
      }
      return Float64Array.from(patches);
    }
    // Fixed per-model mixing weights: query token j attends a seeded soft
    // subset of patches, so tokens move when the image content moves.
    const tokens = new Float64Array(config.imageTokens);
    for (let j = 0; j < config.imageTokens; j++) {
      const rand = mulberry32(fnv1a(`${config.modelId}|proj|${j}`));
      let num = 0;
      let den = 0;
      for (let i = 0; i < patches.length; i++) {
        const w = rand();
        num += w * patches[i]!;
        den += w;
      }
      tokens[j] = num / den;
    }
    return tokens;
  }

  private capture(
    config: AdapterConfig,
    role: TensorRole,
    image: RgbImage,
    patches: Float64Array,
    tokens: Float64Array,
    seedBase: string,
  ): Float32Array {
    const shape = expectedShape(
      {
        L: config.numLlmLayers,
        Hc: config.connectorHeads,
        Lc: config.connectorLayers,
        H: config.numHeads,
        T: config.imageTokens,
        N: config.patchGrid,
        image_width: image.width,
        image_height: image.height,
      },
      role,
    );
    const size = shape.reduce((a, b) => a * b, 1);

    switch (role) {
      case "ans_attn": {
        const out = new Float32Array(size);
        for (let m = 0; m < config.numLlmLayers; m++) {
          for (let h = 0; h < config.numHeads; h++) {
            const rand = mulberry32(fnv1a(`${seedBase}|ans|${m}|${h}`));
            attentionRow(out, (m * config.numHeads + h) * config.imageTokens, tokens, rand);
          }
        }
        return out;
      }
      case "conn_attn": {
        const out = new Float32Array(size);
        const rowLen = patches.length;
        let offset = 0;
        for (let k = 0; k < config.connectorLayers; k++) {
          for (let h = 0; h < config.connectorHeads; h++) {
            for (let t = 0; t < config.imageTokens; t++) {
              const rand = mulberry32(fnv1a(`${seedBase}|conn|${k}|${h}|${t}`));
              attentionRow(out, offset, patches, rand);
              offset += rowLen;
            }
          }
        }
        return out;
      }
      case "ans_attn_grad":
        return gradients(size, mulberry32(fnv1a(`${seedBase}|ans_grad`)));
      case "conn_attn_grad":
        return gradients(size, mulberry32(fnv1a(`${seedBase}|conn_grad`)));
      case "input_grad":
        return gradients(size, mulberry32(fnv1a(`${seedBase}|input_grad|${image.width}x${image.height}`)));
    }
  }

  private pickAnswer(config: AdapterConfig, prompt: string, tokenSets: readonly Float64Array[]): string {
    const parts = [config.modelId, prompt, ...tokenSets.map(signature)];
    return ANSWER_VOCAB[fnv1a(parts.join("||")) % ANSWER_VOCAB.length]!;
  }
}
