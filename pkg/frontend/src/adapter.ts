/**
 * The two adapter operations: exporting capture bundles for a
 * question/image pair, and the two-pass answer where cropped-image
 * tokens are appended to the original image tokens.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import type { Backend } from "./backend.js";
import { MockBackend } from "./backend.js";
import type { AdapterConfig } from "./config.js";
import { renderPrompt, validateConfig } from "./config.js";
import type { Manifest, TensorRole } from "./exchange.js";
import { buildManifest, writeBundle } from "./exchange.js";
import type { CropWindow, RgbImage } from "./image.js";
import { cropImage, savePng } from "./image.js";

export class ModelLoadFailure extends Error {}
/** The architecture cannot produce a requested tensor role. */
export class CaptureUnsupported extends Error {}
/** Doubling the image tokens would not fit the model's context window. */
export class ContextOverflow extends Error {}

const BACKENDS: Record<string, () => Backend> = {
  mock: () => new MockBackend(),
};

export function resolveBackend(name: string): Backend {
  const factory = BACKENDS[name];
  if (!factory) {
    throw new ModelLoadFailure(
      `no backend named ${JSON.stringify(name)}; available: ${Object.keys(BACKENDS).join(", ")}`,
    );
  }
  return factory();
}

export interface ExportOptions {
  /** Swap the question for the generic instruction and flag the manifest. */
  generic?: boolean;
  /** Override config.captureRoles for this export. */
  roles?: readonly TensorRole[];
}

export interface ExportResult {
  dir: string;
  manifest: Manifest;
  answer: string;
}

function checkRoles(config: AdapterConfig, roles: readonly TensorRole[]): void {
  if (config.connectorLayers === 0) {
    for (const role of roles) {
      if (role.startsWith("conn_")) {
        throw new CaptureUnsupported(
          `${config.modelId} has an identity connector, cannot capture ${role}`,
        );
      }
    }
  }
}

/**
 * Run one captured forward pass and write the bundle directory.
 *
 * The generic variant reuses the prompt template with the fixed
 * instruction in place of the question; gradient roles are dropped
 * there since the ratio only needs the generic attention.
 */
export function exportBundle(
  config: AdapterConfig,
  backend: Backend,
  image: RgbImage,
  question: string,
  outDir: string,
  options: ExportOptions = {},
): ExportResult {
  validateConfig(config);
  let roles = options.roles ?? config.captureRoles;
  checkRoles(config, roles);
  const text = options.generic ? config.genericInstruction : question;
  if (options.generic) {
    roles = roles.filter((role) => !role.endsWith("_grad"));
  }
  const prompt = renderPrompt(config, text);
  const capture = backend.forward(config, image, prompt, roles);

  const manifest = buildManifest(
    {
      model_id: config.modelId,
      L: config.numLlmLayers,
      H: config.numHeads,
      Lc: config.connectorLayers,
      Hc: config.connectorHeads,
      T: config.imageTokens,
      N: config.patchGrid,
      input_resolution: config.inputResolution,
      image_width: image.width,
      image_height: image.height,
      question: text,
      is_generic_instruction: options.generic ?? false,
    },
    [...roles],
  );
  writeBundle(outDir, manifest, Object.fromEntries(capture.tensors));
  return { dir: outDir, manifest, answer: capture.answer };
}

export interface PairMeta {
  questionId: string;
  imageId: string;
  gtAnswers?: string[];
  gtBbox?: [number, number, number, number];
}

/**
 * Write one toolkit corpus pair: pair.json, image.png, and the
 * question/ plus generic/ bundles. Returns the question-pass answer.
 */
export function exportPair(
  config: AdapterConfig,
  backend: Backend,
  image: RgbImage,
  question: string,
  pairDir: string,
  meta: PairMeta,
): string {
  fs.mkdirSync(pairDir, { recursive: true });
  const result = exportBundle(config, backend, image, question, path.join(pairDir, "question"));
  exportBundle(config, backend, image, question, path.join(pairDir, "generic"), { generic: true });
  savePng(image, path.join(pairDir, "image.png"));

  const pairJson: Record<string, unknown> = {
    question_id: meta.questionId,
    image_id: meta.imageId,
    question,
    gt_answers: meta.gtAnswers ?? [],
    image: "image.png",
  };
  if (meta.gtBbox) pairJson["gt_bbox"] = meta.gtBbox;
  fs.writeFileSync(
    path.join(pairDir, "pair.json"),
    JSON.stringify(pairJson, null, 2) + "\n",
    "utf-8",
  );
  return result.answer;
}

export interface CropAnswer {
  answerOriginal: string;
  answerWithCrop: string;
  /** Image-token count of the plain pass. */
  originalImageTokens: number;
  /** Image-token count with the crop appended; always exactly double. */
  combinedImageTokens: number;
}

/**
 * Answer twice: once on the original image alone, once with the cropped
 * region's tokens concatenated after the original image tokens. Both
 * passes are greedy, so equal inputs give equal strings.
 */
export function answerWithCrop(
  config: AdapterConfig,
  backend: Backend,
  image: RgbImage,
  question: string,
  crop: CropWindow,
): CropAnswer {
  validateConfig(config);
  const prompt = renderPrompt(config, question);
  const cropped = cropImage(image, crop);

  const combinedTokens = backend.countTokens(config, prompt, 2);
  if (combinedTokens > config.contextWindow) {
    throw new ContextOverflow(
      `two image blocks need ${combinedTokens} tokens, context window is ${config.contextWindow}`,
    );
  }
  return {
    answerOriginal: backend.answer(config, [image], prompt),
    answerWithCrop: backend.answer(config, [image, cropped], prompt),
    originalImageTokens: config.imageTokens,
    combinedImageTokens: 2 * config.imageTokens,
  };
}
