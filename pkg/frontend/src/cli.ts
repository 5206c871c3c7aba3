/**
 * Command surface: `export` turns a pair list into a toolkit corpus,
 * `answer` fills predictions into a records file (two-pass when the
 * record carries a crop directive).
 *
 * Exit codes mirror the toolkit: 0 clean, 1 per-pair failures occurred,
 * 2 unusable arguments or configuration.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { parseArgs } from "node:util";

import { answerWithCrop, exportPair, ModelLoadFailure, resolveBackend } from "./adapter.js";
import type { AdapterConfig } from "./config.js";
import { ConfigError, loadConfigFile, presetConfig, renderPrompt } from "./config.js";
import type { RgbImage } from "./image.js";
import { imageFromSeed, loadPng } from "./image.js";
import type { EvalRecord, RecordFailure } from "./records.js";
import { readRecords, writeFailures, writeRecords } from "./records.js";

const USAGE = `usage: attncrop-adapter <command> [options]

commands:
  export   capture bundles for every pair in a pair list
           --config FILE | --family NAME, --pairs FILE, --out DIR,
           [--images-dir DIR] [--backend NAME]
  answer   fill predictions into a records file
           --config FILE | --family NAME, --records FILE, --images-dir DIR,
           --out FILE, [--backend NAME]
`;

interface ExportPairSpec {
  question_id: string;
  image_id: string;
  question: string;
  gt_answers?: string[];
  gt_bbox?: [number, number, number, number];
  /** PNG path, relative to --images-dir (or the pair list's directory). */
  image?: string;
  /** Generate the image instead of reading one. */
  synthetic?: { width: number; height: number; seed: number };
}

function fail(message: string): never {
  throw new ConfigError(message);
}

function loadConfig(values: { config?: string; family?: string }): AdapterConfig {
  if (values.config && values.family) fail("--config and --family are mutually exclusive");
  if (values.config) return loadConfigFile(values.config);
  if (values.family) return presetConfig(values.family);
  fail("one of --config or --family is required");
}

function specImage(spec: ExportPairSpec, imagesDir: string): RgbImage {
  if (spec.image && spec.synthetic) {
    fail(`pair ${spec.question_id}: image and synthetic are mutually exclusive`);
  }
  if (spec.image) return loadPng(path.resolve(imagesDir, spec.image));
  if (spec.synthetic) {
    return imageFromSeed(spec.synthetic.width, spec.synthetic.height, spec.synthetic.seed);
  }
  fail(`pair ${spec.question_id}: needs either an image path or a synthetic block`);
}

function cmdExport(argv: string[]): number {
  const { values } = parseArgs({
    args: argv,
    options: {
      config: { type: "string" },
      family: { type: "string" },
      pairs: { type: "string" },
      out: { type: "string" },
      "images-dir": { type: "string" },
      backend: { type: "string", default: "mock" },
    },
  });
  const config = loadConfig(values);
  if (!values.pairs) fail("--pairs is required");
  if (!values.out) fail("--out is required");
  const backend = resolveBackend(values.backend!);

  let specs: ExportPairSpec[];
  try {
    specs = JSON.parse(fs.readFileSync(values.pairs, "utf-8"));
  } catch (err) {
    fail(`cannot read pair list ${values.pairs}: ${String(err)}`);
  }
  if (!Array.isArray(specs)) fail(`pair list ${values.pairs} must be a JSON array`);
  const imagesDir = values["images-dir"] ?? path.dirname(path.resolve(values.pairs));

  fs.mkdirSync(values.out, { recursive: true });
  const failures: RecordFailure[] = [];
  let ok = 0;
  for (const spec of specs) {
    try {
      const image = specImage(spec, imagesDir);
      exportPair(config, backend, image, spec.question, path.join(values.out, spec.question_id), {
        questionId: spec.question_id,
        imageId: spec.image_id,
        gtAnswers: spec.gt_answers,
        gtBbox: spec.gt_bbox,
      });
      ok += 1;
    } catch (err) {
      failures.push({
        pair_id: String(spec?.question_id ?? "<unknown>"),
        error: err instanceof Error ? err.constructor.name : "Error",
        message: err instanceof Error ? err.message : String(err),
      });
    }
  }
  fs.writeFileSync(
    path.join(values.out, "errors.json"),
    JSON.stringify(failures, null, 2) + "\n",
    "utf-8",
  );
  process.stderr.write(`${ok} pairs ok, ${failures.length} failed\n`);
  return failures.length ? 1 : 0;
}

function recordImage(imagesDir: string, record: EvalRecord): RgbImage {
  const flat = path.join(imagesDir, `${record.image_id}.png`);
  if (fs.existsSync(flat)) return loadPng(flat);
  const nested = path.join(imagesDir, record.question_id, "image.png");
  if (fs.existsSync(nested)) return loadPng(nested);
  throw new ConfigError(`no image for ${record.image_id} under ${imagesDir}`);
}

function cmdAnswer(argv: string[]): number {
  const { values } = parseArgs({
    args: argv,
    options: {
      config: { type: "string" },
      family: { type: "string" },
      records: { type: "string" },
      "images-dir": { type: "string" },
      out: { type: "string" },
      backend: { type: "string", default: "mock" },
    },
  });
  const config = loadConfig(values);
  if (!values.records) fail("--records is required");
  if (!values["images-dir"]) fail("--images-dir is required");
  if (!values.out) fail("--out is required");
  const backend = resolveBackend(values.backend!);

  const records = readRecords(values.records);
  const answered: EvalRecord[] = [];
  const failures: RecordFailure[] = [];
  for (const record of records) {
    try {
      const image = recordImage(values["images-dir"], record);
      if (record.crop) {
        const result = answerWithCrop(config, backend, image, record.question, record.crop);
        record.prediction = result.answerOriginal;
        record.prediction_cropped = result.answerWithCrop;
      } else {
        record.prediction = backend.answer(config, [image], renderPrompt(config, record.question));
      }
      answered.push(record);
    } catch (err) {
      failures.push({
        pair_id: record.question_id,
        error: err instanceof Error ? err.constructor.name : "Error",
        message: err instanceof Error ? err.message : String(err),
      });
    }
  }
  writeRecords(answered, values.out);
  writeFailures(failures, values.out);
  process.stderr.write(`${answered.length} records ok, ${failures.length} failed\n`);
  return failures.length ? 1 : 0;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    if (command === "export") return cmdExport(rest);
    if (command === "answer") return cmdAnswer(rest);
    process.stderr.write(USAGE);
    return command === "help" || command === "--help" ? 0 : 2;
  } catch (err) {
    if (
      err instanceof ConfigError ||
      err instanceof ModelLoadFailure ||
      (err instanceof TypeError && "code" in err) // parseArgs flags unknown options this way
    ) {
      process.stderr.write(`invalid configuration: ${err.message}\n`);
      return 2;
    }
    throw err;
  }
}
