/**
 * The JSONL evaluation record schema shared with the Python toolkit.
 *
 * Key order inside each record is fixed (optional keys simply drop out),
 * so a file rewritten unchanged is byte-identical. The adapter fills
 * `prediction` and `prediction_cropped`; everything else passes through.
 */

import * as fs from "node:fs";

export interface LayerChoiceJson {
  m: number;
  k: number;
  mode: "selected" | "averaged";
}

export interface CropDirectiveJson {
  x: number;
  y: number;
  w: number;
  h: number;
  method: string;
  layer: LayerChoiceJson | null;
}

export interface EvalRecord {
  question_id: string;
  image_id: string;
  question: string;
  gt_answers: string[];
  gt_bbox?: [number, number, number, number];
  prediction: string;
  prediction_cropped?: string;
  partition?: string;
  score?: number;
  crop?: CropDirectiveJson;
}

export class RecordError extends Error {}

const RECORD_KEYS = [
  "question_id",
  "image_id",
  "question",
  "gt_answers",
  "gt_bbox",
  "prediction",
  "prediction_cropped",
  "partition",
  "score",
  "crop",
] as const;

function orderKeys(record: EvalRecord): Record<string, unknown> {
  const raw = record as unknown as Record<string, unknown>;
  const out: Record<string, unknown> = {};
  for (const key of RECORD_KEYS) {
    if (raw[key] !== undefined) out[key] = raw[key];
  }
  return out;
}

export function parseRecord(line: string): EvalRecord {
  let data: unknown;
  try {
    data = JSON.parse(line);
  } catch (err) {
    throw new RecordError(`malformed record line: ${String(err)}`);
  }
  const record = data as EvalRecord;
  for (const key of ["question_id", "image_id", "question"] as const) {
    if (typeof record[key] !== "string") {
      throw new RecordError(`record is missing string key ${key}`);
    }
  }
  if (!Array.isArray(record.gt_answers)) record.gt_answers = [];
  if (typeof record.prediction !== "string") record.prediction = "";
  return record;
}

export function readRecords(filePath: string): EvalRecord[] {
  const text = fs.readFileSync(filePath, "utf-8");
  return text
    .split("\n")
    .filter((line) => line.trim().length > 0)
    .map(parseRecord);
}

export function writeRecords(records: readonly EvalRecord[], filePath: string): void {
  const lines = records.map((record) => JSON.stringify(orderKeys(record)));
  fs.writeFileSync(filePath, lines.join("\n") + (lines.length ? "\n" : ""), "utf-8");
}

export interface RecordFailure {
  pair_id: string;
  error: string;
  message: string;
}

/** Written next to the records as <records>.errors.json, like the toolkit does. */
export function writeFailures(failures: readonly RecordFailure[], recordsPath: string): void {
  fs.writeFileSync(recordsPath + ".errors.json", JSON.stringify(failures, null, 2) + "\n", "utf-8");
}
