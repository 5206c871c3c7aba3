import * as fs from "node:fs";
import * as path from "node:path";

import { afterEach, describe, expect, it } from "vitest";

import {
  parseRecord,
  readRecords,
  RecordError,
  writeFailures,
  writeRecords,
} from "../src/index.js";
import type { EvalRecord } from "../src/index.js";
import { rmDir, tmpDir } from "./helpers.js";

const dirs: string[] = [];
function scratch(): string {
  const dir = tmpDir("adapter-records-");
  dirs.push(dir);
  return dir;
}
afterEach(() => {
  while (dirs.length) rmDir(dirs.pop()!);
});

function sampleRecord(): EvalRecord {
  return {
    question_id: "q1",
    image_id: "img1",
    question: "What color?",
    gt_answers: ["red", "red", "maroon"],
    gt_bbox: [4, 5, 6, 7],
    prediction: "red",
    crop: { x: 0, y: 0, w: 16, h: 16, method: "rel_att", layer: { m: 0, k: 0, mode: "averaged" } },
  };
}

describe("parseRecord", () => {
  it("fills defaults for optional fields", () => {
    const record = parseRecord('{"question_id":"a","image_id":"b","question":"c"}');
    expect(record.gt_answers).toEqual([]);
    expect(record.prediction).toBe("");
  });

  it("rejects malformed JSON and missing identity keys", () => {
    expect(() => parseRecord("{nope")).toThrow(RecordError);
    expect(() => parseRecord('{"image_id":"b","question":"c"}')).toThrow(/question_id/);
  });
});

describe("read / write records", () => {
  it("round-trips byte-identically", () => {
    const dir = scratch();
    const a = path.join(dir, "a.jsonl");
    const b = path.join(dir, "b.jsonl");
    const records = [sampleRecord(), { ...sampleRecord(), question_id: "q2", crop: undefined }];
    writeRecords(records, a);
    writeRecords(readRecords(a), b);
    expect(fs.readFileSync(a)).toEqual(fs.readFileSync(b));
  });

  it("serializes keys in the shared schema order", () => {
    const dir = scratch();
    const file = path.join(dir, "rec.jsonl");
    // construct with keys deliberately out of order
    const record = {
      prediction: "red",
      question: "What color?",
      question_id: "q1",
      gt_answers: ["red"],
      image_id: "img1",
    } as EvalRecord;
    writeRecords([record], file);
    const line = fs.readFileSync(file, "utf-8").trim();
    expect(line).toBe(
      '{"question_id":"q1","image_id":"img1","question":"What color?",' +
        '"gt_answers":["red"],"prediction":"red"}',
    );
  });

  it("skips blank lines when reading", () => {
    const dir = scratch();
    const file = path.join(dir, "rec.jsonl");
    fs.writeFileSync(file, '\n{"question_id":"a","image_id":"b","question":"c"}\n\n');
    expect(readRecords(file)).toHaveLength(1);
  });

  it("writes an empty file for no records", () => {
    const dir = scratch();
    const file = path.join(dir, "rec.jsonl");
    writeRecords([], file);
    expect(fs.readFileSync(file, "utf-8")).toBe("");
  });
});

describe("writeFailures", () => {
  it("writes the sibling errors file", () => {
    const dir = scratch();
    const file = path.join(dir, "rec.jsonl");
    writeFailures([{ pair_id: "q1", error: "ImageError", message: "no image" }], file);
    const data = JSON.parse(fs.readFileSync(file + ".errors.json", "utf-8"));
    expect(data).toEqual([{ pair_id: "q1", error: "ImageError", message: "no image" }]);
  });
});
