/**
 * Writer (and test-side reader) for the attncrop exchange format.
 *
 * A bundle is a directory holding manifest.json plus one headerless
 * little-endian float32 row-major binary file per tensor. The manifest
 * key names below are the wire format; the Python toolkit validates
 * them strictly, so this module checks shapes and value ranges before
 * anything touches disk.
 */

import * as fs from "node:fs";
import * as path from "node:path";

export type TensorRole =
  | "ans_attn"
  | "ans_attn_grad"
  | "conn_attn"
  | "conn_attn_grad"
  | "input_grad";

export const TENSOR_ROLES: readonly TensorRole[] = [
  "ans_attn",
  "ans_attn_grad",
  "conn_attn",
  "conn_attn_grad",
  "input_grad",
];

export interface TensorSpec {
  role: TensorRole;
  shape: number[];
  path: string;
}

export interface Manifest {
  model_id: string;
  L: number;
  H: number;
  Lc: number;
  Hc: number;
  T: number;
  N: number;
  input_resolution: number;
  image_width: number;
  image_height: number;
  question: string;
  is_generic_instruction: boolean;
  tensors: TensorSpec[];
}

export class ExchangeError extends Error {}

export type ManifestDims = Pick<
  Manifest,
  "L" | "H" | "Lc" | "Hc" | "T" | "N" | "image_width" | "image_height"
>;

/** Required shape for a role, given the manifest dimensions. */
export function expectedShape(manifest: ManifestDims, role: TensorRole): number[] {
  switch (role) {
    case "ans_attn":
    case "ans_attn_grad":
      return [manifest.L, manifest.H, manifest.T];
    case "conn_attn":
    case "conn_attn_grad":
      return [manifest.Lc, manifest.Hc, manifest.T, manifest.N * manifest.N];
    case "input_grad":
      return [3, manifest.image_height, manifest.image_width];
  }
}

function elementCount(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

function checkDims(manifest: Manifest): void {
  const positive: Array<[string, number]> = [
    ["L", manifest.L],
    ["H", manifest.H],
    ["T", manifest.T],
    ["N", manifest.N],
    ["input_resolution", manifest.input_resolution],
    ["image_width", manifest.image_width],
    ["image_height", manifest.image_height],
  ];
  for (const [name, value] of positive) {
    if (!Number.isInteger(value) || value < 1) {
      throw new ExchangeError(`${name} must be a positive integer, got ${value}`);
    }
  }
  if (manifest.Lc < 0 || manifest.Hc < 0) {
    throw new ExchangeError(`Lc and Hc must be >= 0`);
  }
  if ((manifest.Lc === 0) !== (manifest.Hc === 0)) {
    throw new ExchangeError(`Lc and Hc must both be zero or both be positive`);
  }
  if (manifest.Lc === 0 && manifest.T !== manifest.N * manifest.N) {
    throw new ExchangeError(
      `identity connector (Lc=0) needs T == N*N, got T=${manifest.T}, N=${manifest.N}`,
    );
  }
}

export function buildManifest(
  base: Omit<Manifest, "tensors">,
  roles: TensorRole[],
): Manifest {
  const manifest: Manifest = { ...base, tensors: [] };
  checkDims(manifest);
  const seen = new Set<string>();
  for (const role of roles) {
    if (seen.has(role)) throw new ExchangeError(`duplicate tensor role ${role}`);
    seen.add(role);
    if (role.startsWith("conn_") && manifest.Lc === 0) {
      throw new ExchangeError(`${role} declared but the connector is identity (Lc=0)`);
    }
    manifest.tensors.push({
      role,
      shape: expectedShape(manifest, role),
      path: `${role}.bin`,
    });
  }
  if (!seen.has("ans_attn")) {
    throw new ExchangeError(`ans_attn is mandatory`);
  }
  return manifest;
}

const NOISE_FLOOR = -1e-6;
const ROW_MASS_SLACK = 1e-3;

/** Clamp float noise, reject real negatives and overweight rows, like the loader will. */
function checkAttention(role: string, values: Float32Array, rowLength: number): void {
  let rowSum = 0;
  for (let i = 0; i < values.length; i++) {
    const v = values[i]!;
    if (!Number.isFinite(v)) throw new ExchangeError(`${role}: non-finite value at ${i}`);
    if (v < NOISE_FLOOR) throw new ExchangeError(`${role}: negative attention ${v} at ${i}`);
    if (v < 0) values[i] = 0;
    rowSum += values[i]!;
    if ((i + 1) % rowLength === 0) {
      if (rowSum > 1 + ROW_MASS_SLACK) {
        throw new ExchangeError(`${role}: row mass ${rowSum} exceeds 1 + ${ROW_MASS_SLACK}`);
      }
      rowSum = 0;
    }
  }
}

function tensorToBuffer(values: Float32Array): Buffer {
  const buf = Buffer.alloc(values.length * 4);
  for (let i = 0; i < values.length; i++) {
    buf.writeFloatLE(values[i]!, i * 4);
  }
  return buf;
}

function bufferToTensor(buf: Buffer): Float32Array {
  const out = new Float32Array(buf.length / 4);
  for (let i = 0; i < out.length; i++) {
    out[i] = buf.readFloatLE(i * 4);
  }
  return out;
}

export function writeBundle(
  dir: string,
  manifest: Manifest,
  tensors: Partial<Record<TensorRole, Float32Array>>,
): void {
  checkDims(manifest);
  fs.mkdirSync(dir, { recursive: true });
  for (const spec of manifest.tensors) {
    const values = tensors[spec.role];
    if (values === undefined) {
      throw new ExchangeError(`manifest lists ${spec.role} but no tensor was provided`);
    }
    const want = expectedShape(manifest, spec.role);
    if (spec.shape.length !== want.length || spec.shape.some((d, i) => d !== want[i])) {
      throw new ExchangeError(
        `${spec.role}: declared shape [${spec.shape}] does not match required [${want}]`,
      );
    }
    if (values.length !== elementCount(want)) {
      throw new ExchangeError(
        `${spec.role}: ${values.length} values, shape [${want}] needs ${elementCount(want)}`,
      );
    }
    if (spec.role === "ans_attn" || spec.role === "conn_attn") {
      const rowLength = want[want.length - 1]!;
      checkAttention(spec.role, values, rowLength);
    }
    fs.writeFileSync(path.join(dir, spec.path), tensorToBuffer(values));
  }
  fs.writeFileSync(
    path.join(dir, "manifest.json"),
    JSON.stringify(manifest, null, 2) + "\n",
    "utf-8",
  );
}

export interface LoadedBundle {
  manifest: Manifest;
  tensors: Partial<Record<TensorRole, Float32Array>>;
}

export function readBundle(dir: string): LoadedBundle {
  const manifestPath = path.join(dir, "manifest.json");
  if (!fs.existsSync(manifestPath)) {
    throw new ExchangeError(`no manifest.json under ${dir}`);
  }
  const manifest = JSON.parse(fs.readFileSync(manifestPath, "utf-8")) as Manifest;
  checkDims(manifest);
  const tensors: Partial<Record<TensorRole, Float32Array>> = {};
  for (const spec of manifest.tensors) {
    const buf = fs.readFileSync(path.join(dir, spec.path));
    const want = elementCount(expectedShape(manifest, spec.role));
    if (buf.length !== want * 4) {
      throw new ExchangeError(
        `${spec.role}: file is ${buf.length} bytes, shape needs ${want * 4}`,
      );
    }
    tensors[spec.role] = bufferToTensor(buf);
  }
  return { manifest, tensors };
}
