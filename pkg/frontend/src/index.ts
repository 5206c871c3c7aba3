export {
  answerWithCrop,
  CaptureUnsupported,
  ContextOverflow,
  exportBundle,
  exportPair,
  ModelLoadFailure,
  resolveBackend,
} from "./adapter.js";
export type { CropAnswer, ExportOptions, ExportResult, PairMeta } from "./adapter.js";
export { fnv1a, MockBackend, mulberry32 } from "./backend.js";
export type { Backend, ForwardCapture } from "./backend.js";
export {
  ConfigError,
  GENERIC_INSTRUCTION,
  loadConfigFile,
  presetConfig,
  QUESTION_PLACEHOLDER,
  renderPrompt,
  validateConfig,
} from "./config.js";
export type { AdapterConfig } from "./config.js";
export {
  buildManifest,
  ExchangeError,
  expectedShape,
  readBundle,
  TENSOR_ROLES,
  writeBundle,
} from "./exchange.js";
export type { LoadedBundle, Manifest, ManifestDims, TensorRole, TensorSpec } from "./exchange.js";
export {
  cropImage,
  ImageError,
  imageFromSeed,
  loadPng,
  makeImage,
  resampleSquare,
  savePng,
} from "./image.js";
export type { CropWindow, RgbImage } from "./image.js";
export { parseRecord, readRecords, RecordError, writeFailures, writeRecords } from "./records.js";
export type {
  CropDirectiveJson,
  EvalRecord,
  LayerChoiceJson,
  RecordFailure,
} from "./records.js";
