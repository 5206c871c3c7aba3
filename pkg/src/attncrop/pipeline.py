"""Batch plumbing: the on-disk pair corpus, job configuration, and the
runners behind the CLI subcommands.

A corpus is a directory of pairs::

    <bundles_dir>/<pair_id>/
        pair.json                   metadata (see below)
        question/                   exchange bundle for the question run
        generic/                    generic-instruction bundle (rel_att)
        blocks/block_000/question/  per-block bundles for high-res pairs
        blocks/block_000/generic/   (row-major block order from tile_blocks)

pair.json keys: question_id, image_id, question (required); gt_answers,
gt_bbox ([x, y, w, h]), image (path, relative to images_dir or the pair
directory), image_width, image_height, input_resolution (optional).

Every runner isolates per-record failures: one bad pair becomes an entry
in the machine-readable error list (written next to the records as
<records_out>.errors.json) and the remaining pairs still complete. Runner
outputs carry no timestamps and are assembled in input order, so reruns
and different worker counts produce byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from PIL import Image

from . import analysis, attention, cropper
from .datatypes import BBox, CropDirective, EvalRecord, ImportanceMap
from .errors import (
    AttncropError,
    BlockMapMismatch,
    ConfigError,
    MissingGenericBundle,
    MissingPredictions,
    MissingTensor,
)
from .estimators import compute_importance
from .exchange import AttentionBundle, load_bundle, read_records, write_records
from .validation import PairInputs, check_method, resolve_layer_choice

PAIR_META_NAME = "pair.json"

METRICS = ("vqa", "exact")


@dataclass
class JobConfig:
    """Everything a runner needs; flags and config files both map here."""

    bundles_dir: Path | None = None
    images_dir: Path | None = None
    records_in: Path | None = None
    records_out: Path | None = None
    crops_dir: Path | None = None
    plot: Path | None = None
    method: str = "rel_att"
    llm_layer: int | None = None
    connector_layer: int | None = None
    average: bool = False
    multipliers: tuple[float, ...] = cropper.DEFAULT_MULTIPLIERS
    high_res: bool = False
    high_res_limit: int = cropper.HIGH_RES_BLOCK_LIMIT
    eps: float = attention.DEFAULT_EPS
    input_res: int | None = None
    metric: str = "vqa"
    workers: int = 1

    _PATH_FIELDS = ("bundles_dir", "images_dir", "records_in", "records_out", "crops_dir", "plot")

    def __post_init__(self) -> None:
        for name in self._PATH_FIELDS:
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, Path(value))
        if isinstance(self.multipliers, list):
            self.multipliers = tuple(self.multipliers)

    def validate(self) -> "JobConfig":
        try:
            check_method(self.method)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.high_res_limit < 1:
            raise ConfigError(f"high_res_limit must be >= 1, got {self.high_res_limit}")
        if not self.multipliers or any(a <= 0 for a in self.multipliers):
            raise ConfigError(f"multipliers must be positive, got {self.multipliers}")
        if self.input_res is not None and self.input_res < 1:
            raise ConfigError(f"input_res must be >= 1, got {self.input_res}")
        if (self.llm_layer is not None and self.llm_layer < 0) or (
            self.connector_layer is not None and self.connector_layer < 0
        ):
            raise ConfigError("layer indices must be >= 0")
        return self

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "JobConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class PairDir:
    pair_id: str
    root: Path
    meta: dict[str, Any]


@dataclass
class RecordFailure:
    pair_id: str
    error: str
    message: str

    def to_json_dict(self) -> dict[str, str]:
        return {"pair_id": self.pair_id, "error": self.error, "message": self.message}


@dataclass
class RunResult:
    records: list[EvalRecord] = field(default_factory=list)
    failures: list[RecordFailure] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


def discover_pairs(bundles_dir: Path) -> list[PairDir]:
    if not bundles_dir or not Path(bundles_dir).is_dir():
        raise ConfigError(f"bundles directory not found: {bundles_dir}")
    pairs = []
    for entry in sorted(Path(bundles_dir).iterdir()):
        meta_path = entry / PAIR_META_NAME
        if not entry.is_dir() or not meta_path.is_file():
            continue
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        for key in ("question_id", "image_id", "question"):
            if key not in meta:
                raise ConfigError(f"{meta_path} missing required key {key!r}")
        pairs.append(PairDir(pair_id=entry.name, root=entry, meta=meta))
    if not pairs:
        raise ConfigError(f"no pairs found under {bundles_dir}")
    return pairs


def _meta_bbox(pair: PairDir) -> BBox | None:
    raw = pair.meta.get("gt_bbox")
    return BBox.from_list(raw) if raw is not None else None


def _load_image(pair: PairDir, config: JobConfig) -> np.ndarray | None:
    rel = pair.meta.get("image")
    if rel is None:
        return None
    path = Path(rel)
    if not path.is_absolute():
        base = config.images_dir if config.images_dir else pair.root
        path = base / path
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _question_bundle_dir(pair: PairDir) -> Path:
    return pair.root / "question"


def _block_dirs(pair: PairDir) -> list[Path]:
    blocks_root = pair.root / "blocks"
    if not blocks_root.is_dir():
        return []
    return sorted(p for p in blocks_root.iterdir() if p.is_dir())


def _image_dims(pair: PairDir, config: JobConfig, image: np.ndarray | None) -> tuple[int, int]:
    """(width, height) of the full image, from metadata, bundle, or pixels."""
    meta = pair.meta
    if "image_width" in meta and "image_height" in meta:
        return int(meta["image_width"]), int(meta["image_height"])
    qdir = _question_bundle_dir(pair)
    if (qdir / "manifest.json").is_file():
        man = load_bundle(qdir).manifest
        return man.image_width, man.image_height
    if image is not None:
        return image.shape[1], image.shape[0]
    raise ConfigError(
        f"pair {pair.pair_id}: image size unavailable (no metadata, bundle, or image)"
    )


def _load_pair_inputs(bundle_root: Path, method: str, image: np.ndarray | None) -> PairInputs:
    bundle = load_bundle(bundle_root / "question")
    generic = None
    if method == "rel_att":
        generic_dir = bundle_root / "generic"
        if not (generic_dir / "manifest.json").is_file():
            raise MissingGenericBundle(f"no generic bundle under {bundle_root}")
        generic = load_bundle(generic_dir)
    return PairInputs(bundle=bundle, generic=generic, image=image)


def _resolve_input_res(config: JobConfig, pair: PairDir, bundle: AttentionBundle | None) -> int:
    if config.input_res is not None:
        return config.input_res
    if bundle is not None:
        return bundle.manifest.input_resolution
    if "input_resolution" in pair.meta:
        return int(pair.meta["input_resolution"])
    raise ConfigError(
        f"pair {pair.pair_id}: input resolution unavailable; pass --input-res"
    )


def _single_importance(pair: PairDir, config: JobConfig, image: np.ndarray | None):
    inputs = _load_pair_inputs(pair.root, config.method, image)
    choice = resolve_layer_choice(
        inputs.bundle.manifest.model_id, config.llm_layer, config.connector_layer, config.average
    )
    importance = compute_importance(inputs, config.method, choice, config.eps)
    return importance, inputs.bundle, choice


def _tiled_importance(pair: PairDir, config: JobConfig, image: np.ndarray | None):
    """Per-block maps stitched to the full image grid.

    Blocks must have been exported in the row-major order produced by
    tile_blocks on the full image size; each block manifest's image size
    must equal its block.
    """
    block_dirs = _block_dirs(pair)
    if not block_dirs:
        raise MissingTensor(f"pair {pair.pair_id}: high_res set but no blocks/ directory")
    width, height = _image_dims(pair, config, image)
    blocks = cropper.tile_blocks(width, height, config.high_res_limit)
    if len(blocks) != len(block_dirs):
        raise BlockMapMismatch(
            f"pair {pair.pair_id}: tiling {width}x{height} needs {len(blocks)} blocks, "
            f"found {len(block_dirs)}"
        )
    maps: list[ImportanceMap] = []
    bundle = None
    choice = None
    for block, block_dir in zip(blocks, block_dirs):
        block_image = None
        if image is not None:
            block_image = image[block.y : block.bottom, block.x : block.right]
        inputs = _load_pair_inputs(block_dir, config.method, block_image)
        man = inputs.bundle.manifest
        if (man.image_width, man.image_height) != (block.w, block.h):
            raise BlockMapMismatch(
                f"pair {pair.pair_id}: block {block_dir.name} manifest is "
                f"{man.image_width}x{man.image_height}, tiling expects {block.w}x{block.h}"
            )
        if bundle is None:
            bundle = inputs.bundle
            choice = resolve_layer_choice(
                man.model_id, config.llm_layer, config.connector_layer, config.average
            )
        block_map = compute_importance(inputs, config.method, choice, config.eps)
        maps.append(dataclasses.replace(block_map, origin=(float(block.x), float(block.y))))
    stitched = cropper.stitch_maps(blocks, maps)
    return stitched, bundle, choice


def _needs_tiling(pair: PairDir, config: JobConfig, image: np.ndarray | None) -> bool:
    if not config.high_res:
        return False
    width, height = _image_dims(pair, config, image)
    return max(width, height) > config.high_res_limit


def importance_for_pair(pair: PairDir, config: JobConfig, image: np.ndarray | None = None):
    """(ImportanceMap, reference bundle, LayerChoice) for one pair."""
    if config.method == "human_crop":
        raise ConfigError("human_crop does not build an importance map")
    if _needs_tiling(pair, config, image):
        return _tiled_importance(pair, config, image)
    return _single_importance(pair, config, image)


def _load_image_if_needed(pair: PairDir, config: JobConfig) -> np.ndarray | None:
    # pixels are needed for the edge mask and for saving crop files
    if config.method == "pure_grad" or config.crops_dir is not None:
        return _load_image(pair, config)
    return None


def crop_pair(pair: PairDir, config: JobConfig) -> EvalRecord:
    """Build the crop directive (and optional crop image) for one pair."""
    image = _load_image_if_needed(pair, config)
    gt_bbox = _meta_bbox(pair)

    if config.method == "human_crop":
        if gt_bbox is None:
            raise MissingTensor(f"pair {pair.pair_id}: human_crop needs gt_bbox in pair.json")
        width, height = _image_dims(pair, config, image)
        qdir = _question_bundle_dir(pair)
        bundle = load_bundle(qdir) if (qdir / "manifest.json").is_file() else None
        res = _resolve_input_res(config, pair, bundle)
        window = cropper.expand_to_square(gt_bbox, width, height)
        directive = CropDirective(window=window, method="human_crop", layer=None, resize_to=res)
    else:
        importance, bundle, choice = importance_for_pair(pair, config, image)
        width, height = _image_dims(pair, config, image)
        res = _resolve_input_res(config, pair, bundle)
        bbox = cropper.select_bbox(importance, width, height, res, config.multipliers)
        window = cropper.expand_to_square(bbox, width, height)
        directive = CropDirective(window=window, method=config.method, layer=choice, resize_to=res)

    if config.crops_dir is not None and image is not None:
        config.crops_dir.mkdir(parents=True, exist_ok=True)
        crop = cropper.crop_and_resize(image, directive.window, directive.resize_to)
        pixels = np.clip(np.floor(crop + 0.5), 0, 255).astype(np.uint8)
        Image.fromarray(pixels).save(config.crops_dir / f"{pair.pair_id}.png")

    partition = None
    if gt_bbox is not None:
        width, height = _image_dims(pair, config, image)
        partition = analysis.size_partition(gt_bbox, width, height)

    return EvalRecord(
        question_id=str(pair.meta["question_id"]),
        image_id=str(pair.meta["image_id"]),
        question=str(pair.meta["question"]),
        gt_answers=[str(a) for a in pair.meta.get("gt_answers", [])],
        gt_bbox=gt_bbox,
        partition=partition,
        crop=directive,
    )


def _failure(pair_id: str, exc: Exception) -> RecordFailure:
    return RecordFailure(pair_id=pair_id, error=type(exc).__name__, message=str(exc))


def _run_pairs(
    pairs: list[PairDir],
    worker: Callable[[PairDir], EvalRecord],
    workers: int,
) -> RunResult:
    """Apply worker to pairs, isolating failures, preserving input order."""

    def safe(pair: PairDir):
        try:
            return worker(pair), None
        except (AttncropError, OSError, ValueError, TypeError, KeyError) as exc:
            return None, _failure(pair.pair_id, exc)

    result = RunResult()
    if workers <= 1:
        outcomes = [safe(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(safe, pairs))
    for record, failure in outcomes:
        if failure is not None:
            result.failures.append(failure)
        else:
            result.records.append(record)
    return result


def _write_outputs(result: RunResult, records_out: Path) -> None:
    write_records(result.records, records_out)
    errors_path = records_out.with_name(records_out.name + ".errors.json")
    errors_path.write_text(
        json.dumps([f.to_json_dict() for f in result.failures], ensure_ascii=False, indent=2)
        + "\n",
        encoding="utf-8",
    )


def run_crop(config: JobConfig) -> RunResult:
    config.validate()
    if config.records_out is None:
        raise ConfigError("crop needs --records-out")
    pairs = discover_pairs(config.bundles_dir)
    result = _run_pairs(pairs, lambda p: crop_pair(p, config), config.workers)
    _write_outputs(result, config.records_out)
    return result


def _effective_prediction(record: EvalRecord) -> str | None:
    if record.prediction_cropped is not None and record.prediction_cropped != "":
        return record.prediction_cropped
    if record.prediction != "":
        return record.prediction
    return None


def run_eval(config: JobConfig) -> RunResult:
    """Score records (cropped prediction preferred) and emit summary tables."""
    config.validate()
    if config.records_in is None or config.records_out is None:
        raise ConfigError("eval needs --records-in and --records-out")
    if not Path(config.records_in).is_file():
        raise ConfigError(f"records file not found: {config.records_in}")
    result = RunResult()
    by_method: dict[str, list[float]] = {}
    by_partition: dict[str, list[float]] = {}
    for record in read_records(config.records_in):
        prediction = _effective_prediction(record)
        if prediction is None:
            result.failures.append(
                _failure(record.question_id, MissingPredictions("record has no prediction"))
            )
            continue
        try:
            if config.metric == "vqa":
                score = analysis.vqa_score(prediction, record.gt_answers)
            else:
                if not record.gt_answers:
                    raise ValueError("record has no gt_answers")
                score = float(analysis.exact_match(prediction, record.gt_answers[0]))
        except (ValueError, AttncropError) as exc:
            result.failures.append(_failure(record.question_id, exc))
            continue
        record.score = score
        result.records.append(record)
        method = record.crop.method if record.crop is not None else "uncropped"
        by_method.setdefault(method, []).append(score)
        if record.partition is not None:
            by_partition.setdefault(record.partition, []).append(score)

    _write_outputs(result, config.records_out)
    method_summary = analysis.summarize_scores(by_method)
    partition_summary = analysis.summarize_scores(by_partition)
    summary = {
        "metric": config.metric,
        "overall": method_summary["overall"],
        "by_method": method_summary["groups"],
        "by_partition": partition_summary["groups"],
    }
    base = config.records_out
    base.with_name(base.name + ".summary.json").write_text(
        json.dumps(summary, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    _write_eval_csv(summary, base.with_name(base.name + ".summary.csv"))
    if config.plot is not None:
        analysis.plot_partition_bars(
            {"groups": summary["by_partition"] or summary["by_method"]}, config.plot
        )
    return result


def _write_eval_csv(summary: dict, path: Path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scope", "group", "mean", "ci95_half_width", "n"])
        if summary["overall"] is not None:
            o = summary["overall"]
            writer.writerow(["overall", "", o["mean"], o["ci95_half_width"], o["n"]])
        for scope_name, key in (("method", "by_method"), ("partition", "by_partition")):
            for group, row in summary[key].items():
                writer.writerow([scope_name, group, row["mean"], row["ci95_half_width"], row["n"]])


def _correctness_lookup(config: JobConfig) -> dict[str, bool]:
    """question_id -> correct flag from a scored/predicted records file."""
    flags: dict[str, bool] = {}
    if config.records_in is None:
        return flags
    if not Path(config.records_in).is_file():
        raise ConfigError(f"records file not found: {config.records_in}")
    for record in read_records(config.records_in):
        if record.score is not None:
            flags[record.question_id] = record.score > 0
            continue
        prediction = _effective_prediction(record)
        if prediction is not None and record.gt_answers:
            flags[record.question_id] = analysis.vqa_score(prediction, record.gt_answers) > 0
    return flags


def run_ratio(config: JobConfig) -> RunResult:
    """Per-layer attention-ratio table over all pairs with ground-truth boxes."""
    config.validate()
    if config.records_out is None:
        raise ConfigError("ratio needs --records-out (table path)")
    pairs = discover_pairs(config.bundles_dir)
    flags = _correctness_lookup(config)

    def one(pair: PairDir) -> tuple[str, np.ndarray, BBox, tuple[int, int], int]:
        gt_bbox = _meta_bbox(pair)
        if gt_bbox is None:
            raise MissingTensor(f"pair {pair.pair_id}: ratio needs gt_bbox in pair.json")
        question = load_bundle(_question_bundle_dir(pair))
        generic_dir = pair.root / "generic"
        if not (generic_dir / "manifest.json").is_file():
            raise MissingGenericBundle(f"pair {pair.pair_id}: no generic bundle")
        generic = load_bundle(generic_dir)
        maps = attention.relative_layer_maps(question, generic, config.eps)
        man = question.manifest
        qid = str(pair.meta["question_id"])
        return qid, maps, gt_bbox, (man.image_width, man.image_height), man.L

    result = RunResult()
    outcomes: list[tuple[str, np.ndarray, BBox, tuple[int, int], int] | None] = []

    def safe(pair: PairDir):
        try:
            return one(pair), None
        except (AttncropError, OSError, ValueError, KeyError) as exc:
            return None, _failure(pair.pair_id, exc)

    if config.workers <= 1:
        raw = [safe(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            raw = list(pool.map(safe, pairs))
    for value, failure in raw:
        if failure is not None:
            result.failures.append(failure)
        else:
            outcomes.append(value)

    num_llm_layers = outcomes[0][4] if outcomes else 0
    ratios_by_layer: dict[tuple[int, int], list[float]] = {}
    correct_by_layer: dict[tuple[int, int], list[bool]] = {}
    for qid, maps, gt_bbox, (width, height), L in outcomes:
        if L != num_llm_layers or maps.shape[:2] != outcomes[0][1].shape[:2]:
            result.failures.append(
                _failure(qid, BlockMapMismatch("bundle layer geometry differs across pairs"))
            )
            continue
        n = maps.shape[-1]
        for m in range(maps.shape[0]):
            for k in range(maps.shape[1]):
                importance = ImportanceMap(
                    values=maps[m, k],
                    patch_width=width / n,
                    patch_height=height / n,
                    source_method="rel_att",
                )
                value = analysis.attention_ratio(importance, gt_bbox, width, height)
                ratios_by_layer.setdefault((m, k), []).append(value)
                if qid in flags:
                    correct_by_layer.setdefault((m, k), []).append(flags[qid])
    for key, values in correct_by_layer.items():
        if len(values) != len(ratios_by_layer[key]):
            # only keep the split when every kept pair has a flag
            correct_by_layer[key] = []

    stats = analysis.ratio_stats(ratios_by_layer, correct_by_layer, num_llm_layers)
    json_path = config.records_out
    csv_path = json_path.with_suffix(".csv") if json_path.suffix else json_path.with_name(json_path.name + ".csv")
    analysis.write_ratio_tables(stats, json_path, csv_path)
    if config.plot is not None:
        analysis.plot_ratio_curves(stats, config.plot)
    return result


def run_partition(config: JobConfig) -> RunResult:
    """Attach size partitions to records and emit the partition table."""
    config.validate()
    if config.records_in is None or config.records_out is None:
        raise ConfigError("partition needs --records-in and --records-out")
    if not Path(config.records_in).is_file():
        raise ConfigError(f"records file not found: {config.records_in}")
    dims_by_pair: dict[str, tuple[int, int]] = {}
    if config.bundles_dir is not None and Path(config.bundles_dir).is_dir():
        for pair in discover_pairs(config.bundles_dir):
            try:
                dims_by_pair[str(pair.meta["question_id"])] = _image_dims(pair, config, None)
            except (AttncropError, OSError):
                continue

    result = RunResult()
    counts = {name: 0 for name in analysis.PARTITIONS}
    scores_by_partition: dict[str, list[float]] = {}
    for record in read_records(config.records_in):
        if record.gt_bbox is None:
            result.records.append(record)
            continue
        dims = dims_by_pair.get(record.question_id)
        if dims is None:
            result.failures.append(
                _failure(
                    record.question_id,
                    ConfigError("image size unknown (pair not found in bundles dir)"),
                )
            )
            continue
        try:
            record.partition = analysis.size_partition(record.gt_bbox, dims[0], dims[1])
        except AttncropError as exc:
            result.failures.append(_failure(record.question_id, exc))
            continue
        counts[record.partition] += 1
        if record.score is not None:
            scores_by_partition.setdefault(record.partition, []).append(record.score)
        result.records.append(record)

    _write_outputs(result, config.records_out)
    summary: dict[str, Any] = {"counts": counts}
    if scores_by_partition:
        table = analysis.summarize_scores(scores_by_partition)
        summary["groups"] = table["groups"]
        summary["overall"] = table["overall"]
    base = config.records_out
    base.with_name(base.name + ".summary.json").write_text(
        json.dumps(summary, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    if config.plot is not None and scores_by_partition:
        analysis.plot_partition_bars({"groups": summary["groups"]}, config.plot)
    return result
