"""Command-line interface.

Four subcommands: crop (build crop directives from bundles), eval (score
predicted records), ratio (per-layer attention-ratio tables), partition
(attach size partitions to records).

Configuration may come from a JSON file whose keys mirror JobConfig
(--config, or the ATTNCROP_CONFIG environment variable); explicit flags
override file values. Exit codes: 0 all records processed, 1 some records
failed (see <records_out>.errors.json), 2 invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import pipeline
from .cropper import DEFAULT_MULTIPLIERS, HIGH_RES_BLOCK_LIMIT
from .datatypes import METHODS
from .errors import AttncropError, ConfigError

CONFIG_ENV_VAR = "ATTNCROP_CONFIG"

log = logging.getLogger("attncrop")


def _parse_multipliers(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad multiplier list {text!r}: {exc}") from exc
    if not values:
        raise argparse.ArgumentTypeError("multiplier list is empty")
    return values


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help=f"JSON config file (default: ${CONFIG_ENV_VAR})")
    parser.add_argument("--bundles-dir", type=Path, default=None,
                        help="directory of pair directories")
    parser.add_argument("--images-dir", type=Path, default=None,
                        help="base directory for image paths in pair.json")
    parser.add_argument("--records-in", type=Path, default=None,
                        help="input records JSONL")
    parser.add_argument("--records-out", type=Path, default=None,
                        help="output path (records JSONL, or table JSON for ratio)")
    parser.add_argument("--workers", type=int, default=None,
                        help="worker threads (default 1)")
    parser.add_argument("--plot", type=Path, default=None,
                        help="optional SVG plot output path")


def _add_method_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", choices=METHODS, default=None,
                        help="importance method (default rel_att)")
    parser.add_argument("--llm-layer", type=int, default=None, dest="llm_layer",
                        help="LLM layer index m (default: model family default)")
    parser.add_argument("--connector-layer", type=int, default=None, dest="connector_layer",
                        help="connector layer index k (default 0)")
    parser.add_argument("--average", action=argparse.BooleanOptionalAction, default=None,
                        help="average maps over all layer pairs")
    parser.add_argument("--eps", type=float, default=None,
                        help="denominator floor for relative attention (default 1e-8)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attncrop",
        description="Question-guided visual cropping from exported model attention",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    crop = sub.add_parser("crop", help="compute crop directives for every pair")
    _add_common(crop)
    _add_method_flags(crop)
    crop.add_argument("--multipliers", type=_parse_multipliers, default=None,
                      help=f"window size multipliers (default {','.join(str(a) for a in DEFAULT_MULTIPLIERS)})")
    crop.add_argument("--input-res", type=int, default=None, dest="input_res",
                      help="model input resolution (default: bundle manifest)")
    crop.add_argument("--high-res", action=argparse.BooleanOptionalAction, default=None,
                      dest="high_res", help="tile oversized images into blocks")
    crop.add_argument("--high-res-limit", type=int, default=None, dest="high_res_limit",
                      help=f"block side limit in pixels (default {HIGH_RES_BLOCK_LIMIT})")
    crop.add_argument("--crops-dir", type=Path, default=None, dest="crops_dir",
                      help="also write cropped images here as PNG")

    evaluate = sub.add_parser("eval", help="score records that carry predictions")
    _add_common(evaluate)
    evaluate.add_argument("--metric", choices=pipeline.METRICS, default=None,
                          help="vqa (min(matches/3,1)) or exact (default vqa)")

    ratio = sub.add_parser("ratio", help="per-layer attention-ratio table")
    _add_common(ratio)
    ratio.add_argument("--eps", type=float, default=None,
                       help="denominator floor for relative attention (default 1e-8)")

    partition = sub.add_parser("partition", help="attach size partitions to records")
    _add_common(partition)
    return parser


_RUNNERS = {
    "crop": pipeline.run_crop,
    "eval": pipeline.run_eval,
    "ratio": pipeline.run_ratio,
    "partition": pipeline.run_partition,
}


def _load_config_file(path: Path | None) -> dict[str, Any]:
    if path is None:
        env = os.environ.get(CONFIG_ENV_VAR)
        if not env:
            return {}
        path = Path(env)
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _build_config(args: argparse.Namespace) -> pipeline.JobConfig:
    data = _load_config_file(args.config)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        data[key] = value
    try:
        return pipeline.JobConfig.from_dict(data).validate()
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _build_config(args)
        result = _RUNNERS[args.command](config)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return 2
    except AttncropError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    for failure in result.failures:
        log.warning("record %s failed: %s: %s", failure.pair_id, failure.error, failure.message)
    log.info(
        "%s: %d records ok, %d failed", args.command, len(result.records), len(result.failures)
    )
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
