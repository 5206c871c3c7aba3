"""Shared value types: boxes, layer choices, importance maps, crop directives,
and the per-question evaluation record that flows through the JSONL files.

These are plain dataclasses with no behaviour beyond validation and JSON
(de)serialization, kept in one bottom-level module so the operation modules
can all import them without cycles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DegenerateBBox

# Methods that may appear in records and CLI arguments. These strings are
# part of the on-disk record contract, do not rename them.
METHODS = ("rel_att", "grad_att", "pure_grad", "human_crop")

LAYER_MODES = ("selected", "averaged")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, top-left corner (x, y), size (w, h)."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)):
                raise TypeError(f"BBox.{name} must be an integer, got {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise DegenerateBBox(f"box size must be positive, got {self.w}x{self.h}")

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.right <= width and self.bottom <= height

    def as_list(self) -> list[int]:
        return [int(self.x), int(self.y), int(self.w), int(self.h)]

    @classmethod
    def from_list(cls, xywh: Any) -> "BBox":
        if not isinstance(xywh, (list, tuple)) or len(xywh) != 4:
            raise ValueError(f"expected [x, y, w, h], got {xywh!r}")
        return cls(int(xywh[0]), int(xywh[1]), int(xywh[2]), int(xywh[3]))


@dataclass(frozen=True)
class LayerChoice:
    """Which LLM layer m and connector layer k feed the importance map.

    mode="averaged" ignores (m, k) and averages over every layer pair.
    """

    m: int = 0
    k: int = 0
    mode: str = "selected"

    def __post_init__(self) -> None:
        if self.mode not in LAYER_MODES:
            raise ValueError(f"mode must be one of {LAYER_MODES}, got {self.mode!r}")
        if self.m < 0 or self.k < 0:
            raise ValueError(f"layer indices must be >= 0, got m={self.m} k={self.k}")

    def to_json_dict(self) -> dict[str, Any]:
        return {"m": self.m, "k": self.k, "mode": self.mode}

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "LayerChoice":
        return cls(m=int(d.get("m", 0)), k=int(d.get("k", 0)), mode=str(d.get("mode", "selected")))


AVERAGED = LayerChoice(mode="averaged")


@dataclass(frozen=True)
class ImportanceMap:
    """Non-negative score grid over image patches.

    values[i, j] scores the cell whose top-left pixel corner is at
    origin + (j * patch_width, i * patch_height). patch sizes are floats:
    attention grids cover the image exactly (patch = dim / N) which is
    usually fractional in pixels.
    """

    values: np.ndarray
    patch_width: float
    patch_height: float
    origin: tuple[float, float] = (0.0, 0.0)
    source_method: str = "raw_a_si"

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError(f"values must be a non-empty 2-D grid, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        if v.min() < 0:
            raise ValueError("importance values must be >= 0")
        if not (self.patch_width > 0 and self.patch_height > 0):
            raise ValueError("patch sizes must be positive")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CropDirective:
    """A square crop window plus the provenance needed to reproduce it."""

    window: BBox
    method: str
    layer: LayerChoice | None
    resize_to: int

    def __post_init__(self) -> None:
        if self.window.w != self.window.h:
            raise ValueError(f"crop window must be square, got {self.window.w}x{self.window.h}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.resize_to <= 0:
            raise ValueError(f"resize_to must be positive, got {self.resize_to}")

    def to_json_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "x": self.window.x,
            "y": self.window.y,
            "w": self.window.w,
            "h": self.window.h,
            "method": self.method,
            "layer": self.layer.to_json_dict() if self.layer is not None else None,
        }
        return d

    @classmethod
    def from_json_dict(cls, d: dict[str, Any], resize_to: int = 1) -> "CropDirective":
        layer = d.get("layer")
        return cls(
            window=BBox(int(d["x"]), int(d["y"]), int(d["w"]), int(d["h"])),
            method=str(d["method"]),
            layer=LayerChoice.from_json_dict(layer) if layer else None,
            resize_to=resize_to,
        )


# Key order of the JSONL record schema. Optional keys are omitted when unset.
_RECORD_KEYS = (
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
)


@dataclass
class EvalRecord:
    """One question/image pair as it moves through crop -> answer -> score."""

    question_id: str
    image_id: str
    question: str
    gt_answers: list[str] = field(default_factory=list)
    gt_bbox: BBox | None = None
    prediction: str = ""
    prediction_cropped: str | None = None
    partition: str | None = None
    score: float | None = None
    crop: CropDirective | None = None

    def to_json_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "question_id": self.question_id,
            "image_id": self.image_id,
            "question": self.question,
            "gt_answers": list(self.gt_answers),
            "prediction": self.prediction,
        }
        if self.gt_bbox is not None:
            d["gt_bbox"] = self.gt_bbox.as_list()
        if self.prediction_cropped is not None:
            d["prediction_cropped"] = self.prediction_cropped
        if self.partition is not None:
            d["partition"] = self.partition
        if self.score is not None:
            d["score"] = self.score
        if self.crop is not None:
            d["crop"] = self.crop.to_json_dict()
        # fixed key order keeps serialized records byte-stable
        return {k: d[k] for k in _RECORD_KEYS if k in d}

    @classmethod
    def from_json_dict(cls, d: dict[str, Any], resize_to: int = 1) -> "EvalRecord":
        crop = d.get("crop")
        bbox = d.get("gt_bbox")
        return cls(
            question_id=str(d["question_id"]),
            image_id=str(d["image_id"]),
            question=str(d["question"]),
            gt_answers=[str(a) for a in d.get("gt_answers", [])],
            gt_bbox=BBox.from_list(bbox) if bbox is not None else None,
            prediction=str(d.get("prediction", "")),
            prediction_cropped=(
                str(d["prediction_cropped"]) if d.get("prediction_cropped") is not None else None
            ),
            partition=str(d["partition"]) if d.get("partition") is not None else None,
            score=float(d["score"]) if d.get("score") is not None else None,
            crop=CropDirective.from_json_dict(crop, resize_to=resize_to) if crop else None,
        )
