"""On-disk exchange format for model internals, plus the JSONL record files.

A bundle is one directory holding ``manifest.json`` and one raw tensor file
per exported role. Tensor files are headerless little-endian IEEE-754
binary32, row-major (C order); the manifest carries every shape.

Manifest keys (all required)::

    model_id                str, e.g. "llava-1.5-7b"
    L                       int, LLM layer count (>= 1)
    H                       int, LLM head count (>= 1)
    Lc                      int, connector layer count (0 = identity connector)
    Hc                      int, connector head count (>= 1 when Lc > 0)
    T                       int, LLM-side image token count (>= 1)
    N                       int, image patch grid is N x N (>= 1)
    input_resolution        int, model input side in pixels (>= 1)
    image_width             int, original image width (>= 1)
    image_height            int, original image height (>= 1)
    question                str, prompt text the run answered
    is_generic_instruction  bool, true when the prompt was the generic one
    tensors                 list of {role, shape, path}

Tensor roles and their required shapes::

    ans_attn        [L, H, T]          mandatory; answer-token attention over
                                       image tokens at the answer position
    ans_attn_grad   [L, H, T]          d(answer logit)/d(ans_attn)
    conn_attn       [Lc, Hc, T, N*N]   connector cross-attention (Lc > 0 only)
    conn_attn_grad  [Lc, Hc, T, N*N]
    input_grad      [3, image_height, image_width]

Attention tensors must be non-negative (float32 export noise down to -1e-6
is clamped to zero) and each attended row must carry mass <= 1 + 1e-3.
Gradient tensors are unconstrained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from .datatypes import EvalRecord
from .errors import (
    InvalidBundle,
    InvalidManifest,
    MissingMandatoryRole,
    MissingManifest,
    NegativeAttention,
    ShapeMismatch,
)

MANIFEST_NAME = "manifest.json"

ROLE_ANS_ATTN = "ans_attn"
ROLE_ANS_ATTN_GRAD = "ans_attn_grad"
ROLE_CONN_ATTN = "conn_attn"
ROLE_CONN_ATTN_GRAD = "conn_attn_grad"
ROLE_INPUT_GRAD = "input_grad"

ROLES = (
    ROLE_ANS_ATTN,
    ROLE_ANS_ATTN_GRAD,
    ROLE_CONN_ATTN,
    ROLE_CONN_ATTN_GRAD,
    ROLE_INPUT_GRAD,
)

# float32 export noise tolerated on attention tensors before clamping
NEGATIVE_NOISE_FLOOR = -1e-6
# slack on "attention rows sum to at most one"
ROW_MASS_SLACK = 1e-3

_MANIFEST_KEYS = (
    "model_id",
    "L",
    "H",
    "Lc",
    "Hc",
    "T",
    "N",
    "input_resolution",
    "image_width",
    "image_height",
    "question",
    "is_generic_instruction",
    "tensors",
)


@dataclass(frozen=True)
class TensorSpec:
    role: str
    shape: tuple[int, ...]
    path: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise InvalidManifest(f"unknown tensor role {self.role!r}")
        if not self.shape or any((not isinstance(s, int)) or s <= 0 for s in self.shape):
            raise InvalidManifest(f"tensor {self.role!r} has invalid shape {self.shape!r}")
        if not self.path or Path(self.path).is_absolute() or ".." in Path(self.path).parts:
            raise InvalidManifest(f"tensor path must be relative, got {self.path!r}")


@dataclass(frozen=True)
class RunManifest:
    """Parsed manifest.json. Field names equal the JSON keys."""

    model_id: str
    L: int
    H: int
    Lc: int
    Hc: int
    T: int
    N: int
    input_resolution: int
    image_width: int
    image_height: int
    question: str
    is_generic_instruction: bool
    tensors: tuple[TensorSpec, ...]

    def __post_init__(self) -> None:
        positive = ("L", "H", "T", "N", "input_resolution", "image_width", "image_height")
        for name in positive:
            if getattr(self, name) < 1:
                raise InvalidManifest(f"manifest {name} must be >= 1, got {getattr(self, name)}")
        if self.Lc < 0:
            raise InvalidManifest(f"manifest Lc must be >= 0, got {self.Lc}")
        if self.Lc > 0 and self.Hc < 1:
            raise InvalidManifest(f"manifest Hc must be >= 1 when Lc > 0, got {self.Hc}")
        if self.Lc == 0 and self.Hc != 0:
            raise InvalidManifest(f"manifest Hc must be 0 when Lc == 0, got {self.Hc}")
        roles = [t.role for t in self.tensors]
        if len(set(roles)) != len(roles):
            raise InvalidManifest(f"duplicate tensor roles in manifest: {roles}")
        for spec in self.tensors:
            expected = self.expected_shape(spec.role)
            if spec.role in (ROLE_CONN_ATTN, ROLE_CONN_ATTN_GRAD) and self.Lc == 0:
                raise InvalidManifest(f"{spec.role} declared but Lc == 0 (identity connector)")
            if tuple(spec.shape) != expected:
                raise ShapeMismatch(
                    f"{spec.role}: manifest shape {list(spec.shape)} != required {list(expected)}"
                )

    def expected_shape(self, role: str) -> tuple[int, ...]:
        if role in (ROLE_ANS_ATTN, ROLE_ANS_ATTN_GRAD):
            return (self.L, self.H, self.T)
        if role in (ROLE_CONN_ATTN, ROLE_CONN_ATTN_GRAD):
            return (self.Lc, self.Hc, self.T, self.N * self.N)
        if role == ROLE_INPUT_GRAD:
            return (3, self.image_height, self.image_width)
        raise InvalidManifest(f"unknown tensor role {role!r}")

    @property
    def identity_connector(self) -> bool:
        return self.Lc == 0

    def to_json_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "model_id": self.model_id,
            "L": self.L,
            "H": self.H,
            "Lc": self.Lc,
            "Hc": self.Hc,
            "T": self.T,
            "N": self.N,
            "input_resolution": self.input_resolution,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "question": self.question,
            "is_generic_instruction": self.is_generic_instruction,
            "tensors": [
                {"role": t.role, "shape": list(t.shape), "path": t.path} for t in self.tensors
            ],
        }
        return d

    @classmethod
    def from_json_dict(cls, d: Any) -> "RunManifest":
        if not isinstance(d, dict):
            raise InvalidManifest(f"manifest must be a JSON object, got {type(d).__name__}")
        missing = [k for k in _MANIFEST_KEYS if k not in d]
        if missing:
            raise InvalidManifest(f"manifest missing keys: {missing}")
        ints = ("L", "H", "Lc", "Hc", "T", "N", "input_resolution", "image_width", "image_height")
        for k in ints:
            if not isinstance(d[k], int) or isinstance(d[k], bool):
                raise InvalidManifest(f"manifest {k} must be an integer, got {d[k]!r}")
        if not isinstance(d["model_id"], str) or not isinstance(d["question"], str):
            raise InvalidManifest("manifest model_id and question must be strings")
        if not isinstance(d["is_generic_instruction"], bool):
            raise InvalidManifest("manifest is_generic_instruction must be a boolean")
        if not isinstance(d["tensors"], list):
            raise InvalidManifest("manifest tensors must be a list")
        specs = []
        for entry in d["tensors"]:
            if not isinstance(entry, dict) or not {"role", "shape", "path"} <= set(entry):
                raise InvalidManifest(f"bad tensor entry {entry!r}")
            shape = entry["shape"]
            if not isinstance(shape, list):
                raise InvalidManifest(f"tensor shape must be a list, got {shape!r}")
            specs.append(TensorSpec(role=str(entry["role"]), shape=tuple(shape), path=str(entry["path"])))
        return cls(
            model_id=d["model_id"],
            L=d["L"],
            H=d["H"],
            Lc=d["Lc"],
            Hc=d["Hc"],
            T=d["T"],
            N=d["N"],
            input_resolution=d["input_resolution"],
            image_width=d["image_width"],
            image_height=d["image_height"],
            question=d["question"],
            is_generic_instruction=d["is_generic_instruction"],
            tensors=tuple(specs),
        )


def build_manifest(
    model_id: str,
    *,
    L: int,
    H: int,
    Lc: int,
    Hc: int,
    T: int,
    N: int,
    input_resolution: int,
    image_width: int,
    image_height: int,
    question: str,
    is_generic_instruction: bool,
    roles: Iterable[str],
) -> RunManifest:
    """Manifest with one TensorSpec per role, paths defaulting to <role>.bin."""
    dims = dict(
        model_id=model_id,
        L=L,
        H=H,
        Lc=Lc,
        Hc=Hc,
        T=T,
        N=N,
        input_resolution=input_resolution,
        image_width=image_width,
        image_height=image_height,
        question=question,
        is_generic_instruction=is_generic_instruction,
    )
    probe = RunManifest(tensors=(), **dims)
    specs = tuple(
        TensorSpec(role=role, shape=probe.expected_shape(role), path=f"{role}.bin")
        for role in roles
    )
    return RunManifest(tensors=specs, **dims)


@dataclass(frozen=True)
class AttentionBundle:
    """One exported run: manifest plus decoded tensors (float32, read-only)."""

    manifest: RunManifest
    ans_attn: np.ndarray
    ans_attn_grad: np.ndarray | None = None
    conn_attn: np.ndarray | None = None
    conn_attn_grad: np.ndarray | None = None
    input_grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        for role in ROLES:
            arr = getattr(self, role)
            if arr is None:
                continue
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            expected = self.manifest.expected_shape(role)
            if arr.shape != expected:
                raise ShapeMismatch(f"{role}: array shape {arr.shape} != required {expected}")
            arr.setflags(write=False)
            object.__setattr__(self, role, arr)

    @property
    def identity_connector(self) -> bool:
        return self.manifest.identity_connector

    def tensor(self, role: str) -> np.ndarray | None:
        return getattr(self, role)


def _validate_attention(role: str, arr: np.ndarray) -> np.ndarray:
    """Clamp export noise, reject real negatives and over-unit row mass."""
    lo = float(arr.min())
    if lo < NEGATIVE_NOISE_FLOOR:
        raise NegativeAttention(f"{role}: minimum value {lo} below {NEGATIVE_NOISE_FLOOR}")
    if lo < 0.0:
        arr = np.maximum(arr, np.float32(0.0))
    mass = arr.sum(axis=-1, dtype=np.float64)
    hi = float(mass.max()) if mass.size else 0.0
    if hi > 1.0 + ROW_MASS_SLACK:
        raise InvalidBundle(f"{role}: attended row mass {hi} exceeds 1 + {ROW_MASS_SLACK}")
    return arr


def load_bundle(bundle_dir: str | Path) -> AttentionBundle:
    """Read and validate one bundle directory.

    Raises MissingManifest, InvalidManifest, ShapeMismatch,
    MissingMandatoryRole, NegativeAttention, or InvalidBundle.
    """
    d = Path(bundle_dir)
    manifest_path = d / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingManifest(f"no {MANIFEST_NAME} in {d}")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidManifest(f"unreadable manifest in {d}: {exc}") from exc
    manifest = RunManifest.from_json_dict(raw)

    arrays: dict[str, np.ndarray] = {}
    for spec in manifest.tensors:
        path = d / spec.path
        if not path.is_file():
            raise ShapeMismatch(f"{spec.role}: tensor file {spec.path} missing in {d}")
        expected_bytes = int(np.prod(spec.shape)) * 4
        actual_bytes = path.stat().st_size
        if actual_bytes != expected_bytes:
            raise ShapeMismatch(
                f"{spec.role}: file {spec.path} holds {actual_bytes} bytes, "
                f"shape {list(spec.shape)} requires {expected_bytes}"
            )
        flat = np.fromfile(path, dtype="<f4")
        arr = flat.reshape(spec.shape)
        if not np.all(np.isfinite(arr)):
            raise InvalidBundle(f"{spec.role}: non-finite values in {spec.path}")
        if spec.role in (ROLE_ANS_ATTN, ROLE_CONN_ATTN):
            arr = _validate_attention(spec.role, arr)
        arrays[spec.role] = arr

    if ROLE_ANS_ATTN not in arrays:
        raise MissingMandatoryRole(f"bundle {d} lacks mandatory role {ROLE_ANS_ATTN!r}")
    return AttentionBundle(manifest=manifest, **arrays)


def write_bundle(bundle: AttentionBundle, bundle_dir: str | Path) -> Path:
    """Serialize a bundle; inverse of load_bundle for valid bundles."""
    d = Path(bundle_dir)
    d.mkdir(parents=True, exist_ok=True)
    for spec in bundle.manifest.tensors:
        arr = bundle.tensor(spec.role)
        if arr is None:
            raise MissingMandatoryRole(f"manifest declares {spec.role!r} but bundle has no array")
        out = d / spec.path
        out.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(arr, dtype="<f4").tofile(out)
    manifest_path = d / MANIFEST_NAME
    manifest_path.write_text(
        json.dumps(bundle.manifest.to_json_dict(), ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )
    return d


# record files ---------------------------------------------------------------


def dumps_record(record: EvalRecord) -> str:
    return json.dumps(record.to_json_dict(), ensure_ascii=False, separators=(",", ":"))


def write_records(records: Iterable[EvalRecord], path: str | Path) -> Path:
    """Write records as JSONL (UTF-8, LF, schema key order, no timestamps)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")
    return p


def read_records(path: str | Path) -> Iterator[EvalRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield EvalRecord.from_json_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise InvalidBundle(f"{path}:{lineno}: bad record: {exc}") from exc
