"""Synthetic bundle and corpus generators shared by the tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from attncrop import AttentionBundle, PairInputs, build_manifest, tile_blocks, write_bundle
from attncrop.datatypes import BBox

GENERIC_QUESTION = "Write a general description of the image."


def rand_attention(rng: np.random.Generator, shape, scale: float = 0.9) -> np.ndarray:
    """Random non-negative rows with mass <= scale over the last axis."""
    a = rng.random(shape, dtype=np.float32) + np.float32(0.01)
    a = a / a.sum(axis=-1, keepdims=True)
    return (a * np.float32(scale)).astype(np.float32)


def make_bundle(
    rng: np.random.Generator,
    *,
    model_id: str = "synthetic-vlm",
    L: int = 2,
    H: int = 2,
    Lc: int = 0,
    Hc: int = 0,
    T: int | None = None,
    N: int = 2,
    input_resolution: int = 16,
    image_width: int = 64,
    image_height: int = 48,
    question: str = "what is shown?",
    generic: bool = False,
    roles: tuple[str, ...] = ("ans_attn",),
) -> AttentionBundle:
    if T is None:
        T = N * N if Lc == 0 else 4
    manifest = build_manifest(
        model_id,
        L=L,
        H=H,
        Lc=Lc,
        Hc=Hc,
        T=T,
        N=N,
        input_resolution=input_resolution,
        image_width=image_width,
        image_height=image_height,
        question=GENERIC_QUESTION if generic else question,
        is_generic_instruction=generic,
        roles=roles,
    )
    arrays = {}
    for role in roles:
        shape = manifest.expected_shape(role)
        if role in ("ans_attn", "conn_attn"):
            arrays[role] = rand_attention(rng, shape)
        else:
            arrays[role] = rng.standard_normal(shape).astype(np.float32)
    return AttentionBundle(manifest=manifest, **arrays)


def make_pair(rng: np.random.Generator, **kwargs) -> tuple[AttentionBundle, AttentionBundle]:
    """Question bundle plus a geometry-matched generic bundle."""
    question = make_bundle(rng, **kwargs)
    generic_kwargs = dict(kwargs)
    generic_kwargs["generic"] = True
    generic = make_bundle(rng, **generic_kwargs)
    return question, generic


def make_pair_inputs(
    rng: np.random.Generator,
    *,
    roles: tuple[str, ...] = ("ans_attn",),
    with_generic: bool = True,
    with_image: bool = False,
    generic_is_flagged: bool = True,
    model_id: str = "synthetic-vlm",
    dims: dict | None = None,
) -> PairInputs:
    """A ready-to-validate PairInputs with optional generic run and pixels."""
    kwargs = dict(dims or {})
    question = make_bundle(rng, model_id=model_id, roles=roles, **kwargs)
    generic = None
    if with_generic:
        generic = make_bundle(
            rng, model_id=model_id, roles=("ans_attn",), generic=generic_is_flagged, **kwargs
        )
    image = None
    if with_image:
        man = question.manifest
        image = rng.integers(0, 256, size=(man.image_height, man.image_width, 3)).astype(
            np.float64
        )
    return PairInputs(bundle=question, generic=generic, image=image)


def random_dims(rng: np.random.Generator, limit: int = 4):
    """Random small bundle dimensions, half identity, half connector."""
    if rng.random() < 0.5:
        n = int(rng.integers(1, 3))  # T = N*N must stay <= limit
        return dict(L=int(rng.integers(1, limit + 1)), H=int(rng.integers(1, limit + 1)),
                    Lc=0, Hc=0, N=n, T=n * n)
    return dict(
        L=int(rng.integers(1, limit + 1)),
        H=int(rng.integers(1, limit + 1)),
        Lc=int(rng.integers(1, limit + 1)),
        Hc=int(rng.integers(1, limit + 1)),
        N=int(rng.integers(1, 3)),
        T=int(rng.integers(1, limit + 1)),
    )


CORPUS_SIZES = ((64, 48), (80, 60), (96, 72), (56, 56))


def build_corpus(root: Path, n_pairs: int = 20, seed: int = 7) -> tuple[Path, Path]:
    """A small but complete corpus: every method can run on every pair.

    Question bundles carry attention, answer gradients, and input
    gradients; generic bundles carry attention; images are written as PNG.
    Ground-truth boxes cycle through the three size partitions.
    """
    rng = np.random.default_rng(seed)
    bundles_dir = root / "bundles"
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_pairs):
        pid = f"pair_{i:03d}"
        width, height = CORPUS_SIZES[i % len(CORPUS_SIZES)]
        question = make_bundle(
            rng,
            N=4,
            T=16,
            L=2,
            H=2,
            image_width=width,
            image_height=height,
            input_resolution=16,
            question=f"what is object {i}?",
            roles=("ans_attn", "ans_attn_grad", "input_grad"),
        )
        # generic bundles only need attention
        generic = make_bundle(
            rng, N=4, T=16, L=2, H=2, image_width=width, image_height=height,
            input_resolution=16, generic=True, roles=("ans_attn",),
        )
        pair_dir = bundles_dir / pid
        write_bundle(question, pair_dir / "question")
        write_bundle(generic, pair_dir / "generic")

        pixels = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
        Image.fromarray(pixels).save(images_dir / f"{pid}.png")

        # cycle small / medium / large boxes
        share = (0.002, 0.02, 0.2)[i % 3]
        bw = max(1, int(round((width * height * share) ** 0.5)))
        bh = max(1, min(height - 1, bw))
        bw = min(bw, width - 1)
        bx = int(rng.integers(0, width - bw))
        by = int(rng.integers(0, height - bh))
        meta = {
            "question_id": f"q{i:03d}",
            "image_id": f"img{i:03d}",
            "question": f"what is object {i}?",
            "gt_answers": [("yes" if i % 2 else "no")] * 10,
            "gt_bbox": [bx, by, bw, bh],
            "image": f"{pid}.png",
            "image_width": width,
            "image_height": height,
        }
        (pair_dir / "pair.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return bundles_dir, images_dir


def build_highres_pair(
    root: Path,
    pid: str = "pair_hr",
    seed: int = 3,
    image_width: int = 2048,
    image_height: int = 1536,
    limit: int = 1024,
    N: int = 4,
    block_levels: list[float] | None = None,
) -> Path:
    """One high-res pair: per-block question/generic bundles, no pixels.

    block_levels optionally pins each block's relative-attention value to
    a constant (question mass fixed, generic mass divided by the level),
    so the stitched map has a known block structure. Power-of-two levels
    survive the float32 round trip exactly.
    """
    rng = np.random.default_rng(seed)
    blocks = tile_blocks(image_width, image_height, limit)
    pair_dir = root / "bundles" / pid
    for idx, block in enumerate(blocks):
        question, generic = make_pair(
            rng,
            N=N,
            T=N * N,
            L=2,
            H=2,
            image_width=block.w,
            image_height=block.h,
            input_resolution=16,
            question="where is the text?",
            roles=("ans_attn",),
        )
        if block_levels is not None:
            base = 0.5 / (N * N)
            flat = np.full(question.ans_attn.shape, np.float32(base), dtype=np.float32)
            question = AttentionBundle(manifest=question.manifest, ans_attn=flat)
            denom = np.full(
                generic.ans_attn.shape, np.float32(base / block_levels[idx]), dtype=np.float32
            )
            generic = AttentionBundle(manifest=generic.manifest, ans_attn=denom)
        block_dir = pair_dir / "blocks" / f"block_{idx:03d}"
        write_bundle(question, block_dir / "question")
        write_bundle(generic, block_dir / "generic")
    meta = {
        "question_id": f"{pid}_q",
        "image_id": f"{pid}_img",
        "question": "where is the text?",
        "gt_answers": ["text"] * 10,
        "image_width": image_width,
        "image_height": image_height,
        "input_resolution": 16,
    }
    (pair_dir / "pair.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return pair_dir


def step_edge_image(height: int = 64, width: int = 64, edge_col: int = 32) -> np.ndarray:
    """Grayscale step edge: zeros left of edge_col, 255 from it on."""
    img = np.zeros((height, width), dtype=np.float64)
    img[:, edge_col:] = 255.0
    return img


def bbox_inside(rng: np.random.Generator, width: int, height: int) -> BBox:
    w = int(rng.integers(1, width + 1))
    h = int(rng.integers(1, height + 1))
    x = int(rng.integers(0, width - w + 1))
    y = int(rng.integers(0, height - h + 1))
    return BBox(x, y, w, h)
