"""Input validation helpers shared by the estimator facades and the CLI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import default_layer_choice
from .datatypes import AVERAGED, METHODS, LayerChoice
from .errors import (
    DimensionMismatch,
    MissingGenericBundle,
    MissingGradients,
    MissingTensor,
)
from .exchange import AttentionBundle


@dataclass(frozen=True)
class PairInputs:
    """Everything one question/image pair can offer to a method.

    bundle is the question run; generic is the matching generic-instruction
    run (rel_att only); image is the decoded pixel array (pure_grad only).
    """

    bundle: AttentionBundle
    generic: AttentionBundle | None = None
    image: np.ndarray | None = None


def check_method(method: str) -> str:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    return method


def check_pair(pair: PairInputs, method: str) -> PairInputs:
    """Verify a pair carries what the method needs; raise the specific error."""
    if not isinstance(pair, PairInputs):
        raise TypeError(f"expected PairInputs, got {type(pair).__name__}")
    man = pair.bundle.manifest
    if method == "rel_att":
        if pair.generic is None:
            raise MissingGenericBundle(
                f"rel_att needs a generic-instruction bundle (question {man.question!r})"
            )
    elif method == "grad_att":
        if pair.bundle.ans_attn_grad is None:
            raise MissingGradients("grad_att needs ans_attn_grad in the bundle")
        if not man.identity_connector and pair.bundle.conn_attn_grad is None:
            raise MissingGradients("grad_att needs conn_attn_grad for connector models")
    elif method == "pure_grad":
        if pair.bundle.input_grad is None:
            raise MissingTensor("pure_grad needs the input_grad tensor")
        if pair.image is None:
            raise MissingTensor("pure_grad needs the decoded image pixels")
        if pair.image.shape[:2] != (man.image_height, man.image_width):
            raise DimensionMismatch(
                f"image shape {pair.image.shape[:2]} does not match manifest "
                f"{man.image_height}x{man.image_width}"
            )
    return pair


def as_image_array(image: np.ndarray) -> np.ndarray:
    """Accept [H, W] or [H, W, 3] pixel data, returned as float64."""
    arr = np.asarray(image)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise DimensionMismatch(f"image must be [H, W] or [H, W, 3], got shape {arr.shape}")
    return arr.astype(np.float64)


def resolve_layer_choice(
    model_id: str, llm_layer: int | None, connector_layer: int | None, average: bool
) -> LayerChoice:
    """Turn user-facing layer knobs into a LayerChoice.

    Explicit indices win; otherwise a known model family supplies its
    default, and unknown families fall back to layer averaging.
    """
    if average:
        return AVERAGED
    if llm_layer is not None:
        return LayerChoice(m=llm_layer, k=connector_layer or 0)
    family = default_layer_choice(model_id)
    if family is not None:
        return family
    return AVERAGED
