"""Attention-to-image importance maps.

The answer token attends to T image tokens inside the LLM; when the model
has a cross-attention connector, each image token in turn attends to the
N*N image patches. Composing the two hops (or reshaping directly for
identity-connector models, where T == N*N) gives a per-patch importance
grid for any LLM layer m and connector layer k.

Three estimators are built on that grid:

  raw       answer-to-image attention at (m, k)
  rel_att   the same map divided cellwise by the map of a generic
            instruction run on the same image, denominator floored at eps
  grad_att  attention gated by the positive part of its gradient,
            per head, before any averaging

All math is done in float64 regardless of the float32 storage dtype.
"""

from __future__ import annotations

import numpy as np

from .datatypes import AVERAGED, ImportanceMap, LayerChoice
from .exchange import AttentionBundle
from .errors import (
    EmptyHeadAxis,
    GenericFlagMissing,
    GeometryMismatch,
    LayerOutOfRange,
    MissingGenericBundle,
    MissingGradients,
    MissingTensor,
    TokenGridMismatch,
)

DEFAULT_EPS = 1e-8

# Best single layers reported for the two supported model families; used
# when no explicit layer is configured and the model_id matches.
FAMILY_LAYER_CHOICES: dict[str, LayerChoice] = {
    "llava-1.5": LayerChoice(m=14, k=0),
    "instructblip": LayerChoice(m=15, k=2),
}


def default_layer_choice(model_id: str) -> LayerChoice | None:
    """Family default for a model id, or None when the family is unknown."""
    key = model_id.lower()
    for family, choice in FAMILY_LAYER_CHOICES.items():
        if family in key:
            return choice
    return None


def head_average(raw: np.ndarray) -> np.ndarray:
    """Mean over the head axis (axis 1) of a [layers, heads, ...] stack."""
    a = np.asarray(raw)
    if a.ndim < 2:
        raise EmptyHeadAxis(f"need a [layers, heads, ...] array, got shape {a.shape}")
    if a.shape[1] == 0:
        raise EmptyHeadAxis("head axis is empty")
    return a.mean(axis=1, dtype=np.float64)


def _check_layer(choice: LayerChoice, L: int, Lc: int) -> None:
    if choice.mode != "selected":
        return
    if not 0 <= choice.m < L:
        raise LayerOutOfRange(f"m={choice.m} outside [0, {L})")
    k_limit = max(Lc, 1)
    if not 0 <= choice.k < k_limit:
        raise LayerOutOfRange(f"k={choice.k} outside [0, {k_limit})")


def _patch_geometry(bundle: AttentionBundle) -> tuple[float, float]:
    man = bundle.manifest
    return man.image_width / man.N, man.image_height / man.N


def _compose(
    st: np.ndarray,
    ti: np.ndarray | None,
    choice: LayerChoice,
    bundle: AttentionBundle,
    source_method: str,
) -> ImportanceMap:
    """Build the N x N map from head-averaged hops.

    st is [L, T]; ti is [Lc, T, N*N] or None for the identity connector.
    Averaged mode takes the mean over all (m, k) pairs; because the
    composition is bilinear this equals composing the two layer means.
    """
    man = bundle.manifest
    _check_layer(choice, man.L, man.Lc)
    if ti is None:
        if man.T != man.N * man.N:
            raise TokenGridMismatch(
                f"identity connector needs T == N*N, got T={man.T}, N={man.N}"
            )
        vec = st.mean(axis=0) if choice.mode == "averaged" else st[choice.m]
    else:
        if choice.mode == "averaged":
            vec = st.mean(axis=0) @ ti.mean(axis=0)
        else:
            vec = st[choice.m] @ ti[choice.k]
    values = vec.reshape(man.N, man.N)
    pw, ph = _patch_geometry(bundle)
    return ImportanceMap(
        values=values, patch_width=pw, patch_height=ph, source_method=source_method
    )


def _connector_hop(bundle: AttentionBundle, grad_weighted: bool) -> np.ndarray | None:
    """Head-averaged token-to-patch hop, or None for identity connectors."""
    man = bundle.manifest
    if man.identity_connector:
        return None
    if bundle.conn_attn is None:
        raise MissingTensor("bundle declares a connector (Lc > 0) but has no conn_attn")
    if not grad_weighted:
        return head_average(bundle.conn_attn)
    if bundle.conn_attn_grad is None:
        raise MissingGradients("grad-weighted map needs conn_attn_grad")
    gated = bundle.conn_attn.astype(np.float64) * np.maximum(
        bundle.conn_attn_grad.astype(np.float64), 0.0
    )
    return head_average(gated)


def answer_to_image(bundle: AttentionBundle, choice: LayerChoice) -> ImportanceMap:
    """Raw answer-to-patch attention map A_si at the chosen layers."""
    st = head_average(bundle.ans_attn)
    ti = _connector_hop(bundle, grad_weighted=False)
    return _compose(st, ti, choice, bundle, source_method="raw_a_si")


def _check_pair_geometry(question: AttentionBundle, generic: AttentionBundle) -> None:
    q, g = question.manifest, generic.manifest
    for name in ("N", "T", "L", "Lc"):
        if getattr(q, name) != getattr(g, name):
            raise GeometryMismatch(
                f"bundles disagree on {name}: {getattr(q, name)} != {getattr(g, name)}"
            )
    if not g.is_generic_instruction:
        raise GenericFlagMissing("denominator bundle is not a generic-instruction run")


def relative_attention(
    question: AttentionBundle,
    generic: AttentionBundle,
    choice: LayerChoice,
    eps: float = DEFAULT_EPS,
) -> ImportanceMap:
    """Question map divided cellwise by the generic-instruction map.

    The denominator is floored at eps. With an averaged choice this is the
    ratio of the two layer-averaged maps; see layer_average for the mean of
    per-layer ratios, which is a different estimator.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    _check_pair_geometry(question, generic)
    num = answer_to_image(question, choice).values
    den = answer_to_image(generic, choice).values
    values = num / np.maximum(den, eps)
    pw, ph = _patch_geometry(question)
    return ImportanceMap(values=values, patch_width=pw, patch_height=ph, source_method="rel_att")


def grad_weighted_attention(bundle: AttentionBundle, choice: LayerChoice) -> ImportanceMap:
    """Attention gated by ReLU of its gradient, per head, then composed.

    The gate is applied before head averaging so heads whose gradient is
    negative drop out entirely rather than diluting the layer mean.
    """
    if bundle.ans_attn_grad is None:
        raise MissingGradients("grad-weighted map needs ans_attn_grad")
    gated = bundle.ans_attn.astype(np.float64) * np.maximum(
        bundle.ans_attn_grad.astype(np.float64), 0.0
    )
    st = head_average(gated)
    ti = _connector_hop(bundle, grad_weighted=True)
    return _compose(st, ti, choice, bundle, source_method="grad_att")


def relative_layer_maps(
    question: AttentionBundle,
    generic: AttentionBundle,
    eps: float = DEFAULT_EPS,
) -> np.ndarray:
    """Per-layer relative-attention maps, shape [L, max(Lc, 1), N, N].

    Index [m, k] holds the ratio map for LLM layer m and connector layer k
    (k is always 0 for identity connectors). layer_average(rel_att) is the
    mean of these maps.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    _check_pair_geometry(question, generic)
    man = question.manifest
    st_q = head_average(question.ans_attn)
    st_g = head_average(generic.ans_attn)
    ti_q = _connector_hop(question, grad_weighted=False)
    ti_g = _connector_hop(generic, grad_weighted=False)
    if ti_q is None:
        if man.T != man.N * man.N:
            raise TokenGridMismatch(
                f"identity connector needs T == N*N, got T={man.T}, N={man.N}"
            )
        num = st_q[:, None, :]
        den = st_g[:, None, :]
    else:
        num = np.einsum("mt,ktn->mkn", st_q, ti_q)
        den = np.einsum("mt,ktn->mkn", st_g, ti_g)
    ratios = num / np.maximum(den, eps)
    return ratios.reshape(man.L, max(man.Lc, 1), man.N, man.N)


def layer_average(
    bundle: AttentionBundle,
    method: str,
    generic: AttentionBundle | None = None,
    eps: float = DEFAULT_EPS,
) -> ImportanceMap:
    """Mean over all (m, k) layer pairs of the per-layer maps of a method.

    For rel_att this is the mean of the per-layer ratio maps, not the ratio
    of averaged maps. For grad_att the mean map equals the averaged-choice
    composition (bilinearity), which is what this computes.
    """
    if method == "grad_att":
        return grad_weighted_attention(bundle, AVERAGED)
    if method != "rel_att":
        raise ValueError(f"layer_average supports rel_att and grad_att, got {method!r}")
    if generic is None:
        raise MissingGenericBundle("rel_att needs the generic-instruction bundle")
    ratios = relative_layer_maps(bundle, generic, eps)
    values = ratios.mean(axis=(0, 1))
    pw, ph = _patch_geometry(bundle)
    return ImportanceMap(values=values, patch_width=pw, patch_height=ph, source_method="rel_att")
