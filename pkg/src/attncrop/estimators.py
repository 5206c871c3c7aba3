"""Scikit-learn style facades over the functional core.

Both transformers are stateless: fit stores nothing and exists so the
classes compose with sklearn.pipeline. X is a sequence of PairInputs;
ImportanceMapper emits (pair, map) tuples and CropSelector turns those
into CropDirectives, so

    make_crop_pipeline(method="rel_att").transform(pairs)

is the whole bundle-to-crop path.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.pipeline import Pipeline

from . import attention, cropper, saliency
from .datatypes import CropDirective, ImportanceMap
from .validation import PairInputs, check_method, check_pair, resolve_layer_choice


def compute_importance(pair: PairInputs, method: str, choice, eps: float) -> ImportanceMap:
    """Dispatch one validated pair to its method's map construction."""
    check_pair(pair, method)
    if method == "rel_att":
        if choice.mode == "averaged":
            return attention.layer_average(pair.bundle, "rel_att", generic=pair.generic, eps=eps)
        return attention.relative_attention(pair.bundle, pair.generic, choice, eps=eps)
    if method == "grad_att":
        return attention.grad_weighted_attention(pair.bundle, choice)
    if method == "pure_grad":
        return saliency.pure_grad_importance(
            pair.image, pair.bundle.input_grad, pair.bundle.manifest.N
        )
    raise ValueError(f"method {method!r} does not produce an importance map")


class ImportanceMapper(BaseEstimator, TransformerMixin):
    """Stateless transformer: PairInputs -> (PairInputs, ImportanceMap).

    llm_layer/connector_layer of None defer to the model family default,
    falling back to layer averaging; average=True forces averaging.
    """

    def __init__(
        self,
        method: str = "rel_att",
        llm_layer: int | None = None,
        connector_layer: int | None = None,
        average: bool = False,
        eps: float = attention.DEFAULT_EPS,
    ):
        self.method = method
        self.llm_layer = llm_layer
        self.connector_layer = connector_layer
        self.average = average
        self.eps = eps

    def fit(self, X=None, y=None):
        check_method(self.method)
        if self.method == "human_crop":
            raise ValueError("human_crop uses the ground-truth box, not an importance map")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        return self

    def __sklearn_is_fitted__(self):
        return True  # nothing is learned

    def transform(self, X):
        self.fit()
        out = []
        for pair in X:
            choice = resolve_layer_choice(
                pair.bundle.manifest.model_id, self.llm_layer, self.connector_layer, self.average
            )
            out.append((pair, compute_importance(pair, self.method, choice, self.eps)))
        return out

    def layer_choice_for(self, pair: PairInputs):
        return resolve_layer_choice(
            pair.bundle.manifest.model_id, self.llm_layer, self.connector_layer, self.average
        )


class CropSelector(BaseEstimator, TransformerMixin):
    """Stateless transformer: (PairInputs, ImportanceMap) -> CropDirective.

    input_resolution of None reads each pair's manifest; the selected
    window is expanded to a square before it is emitted.
    """

    def __init__(
        self,
        input_resolution: int | None = None,
        multipliers: tuple[float, ...] = cropper.DEFAULT_MULTIPLIERS,
        method: str = "rel_att",
        llm_layer: int | None = None,
        connector_layer: int | None = None,
        average: bool = False,
    ):
        self.input_resolution = input_resolution
        self.multipliers = multipliers
        self.method = method
        self.llm_layer = llm_layer
        self.connector_layer = connector_layer
        self.average = average

    def fit(self, X=None, y=None):
        check_method(self.method)
        if not self.multipliers:
            raise ValueError("multipliers must be non-empty")
        return self

    def __sklearn_is_fitted__(self):
        return True  # nothing is learned

    def transform(self, X):
        self.fit()
        out = []
        for pair, importance in X:
            man = pair.bundle.manifest
            res = self.input_resolution or man.input_resolution
            bbox = cropper.select_bbox(
                importance, man.image_width, man.image_height, res, tuple(self.multipliers)
            )
            window = cropper.expand_to_square(bbox, man.image_width, man.image_height)
            choice = resolve_layer_choice(
                man.model_id, self.llm_layer, self.connector_layer, self.average
            )
            out.append(
                CropDirective(window=window, method=self.method, layer=choice, resize_to=res)
            )
        return out


def make_crop_pipeline(
    method: str = "rel_att",
    llm_layer: int | None = None,
    connector_layer: int | None = None,
    average: bool = False,
    eps: float = attention.DEFAULT_EPS,
    input_resolution: int | None = None,
    multipliers: tuple[float, ...] = cropper.DEFAULT_MULTIPLIERS,
) -> Pipeline:
    """PairInputs -> CropDirective as a two-step sklearn Pipeline."""
    shared = dict(
        method=method, llm_layer=llm_layer, connector_layer=connector_layer, average=average
    )
    return Pipeline(
        [
            ("importance", ImportanceMapper(eps=eps, **shared)),
            ("crop", CropSelector(input_resolution=input_resolution, multipliers=multipliers, **shared)),
        ]
    )
