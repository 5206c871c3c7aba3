"""Exception types raised across the package.

Everything derives from AttncropError so callers can catch the package
family with one clause. Per-record isolation in the CLI relies on that.
"""


class AttncropError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AttncropError):
    """Invalid job configuration or CLI usage (maps to exit code 2)."""


# exchange ------------------------------------------------------------------

class MissingManifest(AttncropError):
    """Bundle directory has no manifest.json."""


class InvalidManifest(AttncropError):
    """manifest.json is unreadable or violates the schema."""


class ShapeMismatch(AttncropError):
    """Tensor file size or shape disagrees with the manifest."""


class MissingMandatoryRole(AttncropError):
    """Bundle lacks the mandatory ans_attn tensor."""


class NegativeAttention(AttncropError):
    """An attention tensor holds values below the -1e-6 noise floor."""


class InvalidBundle(AttncropError):
    """Attention values fail a sanity bound (e.g. row mass > 1 + 1e-3)."""


# attention -----------------------------------------------------------------

class EmptyHeadAxis(AttncropError):
    """Head axis has zero length, nothing to average."""


class TokenGridMismatch(AttncropError):
    """Identity connector requires T == N*N and it does not hold."""


class LayerOutOfRange(AttncropError):
    """Requested layer index is outside the bundle's layer count."""


class GeometryMismatch(AttncropError):
    """Two bundles that must share (N, T, L, Lc) do not."""


class GenericFlagMissing(AttncropError):
    """Denominator bundle is not flagged as a generic-instruction run."""


class MissingGradients(AttncropError):
    """Operation needs gradient tensors the bundle does not carry."""


class MissingTensor(AttncropError):
    """Bundle lacks a tensor role required by the operation."""


# saliency ------------------------------------------------------------------

class WrongChannelCount(AttncropError):
    """Input gradient is not a 3-channel [3, H, W] tensor."""


class GridSmallerThanPatches(AttncropError):
    """Cannot pool a grid into more patches than it has pixels per axis."""


class DimensionMismatch(AttncropError):
    """Image and gradient spatial dimensions disagree."""


# cropper -------------------------------------------------------------------

class EmptyMap(AttncropError):
    """Importance map has no cells."""


class NonPositiveResolution(AttncropError):
    """Model input resolution must be a positive integer."""


class DegenerateBBox(AttncropError):
    """Bounding box has non-positive width or height."""


class OutOfBounds(AttncropError):
    """Requested region does not lie inside the image."""


class BlockMapMismatch(AttncropError):
    """Block list and map list disagree in count, order, or geometry."""


# analysis ------------------------------------------------------------------

class DegenerateInput(AttncropError):
    """Zero-area box or image where positive area is required."""


class EmptyInput(AttncropError):
    """Statistic requested over an empty sample."""


class MissingPredictions(AttncropError):
    """Scoring requested for records that carry no prediction."""


class MissingGenericBundle(AttncropError):
    """Relative attention requires a generic-instruction bundle."""
