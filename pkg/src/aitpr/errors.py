"""Exception hierarchy shared by all aitpr modules."""


class AitprError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AitprError):
    """Shapes of two operands do not line up.

    The message always names both offending shapes.
    """


class NumericError(AitprError):
    """A computation produced NaN or Inf; names the graph node when known."""


class ConfigError(AitprError):
    """A configuration value is out of its allowed range."""


class FeatureError(AitprError):
    """A feature set is empty or otherwise unusable."""


class DegenerateBranchError(AitprError):
    """A fusion branch has no regions to attend over and no fallback applies."""


class OrthogonalityError(AitprError):
    """Requested more mutually orthonormal vectors than the space can hold."""


class CoverageError(AitprError):
    """A caption token is missing from the vocabulary; names the token."""


class ParseError(AitprError):
    """A file could not be parsed; carries the position when available."""


class FormatError(AitprError):
    """A file parsed but violates its declared structure (dims, magic, ...)."""


class VersionError(FormatError):
    """A checkpoint was written by an incompatible format version."""


class AlignmentError(AitprError):
    """Per-step logits and target tokens do not line up."""


class CompatibilityError(AitprError):
    """A checkpoint and a dataset disagree (vocabulary, dimensions)."""


class TrainingDiverged(AitprError):
    """Training loss became non-finite; carries the last good checkpoint."""

    def __init__(self, message, last_good_checkpoint=None, last_good_epoch=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
        self.last_good_epoch = last_good_epoch


class UsageError(AitprError):
    """Bad command-line arguments (maps to exit code 2)."""
