"""Exception taxonomy shared across the toolkit.

Every error raised on a user-facing path is one of these, so the CLI can map
failures to a stable machine-parsable category line.
"""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""

    category = "internal"


class DimensionError(ToolkitError):
    """Shapes are incompatible or not divisible as required."""

    category = "dimension"


class DomainError(ToolkitError):
    """A math op was evaluated outside its valid domain in strict mode."""

    category = "domain"


class ParameterError(ToolkitError):
    """A config or parameter block failed validation."""

    category = "parameter"


class LayoutError(ToolkitError):
    """A Bayer layout was not the one required by the operation."""

    category = "layout"


class BoundsError(ToolkitError):
    """A crop or index fell outside the image bounds."""

    category = "bounds"


class FormatError(ToolkitError):
    """A container file is malformed or has an unsupported schema."""

    category = "format"


class EvaluationError(ToolkitError):
    """A numeric check could not be evaluated (non-finite values)."""

    category = "evaluation"


class TrainingDiverged(ToolkitError):
    """Training hit a non-finite loss or gradient and aborted."""

    category = "training"
