"""Exception types shared across the package."""


class ShapeMismatch(ValueError):
    """Operands have shapes incompatible with the requested operation."""


class EmptySequence(ValueError):
    """A sequence with zero rows was given where at least one is required."""


class ConfigError(ValueError):
    """Invalid model, run, or generator configuration."""


class DataIntegrityError(ValueError):
    """Manifest or dataset content violates its declared structure."""


class FormatError(ValueError):
    """Malformed binary matrix file.  Carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TrainingDiverged(RuntimeError):
    """The loss left the finite range; carries step and batch identity."""


class NoAvailableExperts(ValueError):
    """Every expert stream is missing for a record that must be scored."""


class DegenerateWeights(ValueError):
    """Mixture weight mass over the available experts is numerically zero."""
