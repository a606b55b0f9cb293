"""Exception types shared across the package."""


class LoraSMCError(Exception):
    """Base class for all package errors."""


class ShapeError(LoraSMCError, ValueError):
    pass


class RankDeficientError(LoraSMCError, ValueError):
    """A matrix that must have full column rank does not."""


class NotPositiveDefiniteError(LoraSMCError, ValueError):
    pass


class DegenerateWeightsError(LoraSMCError, RuntimeError):
    """All particle weights are -inf (or NaN) at some time step."""

    def __init__(self, t, message=None):
        self.t = t
        super().__init__(message or f"all particle weights are degenerate at t={t}")


class NonFiniteGradientError(LoraSMCError, FloatingPointError):
    def __init__(self, blocks):
        self.blocks = list(blocks)
        super().__init__("non-finite gradient in parameter block(s): " + ", ".join(self.blocks))


class SchemaError(LoraSMCError):
    """An archive or config has an unexpected schema version or layout."""


class ModalityError(LoraSMCError, ValueError):
    """Dataset modality does not match the observation head."""


class ConfigError(LoraSMCError, ValueError):
    pass
