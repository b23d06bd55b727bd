"""Error taxonomy shared across the pipeline.

The CLI maps these onto distinct exit codes (see cli.py).
"""


class ParameterError(ValueError):
    """Caller passed inconsistent shapes, dims, or option values."""


class GeometryError(RuntimeError):
    """Geometric precondition violated (e.g. vertex behind the camera)."""


class NumericError(ArithmeticError):
    """Degenerate numeric situation: empty mask support, non-finite values."""


class FitError(NumericError):
    """Parameter fitting diverged (loss became non-finite)."""


class GenerationError(RuntimeError):
    """Procedural generation could not satisfy its constraints."""
