"""Exception types shared across modules."""


class StructESError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatchError(StructESError, ValueError):
    pass


class NonFiniteValueError(StructESError, FloatingPointError):
    """An objective or input produced NaN/inf.

    ``index`` names the offending direction (or row) when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateSampleError(StructESError, RuntimeError):
    pass


class ConfigError(StructESError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ProtocolError(StructESError, RuntimeError):
    pass


class IncompleteIterationError(ProtocolError):
    """Aggregation was attempted without every direction's evaluations."""

    def __init__(self, iteration, missing_rows, reason="missing rows"):
        rows = sorted(missing_rows)
        shown = ", ".join(str(r) for r in rows[:16])
        if len(rows) > 16:
            shown += ", ..."
        super().__init__(f"incomplete iteration {iteration}: {reason} [{shown}]")
        self.iteration = iteration
        self.missing_rows = rows
