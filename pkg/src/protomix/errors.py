"""Exception hierarchy shared across the package.

ValidationError covers bad inputs and malformed configuration (CLI exit 1);
NumericalError covers runtime numerical failures (CLI exit 2).
"""


class ValidationError(ValueError):
    """Invalid argument, configuration, or data contract violation."""


class ParseError(ValidationError):
    """Malformed file content. Carries location context where available."""

    def __init__(self, message: str, *, set_id: str | None = None, row: int | None = None):
        ctx = []
        if set_id is not None:
            ctx.append(f"set {set_id!r}")
        if row is not None:
            ctx.append(f"row {row}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)
        self.set_id = set_id
        self.row = row


class NumericalError(RuntimeError):
    """Non-finite or otherwise unusable numerical result."""
