"""Shared exception types."""


class ParseError(ValueError):
    """Raised when an input file violates its declared format.

    Messages always carry the offending path and line number so that CLI
    errors point at the exact spot to fix.
    """

    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")
