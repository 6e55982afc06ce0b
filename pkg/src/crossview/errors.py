"""Toolkit exception types.

Every error carries a short machine-readable ``code`` (stable across
releases; the CLI prints it on stderr) plus a human message.
"""


class ToolkitError(Exception):
    """Base class for all toolkit failures."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code
        self.message = message

    def __str__(self):
        return f"[{self.code}] {self.message}"


class GeometryError(ToolkitError):
    """Degenerate or infeasible geometric configuration."""


class ContractError(ToolkitError):
    """A call violated an operation's stated precondition."""


class ParseError(ToolkitError):
    """Malformed on-disk data; records file/line/column when known."""

    def __init__(self, code, message, path=None, line=None, column=None):
        loc = path or ""
        if line is not None:
            loc += f":{line}"
            if column is not None:
                loc += f":{column}"
        if loc:
            message = f"{loc}: {message}"
        super().__init__(code, message)
        self.path = path
        self.line = line
        self.column = column
