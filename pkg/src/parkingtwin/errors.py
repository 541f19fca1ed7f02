"""Exception hierarchy. Anything raised on bad input derives from TwinError
so the CLI can map it to exit code 1; everything else is a genuine bug."""


class TwinError(Exception):
    """Base for all structured errors raised on invalid input or config."""


class MapParseError(TwinError):
    """Blueprint XML is not well-formed. Carries line/column when known."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class MapStructureError(TwinError):
    """Well-formed XML but broken references or degenerate geometry."""


class ConfigError(TwinError):
    """Bad configuration key, value, or combination."""


class DatasetError(TwinError):
    """Dataset layout problems that prevent startup (not per-frame skips)."""


class MeshError(TwinError):
    """Mesh file cannot be read or has inconsistent buffers."""
