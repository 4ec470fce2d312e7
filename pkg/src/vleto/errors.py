"""Exception hierarchy shared by every vleto module."""


class VletoError(Exception):
    """Base class for all library errors."""


class ShapeError(VletoError, ValueError):
    pass


class DomainError(VletoError, ValueError):
    pass


class StateError(VletoError, RuntimeError):
    pass


class ConfigError(VletoError, ValueError):
    """Invalid configuration. ``field`` names the offending setting when known."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ProtocolError(VletoError, RuntimeError):
    pass


class IngestionError(VletoError, ValueError):
    """Bad input file. Carries the 1-based row and the column name when known."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DegenerateInputError(VletoError, ValueError):
    pass


class MissingClassError(VletoError, ValueError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"no samples for classes {self.missing}")


class NumericalError(VletoError, FloatingPointError):
    pass


class ComparisonError(VletoError, ValueError):
    pass
