"""Exception hierarchy shared across the pipeline."""


class RltabError(Exception):
    """Base class for all package errors."""


class IngestError(RltabError):
    """Raised when a CSV or schema file cannot be read into a Dataset."""

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class SchemaError(RltabError):
    pass


class DegenerateLabelError(RltabError):
    pass


class SplitError(RltabError):
    pass


class VocabError(RltabError):
    pass


class InsufficientDataError(RltabError):
    pass


class RuleParseError(RltabError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"rule {index}: {message}")
        self.index = index


class ShapeError(RltabError):
    pass


class TapeError(RltabError):
    pass


class NonFiniteError(RltabError):
    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class EmptySampleError(RltabError):
    pass


class ConfigError(RltabError):
    pass


class CellTypeError(RltabError, TypeError):
    """A cell does not parse under its declared feature kind."""

    def __init__(self, message, row, column):
        super().__init__(f"row {row}, column {column!r}: {message}")
        self.row = row
        self.column = column
