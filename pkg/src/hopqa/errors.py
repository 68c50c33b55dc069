"""Exception types shared across the pipeline."""


class HopQAError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(HopQAError):
    """A data file could not be parsed; carries path and line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class EmptyFactError(HopQAError):
    """A fact normalized to the empty string."""


class DuplicateIdError(HopQAError):
    """Two different records claim the same id."""


class UnknownFactError(HopQAError):
    """A fact id is not present in the index."""


class EmptyQueryError(HopQAError):
    """A generated query has no tokens left."""


class RetrievalFailedError(HopQAError):
    """Every answer option produced an empty query."""


class DatasetDegenerateError(HopQAError):
    """A ranking dataset ended up with an empty class."""


class InputTooLongError(HopQAError):
    """The non-droppable part of a model input exceeds max_len."""


class NonFiniteLossError(HopQAError):
    """Training produced a non-finite loss or update."""
