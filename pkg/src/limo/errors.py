"""Exception hierarchy shared by the library and the CLI."""


class LimoError(Exception):
    """Base class for all library errors."""

    code = "error"


class DataError(LimoError, ValueError):
    """Input data is malformed or violates a documented precondition."""

    code = "data_error"


class DegeneratePoseError(DataError):
    """A pose has coincident joints or an undefined body frame."""

    code = "degenerate_pose"

    def __init__(self, message: str, frame: int | None = None):
        if frame is not None:
            message = f"frame {frame}: {message}"
        super().__init__(message)
        self.frame = frame


class DegenerateEmbeddingError(DataError):
    """An embedding row has (near) zero norm and cannot be cosine-normalised."""

    code = "degenerate_embedding"


class EmptyQueryError(DataError):
    code = "empty_query"


class FormatError(DataError):
    """A persisted file has the wrong magic, version or size."""

    code = "format_error"
