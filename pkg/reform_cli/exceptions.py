class ReformError(Exception):
    """Base error; `exit_code` is what the CLI exits with"""

    exit_code = 1


class ConfigError(ReformError):
    exit_code = 2


class BackendError(ReformError):
    """LLM or embedding backend failed after retries"""

    exit_code = 3


class DataIOError(ReformError):
    exit_code = 4


class DataFormatError(ReformError):
    exit_code = 4


class ReviewFormatError(DataFormatError):
    ...


class EmbeddingFormatError(DataFormatError):
    ...


class CheckpointFormatError(DataFormatError):
    ...


class NumericalError(ReformError):
    exit_code = 5


class AttentionNumericError(NumericalError):
    ...


class TrainingDivergedError(NumericalError):
    def __init__(self, message: str, batch=None):
        super().__init__(message)
        self.batch = batch


class ShapeError(NumericalError, ValueError):
    ...


EXIT_CODES = {
    0: "success",
    1: "unexpected error",
    ConfigError.exit_code: "invalid config or missing input path",
    BackendError.exit_code: "LLM/embedding backend failure",
    DataFormatError.exit_code: "unreadable or malformed data/artifact file",
    NumericalError.exit_code: "numerical failure (non-finite values, shape mismatch)",
}
