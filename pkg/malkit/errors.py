from __future__ import annotations

from pathlib import Path


class MalkitError(ValueError):
    """Base class for every error raised on bad input or inconsistent artifacts."""


class ManifestParseError(MalkitError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class DatasetError(MalkitError):
    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        prefix = ""
        if self.path is not None:
            prefix = f"{self.path}:{line}: " if line is not None else f"{self.path}: "
        super().__init__(f"{prefix}{message}")


class SplitError(MalkitError):
    pass


class TrainingError(MalkitError):
    pass


class DimensionError(MalkitError):
    pass


class ThresholdError(MalkitError):
    pass


class OSNNError(MalkitError):
    pass


class SchemaVersionError(MalkitError):
    pass


class ModelFileError(MalkitError):
    pass
