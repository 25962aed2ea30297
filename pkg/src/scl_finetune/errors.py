"""Exception hierarchy shared across the package."""


class SCLError(Exception):
    """Base class for every error raised by this package."""


class NumericError(SCLError, ValueError):
    pass


class ZeroVector(NumericError):
    pass


class DegenerateData(NumericError):
    pass


class InvalidTemperature(NumericError):
    pass


class InvalidPairing(NumericError):
    pass


class DataError(SCLError):
    """Problems with input files or dataset contents (CLI exit code 2)."""


class ParseError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownLabel(DataError):
    pass


class EmptyFile(DataError):
    pass


class EmptyDataset(DataError):
    pass


class TooFewExamples(DataError):
    pass


class CheckpointError(DataError):
    pass


class CorruptedCheckpoint(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatch(SCLError):
    pass


class InsufficientRuns(SCLError):
    pass
