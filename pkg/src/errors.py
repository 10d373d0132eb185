class GarnnError(Exception):
    """Base class for every failure the forecaster reports to its caller."""


class DimensionError(GarnnError, ValueError):
    pass


class IsolatedVertexError(GarnnError, ValueError):
    pass


class IngestionError(GarnnError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ConfigurationError(GarnnError, ValueError):
    pass


class ContractError(GarnnError, ValueError):
    pass


class DegenerateBatchError(GarnnError, ValueError):
    pass


class NonFiniteError(GarnnError, ArithmeticError):
    pass


class CheckpointError(GarnnError):
    pass


class TrainingAborted(GarnnError):
    """Raised when training cannot continue; `checkpoint` is the last good state."""

    def __init__(self, message, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history or []
