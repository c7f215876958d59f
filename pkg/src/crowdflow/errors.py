"""Exception hierarchy shared across the package."""


class CrowdflowError(Exception):
    """Base class for all package errors."""


class ContractError(CrowdflowError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class ParseError(CrowdflowError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(CrowdflowError, ValueError):
    pass


class ConfigError(CrowdflowError, ValueError):
    pass


class SolverError(CrowdflowError, ArithmeticError):
    def __init__(self, message, frame=None):
        self.frame = frame
        super().__init__(message if frame is None else f"frame {frame}: {message}")


class TrainingError(CrowdflowError, ArithmeticError):
    def __init__(self, message, episode=None, frame=None, layer=None):
        self.episode = episode
        self.frame = frame
        self.layer = layer
        where = [f"{k} {v}" for k, v in (("episode", episode), ("frame", frame), ("layer", layer))
                 if v is not None]
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class RolloutError(CrowdflowError, ArithmeticError):
    def __init__(self, message, frame=None):
        self.frame = frame
        super().__init__(message if frame is None else f"frame {frame}: {message}")


class UndefinedMetricError(CrowdflowError, ValueError):
    pass
