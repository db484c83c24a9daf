class HspsError(Exception):
    exit_code = 3


class ConfigError(HspsError, ValueError):
    exit_code = 2


class ComputationError(HspsError):
    exit_code = 3


class RangeError(ComputationError, ValueError):
    pass


class DomainError(ComputationError, ValueError):
    pass


class NoPhasematchError(ComputationError):
    def __init__(self, message: str, endpoint_mismatch: tuple[float, float]):
        super().__init__(message)
        self.endpoint_mismatch = endpoint_mismatch


class CalibrationError(ComputationError):
    pass


class TruncationError(ComputationError):
    pass


class UndefinedMetricError(ComputationError):
    pass


class NumericalDegeneracyError(ComputationError):
    pass
