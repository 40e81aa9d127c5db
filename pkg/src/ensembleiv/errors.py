"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class EnsembleIVError(Exception):
    exit_code = 1


class ConfigurationError(EnsembleIVError, ValueError):
    exit_code = 2


class InvalidPartitionError(ConfigurationError):
    pass


class SchemaError(ConfigurationError):
    pass


class ShapeError(EnsembleIVError, ValueError):
    exit_code = 2


class EstimationError(EnsembleIVError):
    exit_code = 3


class SingularDesignError(EstimationError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class ConvergenceError(EstimationError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class DegenerateLambdaError(EstimationError):
    pass


class BootstrapDegeneracyError(EstimationError):
    pass


class DataIOError(EnsembleIVError, OSError):
    exit_code = 4


class ParseError(DataIOError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column
