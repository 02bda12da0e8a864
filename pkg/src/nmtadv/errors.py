"""Exception types raised across the package."""


class NmtAdvError(Exception):
    pass


class DimensionError(NmtAdvError, ValueError):
    pass


class ContractError(NmtAdvError, ValueError):
    """A documented precondition on an argument was violated."""


class ParameterError(NmtAdvError, ValueError):
    pass


class DataError(NmtAdvError, ValueError):
    pass


class TrainingError(NmtAdvError, RuntimeError):
    pass


class CheckpointError(NmtAdvError, ValueError):
    pass


class AttackError(NmtAdvError, RuntimeError):
    pass


class SampleError(NmtAdvError, ValueError):
    pass


class MetricError(NmtAdvError, ValueError):
    pass


class SpecError(NmtAdvError, ValueError):
    pass


class RecordError(NmtAdvError, ValueError):
    pass
