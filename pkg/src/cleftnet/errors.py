"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class FormatError(ValueError):
    """A serialized artifact (VOL1 volume, CKPT1 checkpoint) is malformed."""


class EmptyTargetError(ValueError):
    """A distance transform was asked for with an empty target set."""


class MetricUndefinedError(ValueError):
    """A metric has no defined value for the given inputs (e.g. single-class AUC)."""


class ConfigError(ValueError):
    """Bad run configuration (unknown key, invalid value). CLI exit code 2."""


class DataError(ValueError):
    """Bad or missing input data. CLI exit code 3."""


class NumericalError(RuntimeError):
    """Numerical failure: NaN loss, failed gradient check. CLI exit code 4."""
