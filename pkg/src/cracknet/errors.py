"""Exception hierarchy. The CLI prints ``<ClassName>: <message>`` to stderr."""


class CrackNetError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(CrackNetError, ValueError):
    pass


class NumericError(CrackNetError, ArithmeticError):
    pass


class UsageError(CrackNetError):
    pass


class DomainError(CrackNetError, ValueError):
    """Input outside the mathematical domain of a function (e.g. probabilities > 1)."""


class DegenerateStatisticsError(CrackNetError):
    pass


class MissingClassError(CrackNetError):
    def __init__(self, class_id: int):
        super().__init__(f"class {class_id} has no pixels in the dataset")
        self.class_id = class_id


class DataError(CrackNetError):
    pass


class PairingError(DataError):
    pass


class LabelError(DataError):
    pass


class ShapeError(DataError):
    pass


class SplitError(DataError):
    pass


class CheckpointFormatError(CrackNetError):
    pass


class OptimizerError(CrackNetError):
    pass


class TrainingError(CrackNetError):
    pass


class ConfigError(CrackNetError):
    pass
