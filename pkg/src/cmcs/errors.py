"""Exception hierarchy shared across the package."""


class CMCSError(Exception):
    """Base class for every error raised by this package."""


class InvalidSequence(CMCSError, ValueError):
    pass


class TopologyMismatch(CMCSError, ValueError):
    pass


class FormatError(CMCSError, ValueError):
    pass


class ChannelError(CMCSError, ValueError):
    pass


class ShapeError(CMCSError, ValueError):
    pass


class ArchitectureMismatch(CMCSError, ValueError):
    pass


class DegenerateVector(CMCSError, ValueError):
    pass


class NormalizationError(CMCSError, ValueError):
    pass


class ParameterError(CMCSError, ValueError):
    pass


class TrainingDiverged(CMCSError, RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class EmptySplit(CMCSError, ValueError):
    pass


class StratificationError(CMCSError, ValueError):
    pass


class ConfigError(CMCSError, ValueError):
    pass
