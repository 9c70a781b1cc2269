"""Exception types shared across the package."""


class CurriculumSSLError(Exception):
    """Base class for all package errors."""


class InfeasibleTarget(CurriculumSSLError, ValueError):
    """Target sequence cannot be aligned to the available frames."""


class NonFiniteInput(CurriculumSSLError, ValueError):
    pass


class NonFiniteGradient(CurriculumSSLError, ValueError):
    pass


class NegativeLambda(CurriculumSSLError, ValueError):
    pass


class EmptyReference(CurriculumSSLError, ValueError):
    pass


class InvalidStageCount(CurriculumSSLError, ValueError):
    pass


class IterOutOfRange(CurriculumSSLError, IndexError):
    pass


class EmptyCorpus(CurriculumSSLError, ValueError):
    pass


class Exhausted(CurriculumSSLError):
    """Raised by the pool when every selected entry has been fetched.

    This is a control-flow signal, not a failure: the caller refills.
    """


class DimensionMismatch(CurriculumSSLError, ValueError):
    pass


class AlphaOutOfRange(CurriculumSSLError, ValueError):
    pass


class PrototypeRejectionExceeded(CurriculumSSLError, RuntimeError):
    pass


class CorruptManifest(CurriculumSSLError, ValueError):
    pass


class ChecksumMismatch(CurriculumSSLError, ValueError):
    pass


class CorruptCheckpoint(CurriculumSSLError, ValueError):
    pass


class DivergenceDetected(CurriculumSSLError, RuntimeError):
    pass


class ConfigValidation(CurriculumSSLError, ValueError):
    """Invalid run configuration. ``path`` names the offending key."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
