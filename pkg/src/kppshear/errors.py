"""Exception hierarchy shared by all kppshear modules."""


class KppShearError(Exception):
    """Base class for every error raised by the package."""


class EmbeddingNotPSD(KppShearError):
    """Circulant embedding needed more eigenvalue clamping than allowed."""


class MismatchedGrids(KppShearError):
    pass


class NonFiniteState(KppShearError):
    pass


class PoorFit(KppShearError):
    pass


class InsufficientData(KppShearError):
    pass


class FitOutOfRange(KppShearError):
    pass


class DegenerateESS(KppShearError):
    """Importance weights collapsed onto too few paths."""


class OutOfTableRange(KppShearError):
    pass


class NoInteriorMinimum(KppShearError):
    pass


class InconsistentBounds(KppShearError):
    pass


class CFLViolation(KppShearError):
    pass


class WindowOverrun(KppShearError):
    pass


class NoCrossing(KppShearError):
    pass


class InsufficientSamples(KppShearError):
    pass


class InsufficientTimeSpan(KppShearError):
    pass


class ConfigInvalid(KppShearError):
    """Raised with a ``field: message`` description of the offending entry."""

    def __init__(self, field, message):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")
