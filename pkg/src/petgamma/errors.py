"""Exception types raised by petgamma."""


class PetGammaError(Exception):
    """Base class for all library errors."""


class ConfigError(PetGammaError, ValueError):
    """Invalid configuration; ``path`` names the offending field when known."""

    def __init__(self, message, path=None):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class DegenerateChord(PetGammaError, ValueError):
    pass


class OutOfRange(PetGammaError, ValueError):
    pass


class ShrinkNotAllowed(PetGammaError, ValueError):
    pass


class SupportViolation(PetGammaError, ValueError):
    pass


class MassMismatch(PetGammaError, ValueError):
    pass


class SolverStall(PetGammaError, RuntimeError):
    """Iteration cap reached; ``result`` carries the best iterate found."""

    def __init__(self, message, result=None):
        self.result = result
        super().__init__(message)
