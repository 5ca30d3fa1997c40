"""Exception types shared across the package."""


class DentalXRError(Exception):
    """Base class for all package errors."""


class ShapeError(DentalXRError, ValueError):
    """Raised when tensor or image shapes do not compose.

    ``axis`` names the offending axis when one can be identified.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ParameterError(DentalXRError, ValueError):
    """An operation received an out-of-range hyperparameter."""


class ValidationError(DentalXRError, ValueError):
    """Input data failed validation (labels, class coverage, lengths)."""


class UsageError(DentalXRError, RuntimeError):
    """An API was called in the wrong order, e.g. backward before forward."""


class ManifestError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ArchiveError(DentalXRError):
    """A weight or model archive could not be read or does not fit the model.

    ``problems`` lists every individual mismatch so callers can report them all.
    """

    def __init__(self, message, problems=()):
        self.problems = list(problems)
        if self.problems:
            message = message + ":\n  " + "\n  ".join(self.problems)
        super().__init__(message)


class FoldError(DentalXRError):
    def __init__(self, fold, stage, cause):
        super().__init__(f"fold {fold} failed during {stage}: {cause}")
        self.fold = fold
        self.stage = stage
        self.cause = cause
