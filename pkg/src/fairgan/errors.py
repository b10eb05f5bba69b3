"""Exception hierarchy shared by every stage of the pipeline."""


class FairGANError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FairGANError, ValueError):
    """Inconsistent dimensions, invalid hyperparameters or config violations."""

    def __init__(self, message, violations=None):
        self.violations = list(violations or [])
        if self.violations:
            message = message + "\n" + "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(message)


class UsageError(FairGANError, RuntimeError):
    """An API was called in a state where the call makes no sense."""


class NumericalError(FairGANError, ArithmeticError):
    """A NaN/Inf appeared, or an input left its mathematical domain."""


class FormatError(FairGANError, ValueError):
    """A binary file does not match its declared layout."""


class DataError(FairGANError, ValueError):
    """The data cannot satisfy a request (too few samples, missing labels)."""


class ScarcityError(FairGANError):
    """Random search could not find enough samples of a rare class."""

    def __init__(self, message, observed_frequency=None):
        self.observed_frequency = observed_frequency
        super().__init__(message)


class QualityError(FairGANError):
    """A trained model is below the floor required for downstream use."""


class MissingArtifactError(FairGANError, FileNotFoundError):
    """An upstream pipeline artifact is absent."""
