"""Exception hierarchy shared across the package."""


class NameTuneError(Exception):
    pass


class DimensionError(NameTuneError, ValueError):
    pass


class SequenceLengthError(NameTuneError, ValueError):
    pass


class DegenerateInputError(NameTuneError, ValueError):
    pass


class EmptyInputError(NameTuneError, ValueError):
    pass


class ConfigurationError(NameTuneError, ValueError):
    pass


class SamplingError(NameTuneError, ValueError):
    pass


class NumericError(NameTuneError, ArithmeticError):
    pass


class FormatError(NameTuneError, ValueError):
    """Raised for malformed binary files or manifest lines."""


class IntegrityError(NameTuneError, ValueError):
    pass


class CacheBuildError(NameTuneError):
    """Some manifest items could not be encoded; ``failures`` lists ``(item_id, reason)``."""

    def __init__(self, failures):
        self.failures = list(failures)
        lines = "; ".join(f"{i}: {r}" for i, r in self.failures[:5])
        more = f" (+{len(self.failures) - 5} more)" if len(self.failures) > 5 else ""
        super().__init__(f"{len(self.failures)} item(s) failed to encode: {lines}{more}")
