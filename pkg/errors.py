"""
Exception hierarchy shared by every rledx module.

Validation errors (bad input, bad files, bad config) map to CLI exit code 1,
runtime failures (training divergence, generation failures) to exit code 2.
"""


class RledxError(Exception):
    """Base class for all project errors"""
    exit_code = 2


class ValidationError(RledxError, ValueError):
    exit_code = 1


class RuntimeFailure(RledxError, RuntimeError):
    exit_code = 2


class InvalidArgumentError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class FormatError(ValidationError):
    """Malformed RVOL / RNNP / manifest payload; message names the field"""

    def __init__(self, path, field: str, detail: str):
        self.path = str(path)
        self.field = field
        super().__init__(f"{self.path}: bad {field}: {detail}")


class ConfigError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class UndefinedMetricError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class ConversionError(ValidationError):
    pass


class NoCandidateError(ValidationError):
    pass


class StateError(RuntimeFailure):
    pass


class TrainingError(RuntimeFailure):
    pass


class GenerationError(RuntimeFailure):
    pass
