"""Exception types shared across the package.

Every error carries a stable machine-readable ``code`` so the CLI can report
it in JSON without parsing messages.
"""

from __future__ import annotations


class DomainShiftError(Exception):
    """Base class. ``code`` is a short snake_case identifier."""

    code = "error"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ManifestError(DomainShiftError, ValueError):
    code = "bad_manifest"


class SplitError(DomainShiftError, ValueError):
    code = "bad_split"


class ConfigError(DomainShiftError, ValueError):
    code = "bad_config"


class StainError(DomainShiftError, ValueError):
    code = "stain_error"


class TrainingError(DomainShiftError, ValueError):
    code = "training_error"


class ActivationError(DomainShiftError, ValueError):
    code = "activation_error"


class ActivationFileError(DomainShiftError, ValueError):
    code = "bad_activation_file"


class FeatVizError(DomainShiftError, ValueError):
    code = "featviz_error"


class ReportError(DomainShiftError, ValueError):
    code = "report_error"
