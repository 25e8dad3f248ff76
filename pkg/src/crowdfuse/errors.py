"""Exception types shared across the package."""


class CrowdfuseError(Exception):
    """Base class for all errors raised by crowdfuse."""


class ManifestError(CrowdfuseError):
    """Malformed manifest or annotation file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix += str(path)
        if line is not None:
            prefix += f":{line}"
        if prefix:
            message = f"{prefix}: {message}"
        super().__init__(message)


class ValidationError(CrowdfuseError):
    """Data violates a typed invariant (bounds, shapes, preconditions)."""


class CapacityError(CrowdfuseError):
    """Requested synthetic crowd does not fit inside the frame."""


class ConfigError(CrowdfuseError):
    """Invalid model or run configuration."""


class NumericError(CrowdfuseError):
    """Non-finite value encountered during a numeric computation.

    Carries a diagnostics dict (epoch, step, recent losses) so callers
    can persist a snapshot before aborting.
    """

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)
