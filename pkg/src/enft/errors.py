"""Exception hierarchy shared by all stages."""


class EnftError(Exception):
    """Base class for every error raised by this package."""


class CheiralityViolation(EnftError):
    pass


class DegenerateLine(EnftError):
    pass


class InsufficientMatches(EnftError):
    pass


class DegenerateConfiguration(EnftError):
    pass


class DegenerateGeometry(EnftError):
    pass


class EmptyImage(EnftError):
    pass


class ParseError(EnftError):
    pass


class InitFailure(EnftError):
    pass


class ResectionFailure(EnftError):
    pass


class DisconnectedSequences(EnftError):
    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(f"sequences form {len(self.components)} components: {self.components}")


class SingularSystem(EnftError):
    pass


class SpecError(EnftError):
    pass


class ConfigError(EnftError):
    """Invalid run configuration; ``fields`` names the offending keys."""

    def __init__(self, message, fields=()):
        self.fields = list(fields)
        super().__init__(message)


class LayoutError(EnftError):
    def __init__(self, message, missing=()):
        self.missing = list(missing)
        super().__init__(message + (": " + ", ".join(self.missing) if self.missing else ""))


class InsufficientOverlap(EnftError):
    pass


class StageError(EnftError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class NoIntensitySource(UserWarning):
    """Images are missing; intensity-based quantities fall back to defaults."""
