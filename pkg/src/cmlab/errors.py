"""Exception types shared across the package."""


class CmlabError(Exception):
    """Base class for all cmlab errors."""


class ContractViolationError(CmlabError, ValueError):
    """An argument violates a structural precondition (shape, finiteness)."""


class DomainError(CmlabError, ValueError):
    """A numeric argument is outside its valid range."""


class ScheduleError(CmlabError, ValueError):
    """A time-gap or noise schedule produced an invalid value."""


class ApplicabilityError(CmlabError, ValueError):
    """A transformation was applied to data it does not support."""


class GeometryError(CmlabError, RuntimeError):
    """Manifold geometry computation failed (degenerate basis, bad projection)."""


class ConfigError(CmlabError, ValueError):
    """Invalid or inconsistent configuration."""


class TrainingError(CmlabError, RuntimeError):
    """Training diverged or hit a non-finite state.

    Carries the path of the last finite checkpoint when one was written.
    """

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class FormatError(CmlabError, ValueError):
    """A file on disk does not match the expected schema."""
