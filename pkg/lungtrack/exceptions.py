"""Exceptions raised by lungtrack.

Configuration problems are reported with Django's ``ImproperlyConfigured`` and single bad values with
``ValidationError``; everything that goes wrong while processing data derives from :class:`LungtrackError`.
"""


class LungtrackError(Exception):
    """Base class for data processing failures."""


class GeometryError(LungtrackError):
    """Two volumes that must share a voxel grid do not."""


class AnnotationError(LungtrackError):
    """A mask cannot be used, usually because it has no foreground voxel."""


class StudyError(LungtrackError):
    """A study violates the longitudinal ordering rules."""


class RegistrationError(LungtrackError):
    """The registration optimizer diverged."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self):
        message = super().__str__()
        if not self.diagnostics:
            return message
        details = ', '.join('%s=%s' % item for item in sorted(self.diagnostics.items()))
        return '%s (%s)' % (message, details)


class ModelError(LungtrackError):
    """A model was asked to process input it was not built for."""


class TrainingError(LungtrackError):
    """Training had to be aborted."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class StageError(LungtrackError):
    """A pipeline stage failed; partial artifacts are kept next to a failure marker."""

    def __init__(self, stage, message):
        super().__init__('%s: %s' % (stage, message))
        self.stage = stage


class ScheduleWarning(UserWarning):
    """A learning-rate schedule setting is legal but unlikely to be what was meant."""
