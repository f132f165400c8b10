"""Exception hierarchy shared by every pipeline layer."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class InputError(PipelineError):
    """Malformed or inconsistent input data (files, schemas, parameters)."""


class NumericalError(PipelineError):
    """A numerical procedure failed (impossible observation, optimizer breakdown)."""


class FitError(NumericalError):
    """All optimizer restarts failed.

    Carries the best partial result (may be None) so callers can inspect
    how far the search got.
    """

    def __init__(self, message, best_partial=None):
        super().__init__(message)
        self.best_partial = best_partial
