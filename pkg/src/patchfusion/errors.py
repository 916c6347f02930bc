"""Exception types shared across the engine.

Argument/precondition violations raise plain ``ValueError``; everything
below signals a failure of an external artifact or subsystem.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for engine failures that are not caller bugs."""


class CoverageError(EngineError):
    """A crop plan left latent cells with no covering patch."""


class FormatError(EngineError):
    """A latent file is malformed (bad magic, version, or payload size)."""


class ProtocolError(EngineError):
    """A wire frame violates the binary protocol."""


class BackendError(EngineError):
    """A denoiser/decoder backend failed to serve a request."""

    def __init__(self, message: str, *, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class BackendUnreachable(BackendError):
    """The remote backend could not be contacted at all."""

    def __init__(self, message: str):
        super().__init__(message, retryable=True)


class PipelineError(EngineError):
    """A generation run aborted; carries the failure site and partial output."""

    def __init__(self, message: str, *, phase: int | None = None,
                 timestep: int | None = None, batch_index: int | None = None,
                 partial_results: list | None = None):
        super().__init__(message)
        self.phase = phase
        self.timestep = timestep
        self.batch_index = batch_index
        self.partial_results = partial_results or []
