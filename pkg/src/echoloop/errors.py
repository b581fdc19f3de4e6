"""Exception hierarchy shared across the package.

CLI exit codes: ValidationError -> 2, MissingArtifactError -> 3,
NumericalError -> 4.
"""


class EchoLoopError(Exception):
    """Base class for all package errors."""


class ValidationError(EchoLoopError):
    """Bad parameters or malformed configuration/input."""


class UnknownIdError(ValidationError):
    """A user or item id is not known to the model."""


class StateSpaceOverflow(ValidationError):
    """d^m exceeds the exact-mode state cap; use Monte-Carlo simulation."""


class NotAbsorbingChain(EchoLoopError):
    """The chain has no absorbing state, so no fundamental-matrix analysis."""


class NumericalError(EchoLoopError):
    """A linear-algebra step failed (e.g. near-singular system)."""


class MissingArtifactError(EchoLoopError):
    """A pipeline stage requires an artifact that has not been produced."""
