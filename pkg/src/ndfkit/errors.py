"""Exception types raised across the toolkit.

Every error derives from :class:`NdfError` so callers (notably the CLI) can
map failures to exit codes without catching unrelated exceptions.
"""


class NdfError(Exception):
    """Base class for toolkit errors."""


class InvalidArgumentError(NdfError, ValueError):
    pass


class InfeasibleRoomError(NdfError, ValueError):
    """Requested reverberation time cannot be realised in the given room."""


class DegenerateSignalError(NdfError, ValueError):
    """Signal or stem carries no energy where energy is required."""


class SamplingError(NdfError, RuntimeError):
    """Rejection sampling exhausted its retry budget."""


class PlanningError(NdfError, RuntimeError):
    """Mini-batch plan cannot satisfy the near-target constraint."""

    def __init__(self, message, deficit=0):
        super().__init__(message)
        self.deficit = deficit


class DesignError(NdfError, ValueError):
    """Beamformer design constraint is infeasible."""


class OracleUnavailableError(NdfError, ValueError):
    """Oracle filter requested without per-source stems."""


class FormatError(NdfError, ValueError):
    """Malformed or unsupported file content."""


class CardinalityError(NdfError, ValueError):
    """Masks and scenes do not correspond one-to-one."""


class CorpusError(NdfError, OSError):
    """Source-audio corpus is missing or too small for the requested scenes."""
