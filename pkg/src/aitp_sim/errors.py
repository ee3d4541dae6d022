"""Exception types raised across the simulator."""


class AitpError(Exception):
    """Base class for all simulator errors."""


class ParseError(AitpError):
    """Scenario text could not be parsed."""


class ValidationError(AitpError):
    """A configuration value violates an invariant.

    ``field`` names the offending key so callers can report it.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DomainError(AitpError, ValueError):
    """Argument outside the domain of a formula."""


class DivergenceError(AitpError):
    """Local training produced a non-finite loss."""


class DropoutError(AitpError):
    """A masked contributor failed before its pairwise masks could cancel."""

    def __init__(self, device_ids):
        super().__init__(f"masked contributors dropped out: {sorted(device_ids)}")
        self.device_ids = frozenset(device_ids)


class NoAggregatorError(AitpError):
    """No live aggregator delivered an update this round."""


class UnstableQueueError(AitpError):
    """Arrival rate at or beyond the stable utilization of the server."""


class UnknownIdError(AitpError, KeyError):
    """Failure target does not exist."""


class IoError(AitpError, OSError):
    """Output could not be written."""
