"""Exception types shared across the simulator."""


class SflError(Exception):
    """Base class for all library errors."""


class ShapeError(SflError, ValueError):
    """Array dimensions do not match the operation's contract."""


class ValidationError(SflError, ValueError):
    """Input violates a value-level precondition (range, sign, emptiness)."""


class StaleCacheError(SflError, RuntimeError):
    """A backward pass was given a cache built against different parameters."""


class ProtocolError(SflError, RuntimeError):
    """A round-level exchange is missing or duplicates a participant."""


class InfeasiblePlanError(SflError, RuntimeError):
    """No worker arrangement can satisfy the bandwidth budget."""


class ConfigError(SflError, ValueError):
    """Experiment configuration failed validation."""
