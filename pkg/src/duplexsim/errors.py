"""Exception types shared across the simulator."""


class DuplexSimError(Exception):
    """Base class for simulator errors."""


class InvalidArgument(DuplexSimError, ValueError):
    pass


class CapacityExceeded(DuplexSimError):
    """Raised when model weights do not fit in device memory."""

    def __init__(self, shortfall_bytes: int, message: str = ""):
        self.shortfall_bytes = int(shortfall_bytes)
        super().__init__(message or f"capacity exceeded by {self.shortfall_bytes} bytes")


class ConfigError(DuplexSimError, ValueError):
    """Bad configuration; ``field`` names the offending key."""

    def __init__(self, field: str, constraint: str):
        self.field = field
        self.constraint = constraint
        super().__init__(f"{field}: {constraint}")


class InvariantViolation(DuplexSimError, AssertionError):
    """Internal invariant failure detected during a simulation."""


class SimulationComplete(DuplexSimError):
    """Signals that no requests remain to be scheduled."""
