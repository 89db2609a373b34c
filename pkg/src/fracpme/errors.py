"""Exception types shared across the package."""


class FracPmeError(Exception):
    """Base class."""


class ConfigError(FracPmeError, ValueError):
    """Invalid configuration or parameters."""


class DomainError(FracPmeError, ValueError):
    """Arguments outside the admissible range of an operator."""


class CFLError(FracPmeError, RuntimeError):
    """Time step too large for the transport scheme."""

    def __init__(self, message: str, admissible_dt: float):
        super().__init__(f"{message} (admissible dt <= {admissible_dt:.6g})")
        self.admissible_dt = admissible_dt


class EscapeError(FracPmeError, RuntimeError):
    """A particle left the computational box."""
