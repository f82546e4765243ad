"""
Exception classes for the SPAD array / QKD link simulator.

Every error raised on purpose by the backend derives from SimulationError,
which carries a short title next to the message so the command-line front
end can print both and pick an exit code.
"""

from typing import List, Optional, Tuple


class SimulationError(Exception):
    """Base exception for simulator errors with custom title."""

    exit_code = 1

    def __init__(self, message, title="Error"):
        super().__init__(message)
        self.title = title


class DomainError(SimulationError, ValueError):
    """Raised when a numeric primitive receives an argument outside its domain."""

    exit_code = 2

    def __init__(self, message):
        super().__init__(message, title="Domain Error")


class ConfigValidationError(SimulationError):
    """Aggregated configuration report; one entry per violated field."""

    exit_code = 2

    def __init__(self, errors: List[Tuple[str, str]]):
        self.errors = list(errors)
        lines = [f" - {path}: {message}" for path, message in self.errors]
        super().__init__(
            "Configuration failed validation:\n" + "\n".join(lines),
            title="Invalid Configuration",
        )

    @property
    def field_paths(self) -> List[str]:
        return [path for path, _ in self.errors]


class ModelError(SimulationError):
    """Raised when a model cannot produce a physical answer for its inputs."""

    exit_code = 4

    def __init__(self, message, title="Model Error"):
        super().__init__(message, title=title)


class BiasTargetError(ModelError):
    """A pixel cannot reach the requested system SPDE on its bias curve."""

    def __init__(self, pixel: int, achievable: Tuple[float, float], needed: float):
        self.pixel = pixel
        self.achievable = achievable
        self.needed = needed
        super().__init__(
            f"Pixel {pixel} cannot reach the target: needs SPAD SPDE "
            f"{needed:.4%} but its curve spans "
            f"[{achievable[0]:.4%}, {achievable[1]:.4%}]",
            title="Unreachable Bias Target",
        )


class PartialBlockError(ModelError):
    """The projected block duration exceeds the configured cap."""

    def __init__(self, projected_s: float, cap_s: float, sifted_bits: float = 0.0):
        self.projected_s = projected_s
        self.cap_s = cap_s
        self.sifted_bits = sifted_bits
        super().__init__(
            f"Block would need {projected_s:.3g} s of link time "
            f"(cap {cap_s:.3g} s); accumulated {sifted_bits:.0f} sifted bits",
            title="Partial Block",
        )


class CancelledError(SimulationError):
    """Exception raised when a run is cancelled through its cancel event."""

    def __init__(self, message="Run cancelled by user.", partial: Optional[object] = None):
        super().__init__(message, title="Run Cancelled")
        self.partial = partial
