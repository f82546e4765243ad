"""
Backend package for the SPAD array / QKD link simulator.

Contains the detector Monte Carlo, the characterization estimators, the
analytic link model, the finite-key engine and the pulse-level protocol
simulation.
"""

from .config import SystemConfig, load_config, load_preset, validate_config
from .exceptions import (
    BiasTargetError,
    CancelledError,
    ConfigValidationError,
    DomainError,
    ModelError,
    PartialBlockError,
    SimulationError,
)
from .keyrate import BlockCounts, KeyRateReport, secure_key_length
from .link_model import OperatingPoint, qber

__all__ = [
    "SimulationError",
    "ConfigValidationError",
    "DomainError",
    "ModelError",
    "BiasTargetError",
    "PartialBlockError",
    "CancelledError",
    "SystemConfig",
    "load_config",
    "load_preset",
    "validate_config",
    "BlockCounts",
    "KeyRateReport",
    "secure_key_length",
    "OperatingPoint",
    "qber",
]
