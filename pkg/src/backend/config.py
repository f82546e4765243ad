"""
Configuration schema for the SPAD array / QKD link simulator.

All configuration types are frozen dataclasses. Files on disk are JSON
documents; presets ship next to this module in presets.json. Validation
collects every violation with its field path before failing, so a config is
either accepted whole or rejected with the complete report.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple

from .exceptions import ConfigValidationError
from .units import RngSpec, dcr_per_gate, deadtime_in_gates

PRESETS_PATH = os.path.join(os.path.dirname(__file__), "presets.json")

# Decoy flux ratios signal : decoy : vacuum
FLUX_RATIOS = (1.0, 0.25, 0.01)
PROBABILITY_TOLERANCE = 1e-9
BOUND_METHODS = ("hoeffding", "chernoff")


@dataclass(frozen=True)
class DetectorConfig:
    """One gated SPAD pixel."""

    spde: float = 0.15
    dcr_hz: float = 1930.0
    afterpulse_total: float = 0.0223
    deadtime_ns: float = 100.0
    gate_rate_ghz: float = 1.0
    gate_width_ps: float = 400.0
    trap_tau_ns: float = 50.0

    @property
    def gate_period_ns(self) -> float:
        return 1.0 / self.gate_rate_ghz

    @property
    def gate_width_ns(self) -> float:
        return self.gate_width_ps * 1e-3

    @property
    def deadtime_gates(self) -> int:
        return deadtime_in_gates(self.deadtime_ns, self.gate_rate_ghz)

    @property
    def dark_per_gate(self) -> float:
        return dcr_per_gate(self.dcr_hz, self.gate_rate_ghz)

    @property
    def trap_decay_per_gate(self) -> float:
        """Fraction of trapped charge surviving one gate period."""
        return math.exp(-self.gate_period_ns / self.trap_tau_ns)


@dataclass(frozen=True)
class ArrayConfig:
    """A linear SPAD array sharing one gating signal."""

    pixel_configs: Tuple[DetectorConfig, ...] = (DetectorConfig(), DetectorConfig())
    crosstalk_intrinsic: Tuple[Tuple[float, ...], ...] = ((0.0, 0.001), (0.001, 0.0))
    formation_tau_ns: float = 2.5
    universal_deadtime: bool = False

    @property
    def n_pixels(self) -> int:
        return len(self.pixel_configs)

    @property
    def gate_rate_ghz(self) -> float:
        return self.pixel_configs[0].gate_rate_ghz

    @property
    def gate_width_ns(self) -> float:
        return self.pixel_configs[0].gate_width_ns

    @property
    def gate_period_ns(self) -> float:
        return self.pixel_configs[0].gate_period_ns

    def with_spdes(self, spdes) -> "ArrayConfig":
        """Copy with per-pixel SPDE replaced (bias balancing result applied)."""
        pixels = tuple(replace(p, spde=float(s)) for p, s in zip(self.pixel_configs, spdes))
        return replace(self, pixel_configs=pixels)

    def with_crosstalk(self, strength: float) -> "ArrayConfig":
        """Copy with every off-diagonal intrinsic crosstalk set to `strength`."""
        n = self.n_pixels
        matrix = tuple(
            tuple(0.0 if i == j else float(strength) for j in range(n)) for i in range(n)
        )
        return replace(self, crosstalk_intrinsic=matrix)


@dataclass(frozen=True)
class ChannelConfig:
    """Quantum channel: a fixed attenuation or a fibre length."""

    attenuation_db: Optional[float] = None
    fibre_km: Optional[float] = None
    db_per_km: float = 0.18
    loss_override_db: Optional[float] = None

    @property
    def total_loss_db(self) -> float:
        if self.attenuation_db is not None:
            return float(self.attenuation_db)
        if self.loss_override_db is not None:
            return float(self.loss_override_db)
        if self.fibre_km is None:
            return 0.0
        return float(self.fibre_km) * self.db_per_km

    @property
    def equivalent_km(self) -> float:
        if self.fibre_km is not None:
            return float(self.fibre_km)
        if self.db_per_km <= 0:
            return float("nan")
        return self.total_loss_db / self.db_per_km

    @classmethod
    def at_attenuation(cls, attenuation_db: float, db_per_km: float = 0.18) -> "ChannelConfig":
        return cls(attenuation_db=float(attenuation_db), db_per_km=db_per_km)


@dataclass(frozen=True)
class ReceiverConfig:
    """Bob's passive circuit: waveguide chip, modulator and AMZI."""

    insertion_loss_db: float = 4.2
    visibility: float = 0.97
    efficiency_mismatch_max: float = 0.01
    # the AMZI splits each pulse over three time bins; only the central,
    # interfering bin falls inside a gate
    central_bin_fraction: float = 0.5

    @property
    def optical_error(self) -> float:
        return (1.0 - self.visibility) / 2.0


@dataclass(frozen=True)
class ProtocolConfig:
    """Decoy-state BB84 source settings."""

    rep_rate_ghz: float = 1.0
    mu_signal: float = 0.4
    mu_decoy: float = 0.1
    mu_vacuum: float = 0.004
    p_signal: float = 14.0 / 16.0
    p_decoy: float = 1.0 / 16.0
    p_vacuum: float = 1.0 / 16.0
    basis_bias: float = 0.9375
    pattern_length: int = 4096

    @property
    def intensities(self) -> Tuple[float, float, float]:
        return (self.mu_signal, self.mu_decoy, self.mu_vacuum)

    @property
    def probabilities(self) -> Tuple[float, float, float]:
        return (self.p_signal, self.p_decoy, self.p_vacuum)

    @property
    def sifting_factor(self) -> float:
        """Probability both parties pick the same basis."""
        return self.basis_bias**2 + (1.0 - self.basis_bias) ** 2


@dataclass(frozen=True)
class FiniteKeyConfig:
    """Block size and security parameters of the finite-key analysis."""

    block_bits: float = 5e6
    eps_sec: float = 1e-10
    f_ec: float = 1.15
    eps_cor: Optional[float] = None
    bound: str = "hoeffding"
    max_block_seconds: float = 3600.0

    @property
    def eps_correct(self) -> float:
        return self.eps_sec if self.eps_cor is None else self.eps_cor


@dataclass(frozen=True)
class SystemConfig:
    """Full declarative description of one experiment."""

    array: ArrayConfig = field(default_factory=ArrayConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    receiver: ReceiverConfig = field(default_factory=ReceiverConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    finite_key: FiniteKeyConfig = field(default_factory=FiniteKeyConfig)
    rng: RngSpec = field(default_factory=RngSpec)
    name: str = "custom"

    def with_channel(self, channel: ChannelConfig) -> "SystemConfig":
        return replace(self, channel=channel)

    def at_attenuation(self, attenuation_db: float) -> "SystemConfig":
        return replace(
            self,
            channel=ChannelConfig.at_attenuation(attenuation_db, self.channel.db_per_km),
        )


# Validation


def _finite(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _check_detector(det: DetectorConfig, path: str, errors: List[Tuple[str, str]]) -> None:
    if not _finite(det.spde) or not 0.0 <= det.spde <= 1.0:
        errors.append((f"{path}.spde", f"must lie in [0, 1], got {det.spde}"))
    if not _finite(det.dcr_hz) or det.dcr_hz < 0:
        errors.append((f"{path}.dcr_hz", f"must be finite and >= 0, got {det.dcr_hz}"))
    if not _finite(det.afterpulse_total) or not 0.0 <= det.afterpulse_total < 1.0:
        errors.append(
            (f"{path}.afterpulse_total", f"must lie in [0, 1), got {det.afterpulse_total}")
        )
    if not _finite(det.deadtime_ns) or det.deadtime_ns < 0:
        errors.append((f"{path}.deadtime_ns", f"must be >= 0, got {det.deadtime_ns}"))
    if not _finite(det.trap_tau_ns) or det.trap_tau_ns <= 0:
        errors.append((f"{path}.trap_tau_ns", f"must be > 0, got {det.trap_tau_ns}"))
    if not _finite(det.gate_rate_ghz) or det.gate_rate_ghz <= 0:
        errors.append((f"{path}.gate_rate_ghz", f"must be > 0, got {det.gate_rate_ghz}"))
        return
    period_ps = 1000.0 / det.gate_rate_ghz
    if not _finite(det.gate_width_ps) or not 0.0 < det.gate_width_ps <= period_ps + 1e-9:
        errors.append(
            (
                f"{path}.gate_width_ps",
                f"must lie in (0, {period_ps:g}] (the gate period), got {det.gate_width_ps}",
            )
        )


def _check_array(array: ArrayConfig, path: str, errors: List[Tuple[str, str]]) -> None:
    n = array.n_pixels
    if n < 1:
        errors.append((f"{path}.pixel_configs", "at least one pixel is required"))
        return
    for i, det in enumerate(array.pixel_configs):
        _check_detector(det, f"{path}.pixel_configs[{i}]", errors)
    rates = {det.gate_rate_ghz for det in array.pixel_configs}
    widths = {det.gate_width_ps for det in array.pixel_configs}
    if len(rates) > 1 or len(widths) > 1:
        errors.append(
            (f"{path}.pixel_configs", "all pixels share one gating signal (rate and width)")
        )
    matrix = array.crosstalk_intrinsic
    if len(matrix) != n or any(len(row) != n for row in matrix):
        errors.append(
            (f"{path}.crosstalk_intrinsic", f"must be a {n}x{n} matrix for {n} pixels")
        )
    else:
        for i, row in enumerate(matrix):
            for j, value in enumerate(row):
                entry = f"{path}.crosstalk_intrinsic[{i}][{j}]"
                if not _finite(value) or not 0.0 <= value < 1.0:
                    errors.append((entry, f"must lie in [0, 1), got {value}"))
                elif i == j and value != 0.0:
                    errors.append((entry, "diagonal entries must be 0"))
    if not _finite(array.formation_tau_ns) or array.formation_tau_ns <= 0:
        errors.append(
            (f"{path}.formation_tau_ns", f"must be > 0, got {array.formation_tau_ns}")
        )


def _check_channel(channel: ChannelConfig, path: str, errors: List[Tuple[str, str]]) -> None:
    if channel.attenuation_db is not None and channel.fibre_km is not None:
        errors.append((path, "give either attenuation_db or fibre_km, not both"))
    if channel.attenuation_db is not None and (
        not _finite(channel.attenuation_db) or channel.attenuation_db < 0
    ):
        errors.append(
            (f"{path}.attenuation_db", f"must be finite and >= 0, got {channel.attenuation_db}")
        )
    if channel.fibre_km is not None and (not _finite(channel.fibre_km) or channel.fibre_km < 0):
        errors.append((f"{path}.fibre_km", f"must be finite and >= 0, got {channel.fibre_km}"))
    if not _finite(channel.db_per_km) or channel.db_per_km < 0:
        errors.append((f"{path}.db_per_km", f"must be >= 0, got {channel.db_per_km}"))
    if channel.loss_override_db is not None:
        if channel.fibre_km is None:
            errors.append(
                (f"{path}.loss_override_db", "only applies to a fibre_km channel")
            )
        elif not _finite(channel.loss_override_db) or channel.loss_override_db < 0:
            errors.append(
                (
                    f"{path}.loss_override_db",
                    f"must be finite and >= 0, got {channel.loss_override_db}",
                )
            )


def _check_receiver(
    receiver: ReceiverConfig, array: ArrayConfig, path: str, errors: List[Tuple[str, str]]
) -> None:
    if not _finite(receiver.insertion_loss_db) or receiver.insertion_loss_db < 0:
        errors.append(
            (
                f"{path}.insertion_loss_db",
                f"must be finite and >= 0, got {receiver.insertion_loss_db}",
            )
        )
    if not _finite(receiver.visibility) or not 0.5 < receiver.visibility <= 1.0:
        errors.append((f"{path}.visibility", f"must lie in (0.5, 1], got {receiver.visibility}"))
    fraction = receiver.central_bin_fraction
    if not _finite(fraction) or not 0.0 < fraction <= 1.0:
        errors.append((f"{path}.central_bin_fraction", f"must lie in (0, 1], got {fraction}"))
    if not _finite(receiver.efficiency_mismatch_max) or receiver.efficiency_mismatch_max < 0:
        errors.append(
            (
                f"{path}.efficiency_mismatch_max",
                f"must be >= 0, got {receiver.efficiency_mismatch_max}",
            )
        )
        return
    if array.n_pixels == 2:
        spdes = [det.spde for det in array.pixel_configs]
        mean = sum(spdes) / 2.0
        if mean > 0:
            mismatch = (max(spdes) - min(spdes)) / mean
            if mismatch > receiver.efficiency_mismatch_max + 1e-12:
                errors.append(
                    (
                        f"{path}.efficiency_mismatch_max",
                        f"receiver pixels mismatch by {mismatch:.4f}, above "
                        f"{receiver.efficiency_mismatch_max}",
                    )
                )


def _check_protocol(
    protocol: ProtocolConfig, array: ArrayConfig, path: str, errors: List[Tuple[str, str]]
) -> None:
    if not _finite(protocol.rep_rate_ghz) or protocol.rep_rate_ghz <= 0:
        errors.append((f"{path}.rep_rate_ghz", f"must be > 0, got {protocol.rep_rate_ghz}"))
    elif array.n_pixels >= 1 and abs(protocol.rep_rate_ghz - array.gate_rate_ghz) > 1e-12:
        errors.append(
            (
                f"{path}.rep_rate_ghz",
                f"must equal the detector gate rate {array.gate_rate_ghz} GHz",
            )
        )
    mus = {
        "mu_signal": protocol.mu_signal,
        "mu_decoy": protocol.mu_decoy,
        "mu_vacuum": protocol.mu_vacuum,
    }
    for name, value in mus.items():
        if not _finite(value) or value < 0:
            errors.append((f"{path}.{name}", f"must be finite and >= 0, got {value}"))
    if all(_finite(v) for v in mus.values()):
        if not protocol.mu_signal > protocol.mu_decoy:
            errors.append(
                (
                    f"{path}.mu_decoy",
                    f"{path}.mu_decoy ({protocol.mu_decoy}) must be below "
                    f"{path}.mu_signal ({protocol.mu_signal})",
                )
            )
        if not protocol.mu_decoy > protocol.mu_vacuum:
            errors.append(
                (
                    f"{path}.mu_vacuum",
                    f"{path}.mu_vacuum ({protocol.mu_vacuum}) must be below "
                    f"{path}.mu_decoy ({protocol.mu_decoy})",
                )
            )
        elif protocol.mu_signal <= protocol.mu_decoy + protocol.mu_vacuum:
            errors.append(
                (
                    f"{path}.mu_signal",
                    "decoy bounds need mu_signal > mu_decoy + mu_vacuum",
                )
            )
    probs = {
        "p_signal": protocol.p_signal,
        "p_decoy": protocol.p_decoy,
        "p_vacuum": protocol.p_vacuum,
    }
    for name, value in probs.items():
        if not _finite(value) or not 0.0 <= value <= 1.0:
            errors.append((f"{path}.{name}", f"must lie in [0, 1], got {value}"))
    if all(_finite(v) for v in probs.values()):
        total = sum(probs.values())
        if abs(total - 1.0) > PROBABILITY_TOLERANCE:
            errors.append(
                (
                    f"{path}.p_signal",
                    f"emission probabilities must sum to 1, got {total:.6g}",
                )
            )
    if not _finite(protocol.basis_bias) or not 0.5 <= protocol.basis_bias <= 1.0:
        errors.append((f"{path}.basis_bias", f"must lie in [0.5, 1], got {protocol.basis_bias}"))
    if not isinstance(protocol.pattern_length, int) or protocol.pattern_length < 1:
        errors.append(
            (f"{path}.pattern_length", f"must be an integer >= 1, got {protocol.pattern_length}")
        )


def _check_finite_key(fk: FiniteKeyConfig, path: str, errors: List[Tuple[str, str]]) -> None:
    if not _finite(fk.block_bits) or fk.block_bits <= 0:
        errors.append((f"{path}.block_bits", f"must be > 0, got {fk.block_bits}"))
    if not _finite(fk.eps_sec) or not 0.0 < fk.eps_sec < 1.0:
        errors.append((f"{path}.eps_sec", f"must lie in (0, 1), got {fk.eps_sec}"))
    if fk.eps_cor is not None and (not _finite(fk.eps_cor) or not 0.0 < fk.eps_cor < 1.0):
        errors.append((f"{path}.eps_cor", f"must lie in (0, 1), got {fk.eps_cor}"))
    if not _finite(fk.f_ec) or fk.f_ec < 1.0:
        errors.append((f"{path}.f_ec", f"must be >= 1, got {fk.f_ec}"))
    if fk.bound not in BOUND_METHODS:
        errors.append((f"{path}.bound", f"must be one of {BOUND_METHODS}, got {fk.bound!r}"))
    if not _finite(fk.max_block_seconds) or fk.max_block_seconds <= 0:
        errors.append(
            (f"{path}.max_block_seconds", f"must be > 0, got {fk.max_block_seconds}")
        )


def collect_errors(cfg: SystemConfig) -> List[Tuple[str, str]]:
    """Every invariant violation of `cfg`, as (field path, message) pairs."""
    errors: List[Tuple[str, str]] = []
    _check_array(cfg.array, "array", errors)
    _check_channel(cfg.channel, "channel", errors)
    _check_receiver(cfg.receiver, cfg.array, "receiver", errors)
    _check_protocol(cfg.protocol, cfg.array, "protocol", errors)
    _check_finite_key(cfg.finite_key, "finite_key", errors)
    return errors


def validate_config(cfg: SystemConfig) -> SystemConfig:
    """Return `cfg` if it satisfies every invariant, else raise the full report."""
    errors = collect_errors(cfg)
    if errors:
        raise ConfigValidationError(errors)
    return cfg


# JSON (de)serialisation


def config_to_dict(cfg: SystemConfig) -> Dict[str, Any]:
    data = asdict(cfg)
    data["array"]["n_pixels"] = cfg.array.n_pixels
    data["rng"]["lineage"] = list(cfg.rng.lineage)
    return json.loads(json.dumps(data))


def _build(cls, data: Any, path: str, errors: List[Tuple[str, str]]):
    """Instantiate dataclass `cls` from a mapping, recording unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        errors.append((path, f"expected an object, got {type(data).__name__}"))
        return cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    for key in unknown:
        errors.append((f"{path}.{key}", "unknown field"))
    return cls(**{k: v for k, v in data.items() if k in known})


def _build_array(data: Any, errors: List[Tuple[str, str]]) -> ArrayConfig:
    if data is None:
        return ArrayConfig()
    if not isinstance(data, dict):
        errors.append(("array", "expected an object"))
        return ArrayConfig()
    data = dict(data)
    n_declared = data.pop("n_pixels", None)
    pixels_raw = data.pop("pixel_configs", None)
    if pixels_raw is None:
        count = int(n_declared) if n_declared is not None else 2
        pixels = tuple(DetectorConfig() for _ in range(count))
    else:
        pixels = tuple(
            _build(DetectorConfig, raw, f"array.pixel_configs[{i}]", errors)
            for i, raw in enumerate(pixels_raw)
        )
    if n_declared is not None and int(n_declared) != len(pixels):
        errors.append(
            ("array.n_pixels", f"declares {n_declared} pixels but {len(pixels)} are configured")
        )
    matrix_raw = data.pop("crosstalk_intrinsic", None)
    if matrix_raw is None:
        matrix = tuple(tuple(0.0 for _ in pixels) for _ in pixels)
    else:
        matrix = tuple(tuple(float(v) for v in row) for row in matrix_raw)
    array = _build(ArrayConfig, data, "array", errors)
    return replace(array, pixel_configs=pixels, crosstalk_intrinsic=matrix)


def _build_protocol(data: Any, errors: List[Tuple[str, str]]) -> ProtocolConfig:
    if isinstance(data, dict) and "mu_signal" in data:
        data = dict(data)
        mu = float(data["mu_signal"])
        data.setdefault("mu_decoy", mu * FLUX_RATIOS[1])
        data.setdefault("mu_vacuum", mu * FLUX_RATIOS[2])
    return _build(ProtocolConfig, data, "protocol", errors)


def config_from_dict(data: Dict[str, Any], validate: bool = True) -> SystemConfig:
    """Parse a JSON-shaped mapping, filling defaults, then validate."""
    errors: List[Tuple[str, str]] = []
    if not isinstance(data, dict):
        raise ConfigValidationError([("", "configuration must be a JSON object")])
    known = {f.name for f in fields(SystemConfig)}
    for key in sorted(set(data) - known):
        errors.append((key, "unknown field"))
    try:
        rng_raw = dict(data.get("rng") or {})
        rng_raw["lineage"] = tuple(rng_raw.get("lineage", ()))
        cfg = SystemConfig(
            array=_build_array(data.get("array"), errors),
            channel=_build(ChannelConfig, data.get("channel"), "channel", errors),
            receiver=_build(ReceiverConfig, data.get("receiver"), "receiver", errors),
            protocol=_build_protocol(data.get("protocol"), errors),
            finite_key=_build(FiniteKeyConfig, data.get("finite_key"), "finite_key", errors),
            rng=_build(RngSpec, rng_raw, "rng", errors),
            name=str(data.get("name", "custom")),
        )
    except (TypeError, ValueError) as e:
        errors.append(("", f"malformed configuration: {e}"))
        raise ConfigValidationError(errors)
    if errors:
        errors.extend(collect_errors(cfg))
        raise ConfigValidationError(errors)
    return validate_config(cfg) if validate else cfg


def load_config(path: str) -> SystemConfig:
    """Load and validate a JSON configuration file."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigValidationError([("", f"{path} is not valid JSON: {e}")])
    cfg = config_from_dict(data)
    logging.info(f"Loaded configuration '{cfg.name}' from {path}")
    return cfg


def dump_config(cfg: SystemConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def _load_presets() -> Dict[str, Any]:
    """Load shipped presets from the JSON file next to this module."""
    with open(PRESETS_PATH, "r", encoding="utf-8") as f:
        return json.load(f)


def preset_names() -> List[str]:
    return sorted(_load_presets())


def load_preset(name: str) -> SystemConfig:
    """Validated SystemConfig for a shipped preset (`cold`, `room`, `paper-array`)."""
    presets = _load_presets()
    if name not in presets:
        raise ConfigValidationError(
            [("preset", f"unknown preset {name!r}; choose from {sorted(presets)}")]
        )
    data = dict(presets[name])
    data.setdefault("name", name)
    return config_from_dict(data)
