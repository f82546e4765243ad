#!/usr/bin/env python3
"""
qkd-spad-sim command-line front end.

Sub-commands:
    characterize  blind characterization of a SPAD array (JSON + CSV matrices)
    sweep         raw rate, QBER and secure rate against channel attenuation
    point         one operating point, report printed as JSON
    coupling      chip-to-SPAD coupling loss for a table of measurements
    balance       per-pixel bias for a uniform system efficiency

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 model error.
"""

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

# Setup paths first
SRC_DIR = Path(__file__).resolve().parent
PROJECT_ROOT = SRC_DIR.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from src.backend.characterize import (  # noqa: E402
    BiasCurve,
    balance_biases,
    characterize_array,
    coupling_loss,
)
from src.backend.config import (  # noqa: E402
    ChannelConfig,
    SystemConfig,
    config_to_dict,
    load_config,
    load_preset,
    preset_names,
    validate_config,
)
from src.backend.exceptions import (  # noqa: E402
    ConfigValidationError,
    DomainError,
    ModelError,
    PartialBlockError,
    SimulationError,
)
from src.backend.keyrate import finite_key_report  # noqa: E402
from src.backend.link_model import OperatingPoint, qber  # noqa: E402
from src.backend.protocol_sim import run_to_block_size  # noqa: E402
from src.backend.spad_mc import IlluminationSchedule  # noqa: E402
from src.backend.units import RngSpec  # noqa: E402
from src.utils.helpers import parallel_map, progress_logger, run_environment  # noqa: E402
from src.utils.report_io import (  # noqa: E402
    read_csv_rows,
    to_jsonable,
    write_csv,
    write_json,
    write_matrix_csv,
)

SWEEP_HEADER = [
    "attenuation_db",
    "equivalent_km",
    "raw_rate_hz",
    "qber",
    "secure_rate_hz",
    "mode",
]
COUPLING_COLUMNS = ("system_spde_pct", "channel_loss_db", "spad_spde_pct")
MODES = ("analytic", "montecarlo", "both")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_MODEL = 4


@dataclass(frozen=True)
class SweepSpec:
    """Attenuation grid (dB) and evaluation mode of a sweep."""

    grid_db: tuple
    mode: str = "analytic"

    def __post_init__(self):
        if not self.grid_db:
            raise DomainError("Sweep grid is empty")
        if any(not math.isfinite(x) for x in self.grid_db):
            raise DomainError("Sweep grid values must be finite")
        if any(b <= a for a, b in zip(self.grid_db, self.grid_db[1:])):
            raise DomainError("Sweep grid must be strictly increasing")
        if self.mode not in MODES:
            raise DomainError(f"Unknown mode {self.mode!r}; choose from {MODES}")

    @property
    def modes(self) -> List[str]:
        return ["analytic", "montecarlo"] if self.mode == "both" else [self.mode]

    @classmethod
    def from_range(cls, start: float, stop: float, step: float, mode: str) -> "SweepSpec":
        if step <= 0:
            raise DomainError(f"Sweep step must be > 0, got {step}")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        grid = tuple(round(start + i * step, 10) for i in range(max(count, 0)))
        return cls(grid, mode)


def _resolve_config(args) -> SystemConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = load_preset(args.preset)
        logging.info(f"Using preset '{args.preset}'")
    if args.seed is not None:
        cfg = replace(cfg, rng=RngSpec(args.seed, cfg.rng.stream_id, cfg.rng.lineage))
    return cfg


def _channel_from_args(args, cfg: SystemConfig) -> ChannelConfig:
    db_per_km = args.db_per_km if args.db_per_km is not None else cfg.channel.db_per_km
    if getattr(args, "fibre_km", None) is not None:
        return ChannelConfig(
            attenuation_db=None,
            fibre_km=args.fibre_km,
            db_per_km=db_per_km,
            loss_override_db=args.loss_override_db,
        )
    override = getattr(args, "loss_override_db", None)
    if getattr(args, "attenuation_db", None) is not None:
        return ChannelConfig(
            attenuation_db=args.attenuation_db,
            db_per_km=db_per_km,
            loss_override_db=override,
        )
    if override is not None:
        return replace(cfg.channel, db_per_km=db_per_km, loss_override_db=override)
    return replace(cfg.channel, db_per_km=db_per_km)


# Point evaluations


def _analytic_point(op: OperatingPoint, fk) -> dict:
    breakdown = qber(op)
    report = finite_key_report(op, fk)
    return {
        "mode": "analytic",
        "attenuation_db": op.channel.total_loss_db,
        "equivalent_km": op.channel.equivalent_km,
        "raw_rate_hz": breakdown.raw_rate_hz,
        "qber": breakdown.qber,
        "secure_rate_hz": report.secure_rate_hz,
        "breakdown": breakdown.to_dict(),
        "report": report.to_dict(),
    }


def _montecarlo_point(op: OperatingPoint, fk, rng: RngSpec, verbose: bool = False) -> dict:
    progress = progress_logger(f"{op.channel.total_loss_db:g} dB block") if verbose else None
    try:
        block, report = run_to_block_size(op, fk, rng, progress_callback=progress)
    except PartialBlockError as e:
        logging.warning(f"{op.channel.total_loss_db:g} dB: {e}")
        return {
            "mode": "montecarlo",
            "attenuation_db": op.channel.total_loss_db,
            "equivalent_km": op.channel.equivalent_km,
            "raw_rate_hz": math.nan,
            "qber": math.nan,
            "secure_rate_hz": 0.0,
            "error": str(e),
        }
    duration = block.counts.duration_s
    return {
        "mode": "montecarlo",
        "attenuation_db": op.channel.total_loss_db,
        "equivalent_km": op.channel.equivalent_km,
        "raw_rate_hz": sum(block.detections) / duration if duration > 0 else 0.0,
        "qber": block.qber,
        "secure_rate_hz": report.secure_rate_hz,
        "block": block.to_dict(),
        "report": report.to_dict(),
    }


# Commands


def cmd_characterize(args) -> int:
    if args.gates is None or args.gates < 1:
        raise DomainError(f"--gates must be a positive integer, got {args.gates}")
    cfg = _resolve_config(args)
    schedule = IlluminationSchedule(
        period_gates=args.period, mean_photons=args.mean_photons, phase_gate=0
    )
    report = characterize_array(
        cfg.array,
        schedule,
        args.gates,
        cfg.rng,
        n_trials=args.trials,
        with_specificity=not args.no_specificity,
        update_callback=logging.info,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config": config_to_dict(cfg), "environment": run_environment(), **report.to_dict()}
    write_json(str(out / "characterization.json"), payload)
    write_matrix_csv(str(out / "crosstalk_sync.csv"), report.crosstalk.sync)
    write_matrix_csv(str(out / "crosstalk_async.csv"), report.crosstalk.async_)
    if report.specificity is not None:
        write_matrix_csv(str(out / "specificity_rates_hz.csv"), report.specificity.rates_hz)
    return EXIT_OK


def _sweep_job(op, fk, mode, rng, verbose):
    if mode == "analytic":
        return _analytic_point(op, fk)
    return _montecarlo_point(op, fk, rng, verbose)


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    if args.grid:
        try:
            grid = tuple(float(x) for x in args.grid.split(",") if x.strip())
        except ValueError:
            raise DomainError(f"--grid must list numbers separated by commas, got {args.grid!r}")
        spec = SweepSpec(grid, args.mode)
    else:
        spec = SweepSpec.from_range(args.start, args.stop, args.step, args.mode)
    db_per_km = args.db_per_km if args.db_per_km is not None else cfg.channel.db_per_km
    base = OperatingPoint.from_config(cfg)

    points = []
    for mode in spec.modes:
        jobs = []
        for i, db in enumerate(spec.grid_db):
            channel = ChannelConfig.at_attenuation(db, db_per_km)
            validate_config(cfg.with_channel(channel))
            op = replace(base, channel=channel)
            jobs.append((op, cfg.finite_key, mode, cfg.rng.substream(i), args.verbose))
        if mode == "analytic":
            points.extend(parallel_map(_sweep_job, jobs))
        else:
            # block runs parallelize internally
            points.extend(_sweep_job(*job) for job in jobs)

    rows = (
        tuple(p[name] for name in SWEEP_HEADER)
        for p in points
    )
    out = args.out or "sweep.csv"
    write_csv(out, SWEEP_HEADER, rows)
    sidecar = os.path.splitext(out)[0] + ".json"
    write_json(
        sidecar,
        {"config": config_to_dict(cfg), "environment": run_environment(), "points": points},
    )
    return EXIT_OK


def cmd_point(args) -> int:
    cfg = _resolve_config(args)
    cfg = validate_config(cfg.with_channel(_channel_from_args(args, cfg)))
    op = OperatingPoint.from_config(cfg)
    results = []
    modes = ["analytic", "montecarlo"] if args.mode == "both" else [args.mode]
    for mode in modes:
        results.append(_sweep_job(op, cfg.finite_key, mode, cfg.rng, args.verbose))
    payload = results[0] if len(results) == 1 else {"points": results}
    if args.out:
        write_json(args.out, payload)
    print(json.dumps(to_jsonable(payload), indent=2, sort_keys=True))
    return EXIT_OK


def coupling_table(rows: Sequence[dict]) -> List[list]:
    """Coupling loss per measurement row; errors name the CSV line."""
    if rows:
        missing = [c for c in COUPLING_COLUMNS if c not in rows[0]]
        if missing:
            raise DomainError(f"Coupling table is missing column(s): {', '.join(missing)}")
    table = []
    for line, row in enumerate(rows, start=2):
        try:
            system = float(row[COUPLING_COLUMNS[0]]) / 100.0
            loss_db = float(row[COUPLING_COLUMNS[1]])
            spad = float(row[COUPLING_COLUMNS[2]]) / 100.0
        except (TypeError, ValueError):
            raise DomainError(f"Line {line}: malformed coupling row {dict(row)}")
        try:
            loss = coupling_loss(system, loss_db, spad)
        except DomainError as e:
            raise DomainError(f"Line {line}: {e}")
        table.append([row[c] for c in COUPLING_COLUMNS] + [f"{loss:.2f}"])
    return table


def cmd_coupling(args) -> int:
    rows = read_csv_rows(args.table)
    if not rows:
        raise DomainError(f"{args.table} has no measurement rows")
    table = coupling_table(rows)
    header = list(COUPLING_COLUMNS) + ["coupling_loss_db"]
    if args.out:
        write_csv(args.out, header, table)
    else:
        print(",".join(header))
        for row in table:
            print(",".join(str(v) for v in row))
    return EXIT_OK


def cmd_balance(args) -> int:
    with open(args.curves, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise DomainError(f"{args.curves} is not valid JSON: {e}")
    try:
        curves = [BiasCurve.from_dict(c) for c in data["curves"]]
        losses = [float(x) for x in data["channel_losses_db"]]
        target = float(data["target_system_spde"])
    except (KeyError, TypeError) as e:
        raise DomainError(f"{args.curves} is missing a field: {e}")
    result = balance_biases(curves, losses, target)
    payload = result.to_dict()
    if args.out:
        write_json(args.out, payload)
    print(json.dumps(to_jsonable(payload), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qkd-spad-sim",
        description="GHz-gated SPAD array and decoy-state BB84 link simulator",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        group = p.add_mutually_exclusive_group()
        group.add_argument("--config", help="JSON configuration file")
        group.add_argument(
            "--preset", default="cold", choices=preset_names(), help="shipped preset"
        )
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")

    def add_channel(p):
        p.add_argument("--db-per-km", type=float, default=None, help="fibre loss for equivalent km")

    p = sub.add_parser("characterize", help="blind characterization of the array")
    add_config(p)
    p.add_argument("--gates", type=int, required=True, help="gates per run")
    p.add_argument("--trials", type=int, default=1, help="independent trials per run")
    p.add_argument("--period", type=int, default=64, help="illumination period in gates")
    p.add_argument("--mean-photons", type=float, default=0.2, help="photons per laser pulse")
    p.add_argument("--no-specificity", action="store_true")
    p.add_argument("--out", default="characterization", help="output directory")
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("sweep", help="rates against channel attenuation")
    add_config(p)
    add_channel(p)
    p.add_argument("--start", type=float, default=0.0)
    p.add_argument("--stop", type=float, default=26.0)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--grid", help="explicit comma-separated attenuation list (dB)")
    p.add_argument("--mode", choices=MODES, default="analytic")
    p.add_argument("--out", help="CSV path; a JSON sidecar is written next to it")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("point", help="single operating point")
    add_config(p)
    add_channel(p)
    where = p.add_mutually_exclusive_group()
    where.add_argument("--attenuation-db", type=float, default=None)
    where.add_argument("--fibre-km", type=float, default=None)
    p.add_argument("--loss-override-db", type=float, default=None, help="measured spool loss")
    p.add_argument("--mode", choices=MODES, default="analytic")
    p.add_argument("--out", help="also write the report to this JSON file")
    p.set_defaults(func=cmd_point)

    p = sub.add_parser("coupling", help="coupling loss for a measurement table")
    p.add_argument("table", help="CSV with system_spde_pct, channel_loss_db, spad_spde_pct")
    p.add_argument("--out", help="output CSV (default: standard output)")
    p.set_defaults(func=cmd_coupling)

    p = sub.add_parser("balance", help="per-pixel bias balancing")
    p.add_argument("curves", help="JSON with curves, channel_losses_db, target_system_spde")
    p.add_argument("--out", help="also write the result to this JSON file")
    p.set_defaults(func=cmd_balance)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the application."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    logging.debug(f"qkd-spad-sim environment: {run_environment()}")
    try:
        return args.func(args)
    except ConfigValidationError as e:
        print(f"{e.title}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except DomainError as e:
        print(f"{e.title}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ModelError as e:
        print(f"{e.title}: {e}", file=sys.stderr)
        return EXIT_MODEL
    except SimulationError as e:
        print(f"{e.title}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"I/O Error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
