"""
Utility package for the SPAD array / QKD link simulator.

Contains the worker-pool helpers and the report writers.
"""

from .helpers import format_duration, parallel_map, run_environment, worker_count
from .report_io import write_csv, write_json

__all__ = [
    "format_duration",
    "run_environment",
    "parallel_map",
    "worker_count",
    "write_csv",
    "write_json",
]
