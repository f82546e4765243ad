"""
Helper utility functions for the SPAD array / QKD link simulator.

Contains the worker-pool policy, the run-environment record written into
reports and the duration formatting used in progress logs.
"""

import logging
import math
import os
import platform
import time
from typing import Any, Callable, Dict, List, Optional, Sequence

import joblib
import numpy as np
import scipy
from joblib import Parallel, delayed

THREADS_ENV = "QKDSIM_THREADS"


def format_duration(seconds: float) -> str:
    """Link or wall time for log lines; sub-second spans keep their unit."""
    if not math.isfinite(seconds):
        return "unbounded"
    if seconds < 1e-3:
        return f"{seconds * 1e6:.3g} us"
    if seconds < 1.0:
        return f"{seconds * 1e3:.3g} ms"
    if seconds < 60.0:
        return f"{seconds:.3g} s"
    minutes, secs = divmod(int(round(seconds)), 60)
    if minutes < 60:
        return f"{minutes}m {secs}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h {minutes}m {secs}s"


def run_environment() -> Dict[str, str]:
    """Interpreter, platform and numerical-stack versions recorded with every report."""
    return {
        "python": platform.python_version(),
        "platform": f"{platform.system()} {platform.release()}",
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "joblib": joblib.__version__,
    }


def worker_count(requested: Optional[int] = None) -> int:
    """
    Number of pool workers: the request (or the CPU count), capped by the
    QKDSIM_THREADS environment variable when it is set.
    """
    count = requested if requested and requested > 0 else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            count = min(count, max(1, int(cap)))
        except ValueError:
            logging.warning(f"Ignoring non-integer {THREADS_ENV}={cap!r}")
    return max(1, count)


def parallel_map(
    func: Callable[..., Any], jobs: Sequence[tuple], n_jobs: Optional[int] = None
) -> List[Any]:
    """
    Apply `func(*job)` over `jobs` in a joblib pool; results keep job order.
    """
    jobs = list(jobs)
    workers = min(worker_count(n_jobs), len(jobs)) if jobs else 1
    if workers <= 1:
        return [func(*job) for job in jobs]
    logging.debug(f"Dispatching {len(jobs)} jobs to {workers} workers")
    return Parallel(n_jobs=workers)(delayed(func)(*job) for job in jobs)


def progress_logger(label: str) -> Callable[[int, int, float], None]:
    """Progress callback that logs at DEBUG level every tenth of the run."""
    state = {"next": 0.1}

    def report(done: int, total: int, start_time: float) -> None:
        if total <= 0:
            return
        fraction = done / total
        if fraction >= state["next"] or done >= total:
            elapsed = time.time() - start_time
            logging.debug(f"{label}: {fraction:.0%} after {format_duration(elapsed)}")
            state["next"] = fraction + 0.1

    return report
