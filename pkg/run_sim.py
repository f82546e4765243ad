#!/usr/bin/env python3
"""
qkd-spad-sim launcher

Checks the interpreter and the numerical stack, then hands the command line
to src.main. `--cleanup` removes caches and default report outputs instead.
"""

import glob
import importlib.util
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import List

SCRIPT_DIR = Path(__file__).parent.resolve()

# Required Python packages (import name, distribution name)
REQUIRED_PACKAGES: List[tuple] = [
    ("numpy", "numpy"),
    ("scipy", "scipy"),
    ("joblib", "joblib"),
    ("numba", "numba"),
]


def check_python_version() -> bool:
    """Check if Python version meets requirements."""
    if sys.version_info < (3, 8):
        print(f"ERROR: Python 3.8+ required. Current version: {sys.version}")
        print("Please upgrade Python and try again.")
        return False
    return True


def check_dependencies() -> bool:
    """Check that the numerical stack is importable."""
    missing = [dist for name, dist in REQUIRED_PACKAGES if not importlib.util.find_spec(name)]
    if missing:
        print(f"ERROR: Missing required packages: {', '.join(missing)}")
        print("\nTo install them:")
        print(f"  pip install {' '.join(missing)}")
        print("or, from the project root:")
        print("  pip install .")
        return False
    return True


def cleanup_workspace() -> None:
    """Remove caches and the default output locations of the CLI."""
    folder_targets = ["characterization", ".pytest_cache", "__pycache__"]
    file_patterns = ["sweep.csv", "sweep.json", "*.log", "*.pyc"]
    removed = []
    for folder in folder_targets:
        if os.path.isdir(folder):
            shutil.rmtree(folder, ignore_errors=True)
            removed.append(folder + "/ (dir)")
    # numba's on-disk kernel cache lives next to each module
    for root, dirs, files in os.walk(".", topdown=False):
        for d in dirs:
            if d == "__pycache__":
                path = os.path.join(root, d)
                shutil.rmtree(path, ignore_errors=True)
                removed.append(os.path.relpath(path) + "/ (dir, recursive)")
    for pattern in file_patterns:
        for file in glob.glob(pattern):
            if os.path.isfile(file):
                os.remove(file)
                removed.append(file)
    print("Cleanup complete. Removed:")
    for r in removed:
        print(f"  - {r}")
    if not removed:
        print("Nothing to clean up.")


def main() -> int:
    """Main entry point for the launcher."""
    if "--cleanup" in sys.argv[1:]:
        cleanup_workspace()
        return 0
    if not check_python_version() or not check_dependencies():
        return 1
    if str(SCRIPT_DIR) not in sys.path:
        sys.path.insert(0, str(SCRIPT_DIR))
    from src.main import main as cli_main

    try:
        return cli_main(sys.argv[1:])
    except KeyboardInterrupt:
        logging.warning("Run cancelled by user.")
        return 1


if __name__ == "__main__":
    sys.exit(main())
