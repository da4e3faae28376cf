#!/usr/bin/env python3
"""Run the DFRC command line from a source checkout."""

import sys
from pathlib import Path

# Add the repository root to path
sys.path.insert(0, str(Path(__file__).parent))

from src.cli import run_cli

if __name__ == "__main__":
    sys.exit(run_cli(sys.argv[1:]))
