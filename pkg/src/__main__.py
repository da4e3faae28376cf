"""Main entry point for the DFRC command line."""

import sys

from .cli import run_cli

if __name__ == "__main__":
    try:
        sys.exit(run_cli(sys.argv[1:]))
    except KeyboardInterrupt:
        print("\nRun stopped by user", file=sys.stderr)
        sys.exit(130)
