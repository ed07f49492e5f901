#!/usr/bin/env python3
"""Main entry point for the SSA-UNet nowcasting engine."""
import sys

from ssa_nowcast.cli.main import main

if __name__ == "__main__":
    sys.exit(main())
