#!/usr/bin/env python3
"""Run a tracking experiment from a config file.

Thin wrapper around the library CLI so experiments can be launched from a
checkout without installing the console script:

    python scripts/run_tracking.py --config configs/desk.yaml --output results/desk --plots
"""

import sys

from beamtrack.cli import main

if __name__ == "__main__":
    sys.exit(main())
