#!/usr/bin/env python3
"""
sepfilter - Repository Entry Point

Runs the command-line front end from a source checkout without installing
the package, e.g. ``python run.py equivalence --config scenarios/linear_gaussian.toml``.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from sepfilter.main import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
