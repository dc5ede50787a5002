#!/usr/bin/env python3
"""
🧪 ls-discretize experiment runner

    python run_experiment.py run --config experiments/lsm_d1.toml
    python run_experiment.py list suites

Same interface as ``python -m ls_discretize``.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent / "src"))

from ls_discretize.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
