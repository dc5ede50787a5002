# 🧭 ls-discretize - Test Configuration
# Markers, import path and quiet logging for the test session

import os
import sys
from pathlib import Path

os.environ.setdefault("LS_DEBUG_LEVEL", "WARNING")
os.environ.pop("LS_DEBUG_LOG_FILE", None)
os.environ.setdefault("LS_DEBUG_SLOW_SECONDS", "600")

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

import pytest  # noqa: E402

from ls_discretize.core import CounterStreams  # noqa: E402


def pytest_configure(config):
    for marker, text in (
        ("unit", "fast deterministic tests"),
        ("integration", "tests spanning several modules"),
        ("statistical", "Monte Carlo tests with fixed seeds"),
        ("slow", "desk-scale runs, minutes each"),
        ("e2e", "command line runs writing a run directory"),
    ):
        config.addinivalue_line("markers", f"{marker}: {text}")


@pytest.fixture
def streams():
    return CounterStreams(20240601, block_size=256)
