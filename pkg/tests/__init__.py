# 🧭 ls-discretize - Test Suite
# Exact identities, seeded Monte Carlo checks and command line runs

"""
Test suite for ls-discretize

Test Categories:
- Unit Tests: measures, group actions, streams, settings, verdicts
- Integration Tests: engines composed through the verification checks
- Statistical Tests: seeded Monte Carlo estimates against exact values
- E2E Tests: command line runs writing a run directory

Desk-scale acceptance runs (10^5 paths) are marked slow and are normally
reached through ``python -m ls_discretize run --suite acceptance``.
"""

from pathlib import Path

# Shared tolerances and sizes
TEST_CONFIG = {
    "exact_tolerance": 1e-10,
    "solve_tolerance": 1e-9,
    "z_sigma": 4.0,
    "small_paths": 2000,
    "lattice_radius": 8,
    "tree_radius": 5,
    "experiments_dir": Path(__file__).resolve().parents[1] / "experiments",
}

__all__ = ["TEST_CONFIG"]
