"""
🧭 ls-discretize: equivariant discretization of diffusions and random walks

Engines:

* ``discrete_walk``: hitting-measure discretization of a Γ-invariant walk on
  a truncation window, with exact sparse solves.
* ``diffusion`` and ``ls_core``: LS-data, sweeping and the recursive
  LS-measures of a diffusion on a deck-transformation cover of the torus.
* ``verify``: checks that certify the structural identities, and the
  suites the CLI runs.
"""

__version__ = "1.0.0"

from .core import CounterStreams, FiniteMeasure, Purpose, tv_distance
from .debug_utils import LSDiscretizeError
from .settings import settings

__all__ = [
    "__version__",
    "CounterStreams",
    "FiniteMeasure",
    "LSDiscretizeError",
    "Purpose",
    "settings",
    "tv_distance",
]
