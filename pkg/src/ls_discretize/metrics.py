"""
📊 Prometheus counters for ls-discretize runs.

Metrics live in a private registry so that library use never touches the
process-global default registry; the CLI writes them to ``meta/metrics.prom``.
"""

import time
from contextlib import contextmanager
from pathlib import Path
from typing import Union

from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile

REGISTRY = CollectorRegistry(auto_describe=True)

PATHS_SIMULATED = Counter('ls_paths_simulated_total', 'Simulated sample paths', ['engine'], registry=REGISTRY)
LINEAR_SOLVES = Counter('ls_linear_solves_total', 'Sparse linear solves', ['method'], registry=REGISTRY)
CHECKS = Counter('ls_checks_total', 'Verification checks by verdict', ['verdict'], registry=REGISTRY)
SWEEP_ROUNDS = Counter('ls_sweep_rounds_total', 'LS sweep rounds', registry=REGISTRY)
OPERATION_SECONDS = Histogram('ls_operation_seconds', 'Operation wall time', ['operation'], registry=REGISTRY)


@contextmanager
def timed(operation: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        OPERATION_SECONDS.labels(operation=operation).observe(time.perf_counter() - start)


def write_metrics(path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), REGISTRY)
