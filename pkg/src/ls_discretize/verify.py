"""
✅ Verification checks for ls-discretize

Each check binds the engines to one structural property and returns a
``CheckReport``. The verdict is a pure function of the statistic, its
threshold and its standard error (``derive_verdict``); parts of a check
combine with fail over inconclusive over pass.

Checks draw from their own ``CounterStreams`` lineage, derived from the
run seed and the (check, model, position) of the entry, so suites are
reproducible whatever the scheduling. Discrete checks compare exact
solves; continuous checks compare Monte Carlo estimates within
``settings.Z_SIGMA`` standard errors or through p-values at
``settings.ALPHA``.
"""

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy import stats
from scipy.spatial.distance import cdist

from .core import CounterStreams, FiniteMeasure, Purpose, run_blocks, tv_distance
from .debug_utils import (ConfigError, DebugContext, ErrorSeverity, LSDiscretizeError, PreconditionError,
                          debug_logger, debug_timer, get_logger)
from .diffusion import (BoundaryBinning, DeckPoint, DriftModel, RegionSpec, SiteLattice, allocate_paths,
                        exit_measure_estimate, hit_time, projection_law_check, sojourn_green_estimate)
from .discrete_walk import (HarmonicFunction, HittingFamily, WalkModel, balayage, branch_hitting,
                            branch_hitting_word, build_walk_model, extend_harmonic, green, harmonic_residual,
                            hitting_recursion_residual, kernel_power, martin_kernel, mu_green, sample_tree_paths,
                            solve_dirichlet)
from .ls_core import (LSData, LSMeasureResult, build_ls_data, chain_green_estimate, ls_measure_recursive,
                      lsm_property_rhs3, lsm_property_rhs4, residual_decay_report, sample_discretized_chain)
from .metrics import CHECKS, PATHS_SIMULATED
from .settings import LSDataSpec, ModelSpec, SuiteEntry, settings

logger = get_logger(__name__)

PASS = "pass"
FAIL = "fail"
INCONCLUSIVE = "inconclusive"
VERDICT_ORDER = (PASS, INCONCLUSIVE, FAIL)
VERDICT_KINDS = ("pvalue", "z", "at_most", "tolerance", "strict_below")

Site = Tuple[int, ...]

# ============================================================================
# ⚖️ VERDICTS
# ============================================================================


def derive_verdict(kind: str, statistic: float, threshold: Optional[float] = None, se: float = 0.0,
                   z: Optional[float] = None, alpha: Optional[float] = None, n_tests: int = 1) -> str:
    """Verdict from a statistic; pure in its arguments.

    ``pvalue``: Bonferroni-adjusted p above alpha passes.
    ``z``: |s| within z·SE (plus threshold) passes.
    ``at_most``: s within z·SE above the threshold passes.
    ``tolerance``: the z·SE interval below the threshold passes, above it
    fails, straddling it is inconclusive.
    ``strict_below``: s below −z·SE passes, above z·SE fails.
    A non-finite statistic or SE is always inconclusive.
    """
    if kind not in VERDICT_KINDS:
        raise ValueError(f"unknown verdict kind '{kind}'")
    z = settings.Z_SIGMA if z is None else z
    alpha = settings.ALPHA if alpha is None else alpha
    s, se = float(statistic), float(se)
    if not (math.isfinite(s) and math.isfinite(se)):
        return INCONCLUSIVE
    thr = 0.0 if threshold is None else float(threshold)
    if kind == "pvalue":
        return PASS if min(1.0, s * max(int(n_tests), 1)) > alpha else FAIL
    if kind == "z":
        return PASS if abs(s) <= z * se + thr else FAIL
    if kind == "at_most":
        return PASS if s <= z * se + thr else FAIL
    if kind == "tolerance":
        if s + z * se <= thr:
            return PASS
        if s - z * se > thr:
            return FAIL
        return INCONCLUSIVE
    if s < -z * se:
        return PASS
    if s > z * se:
        return FAIL
    return INCONCLUSIVE


def combine_verdicts(verdicts: Iterable[str]) -> str:
    verdicts = list(verdicts)
    if FAIL in verdicts:
        return FAIL
    if INCONCLUSIVE in verdicts:
        return INCONCLUSIVE
    return PASS


@dataclass(frozen=True)
class CheckPart:
    label: str
    kind: str
    statistic: float
    threshold: Optional[float]
    se: float
    n: int
    verdict: str
    n_tests: int = 1


def part(label: str, kind: str, statistic: float, threshold: Optional[float] = None, se: float = 0.0, n: int = 0,
         n_tests: int = 1, verdict: Optional[str] = None) -> CheckPart:
    """One tested quantity; ``verdict`` overrides the derived one (e.g. a too-short horizon)."""
    derived = derive_verdict(kind, statistic, threshold, se, n_tests=n_tests)
    return CheckPart(label, kind, float(statistic), threshold, float(se), int(n), verdict or derived, n_tests)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k if isinstance(k, str) else _label(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else str(v)
    return value


def _label(key: Any) -> str:
    if isinstance(key, tuple):
        return " ".join(str(k) for k in key)
    return str(key)


@dataclass
class CheckReport:
    """Outcome of one check on one model; ``tallies`` rows carry estimate, se and n."""
    check: str
    claim: str
    model: str
    verdict: str
    kind: str
    statistic: float
    threshold: Optional[float]
    se: float
    seed: int
    n: int
    details: Dict[str, Any] = field(default_factory=dict)
    tallies: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)
    ensembles: Dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable({
            "check": self.check,
            "property": self.claim,
            "model": self.model,
            "verdict": self.verdict,
            "kind": self.kind,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "se": self.se,
            "seed": self.seed,
            "n": self.n,
            "details": self.details,
            "tallies": sorted(self.tallies),
        })


def _lead_part(parts: Sequence[CheckPart], verdict: str) -> CheckPart:
    same = [p for p in parts if p.verdict == verdict]
    return same[0] if same else parts[0]


def _report(ctx: 'CheckContext', check: str, parts: Sequence[CheckPart], details: Optional[Dict[str, Any]] = None,
            tallies: Optional[Dict[str, List[Dict[str, Any]]]] = None,
            ensembles: Optional[Dict[str, Any]] = None) -> CheckReport:
    if not parts:
        raise PreconditionError(f"{check} produced nothing to test on {ctx.model_id}", {"check": check})
    verdict = combine_verdicts(p.verdict for p in parts)
    lead = _lead_part(parts, verdict)
    details = dict(details or {})
    details["parts"] = [asdict(p) for p in parts]
    details["lineage"] = ctx.lineage
    report = CheckReport(check, CHECK_REGISTRY[check][1], ctx.model_id, verdict, lead.kind, lead.statistic,
                         lead.threshold, lead.se, ctx.seed, max(p.n for p in parts), details, tallies or {},
                         ensembles or {})
    CHECKS.labels(verdict=verdict).inc()
    icon = {PASS: "✅", FAIL: "❌", INCONCLUSIVE: "❔"}[verdict]
    logger.info(f"{icon} {check} on {ctx.model_id}: {verdict} ({lead.label}: {lead.kind} "
                f"statistic {lead.statistic:.4g}, se {lead.se:.3g})")
    return report

# ============================================================================
# 📏 STATISTICAL TESTS
# ============================================================================


@dataclass(frozen=True)
class StatResult:
    name: str
    statistic: float
    pvalue: float
    df: Optional[int]
    n: int


def _nan_result(name: str, n: int = 0) -> StatResult:
    return StatResult(name, math.nan, math.nan, None, n)


def chi2_goodness_of_fit(counts, probs) -> StatResult:
    """Pearson χ² of counts against probabilities; adjacent bins merge until each expects ≥ 5."""
    counts = np.asarray(counts, dtype=float).ravel()
    probs = np.asarray(probs, dtype=float).ravel()
    n = int(counts.sum())
    if n == 0 or probs.sum() <= 0:
        return _nan_result("chi2-gof", n)
    expected = n * probs / probs.sum()
    obs_groups, exp_groups = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(counts, expected):
        o_acc += o
        e_acc += e
        if e_acc >= 5.0:
            obs_groups.append(o_acc)
            exp_groups.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0 or o_acc > 0:
        if obs_groups:
            obs_groups[-1] += o_acc
            exp_groups[-1] += e_acc
        else:
            obs_groups.append(o_acc)
            exp_groups.append(e_acc)
    if len(obs_groups) < 2:
        return _nan_result("chi2-gof", n)
    res = stats.chisquare(np.array(obs_groups), np.array(exp_groups))
    return StatResult("chi2-gof", float(res.statistic), float(res.pvalue), len(obs_groups) - 1, n)


def _pool_sparse(table: np.ndarray, axis: int, min_total: float = 5.0) -> np.ndarray:
    totals = table.sum(axis=1 - axis)
    sparse_lines = totals < min_total
    if not sparse_lines.any():
        return table
    keep = np.compress(~sparse_lines, table, axis=axis)
    pooled = np.compress(sparse_lines, table, axis=axis).sum(axis=axis, keepdims=True)
    if pooled.sum() <= 0:
        return keep
    return np.concatenate([keep, pooled], axis=axis)


def chi2_homogeneity(table) -> StatResult:
    """χ² test that the rows of a contingency table share one distribution.

    Empty rows and columns are dropped and sparse columns (then rows) are
    pooled; fewer than two rows or columns left gives NaN.
    """
    table = np.asarray(table, dtype=float)
    n = int(table.sum())
    if table.ndim != 2 or n == 0:
        return _nan_result("chi2-homogeneity", n)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    table = _pool_sparse(table, axis=1, min_total=10.0)
    table = _pool_sparse(table, axis=0, min_total=5.0)
    if table.shape[0] < 2 or table.shape[1] < 2:
        return _nan_result("chi2-homogeneity", n)
    res = stats.chi2_contingency(table, correction=False)
    return StatResult("chi2-homogeneity", float(res.statistic), float(res.pvalue), int(res.dof), n)


def ks_one_sample(samples, cdf: Union[str, Callable]) -> StatResult:
    samples = np.asarray(samples, dtype=float).ravel()
    if len(samples) < 2:
        return _nan_result("ks-one-sample", len(samples))
    res = stats.kstest(samples, cdf)
    return StatResult("ks-one-sample", float(res.statistic), float(res.pvalue), None, len(samples))


def ks_two_sample(a, b) -> StatResult:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) < 2 or len(b) < 2:
        return _nan_result("ks-two-sample", len(a) + len(b))
    res = stats.ks_2samp(a, b)
    return StatResult("ks-two-sample", float(res.statistic), float(res.pvalue), None, len(a) + len(b))


def energy_distance_test(a, b, rng: np.random.Generator, n_perm: int = 199) -> StatResult:
    """Euclidean energy-distance permutation test."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) < 2 or len(b) < 2:
        return _nan_result("energy", len(a) + len(b))
    dist = cdist(np.vstack([a, b]), np.vstack([a, b]))

    def energy(mask):
        return 2 * dist[np.ix_(mask, ~mask)].mean() - dist[np.ix_(mask, mask)].mean() \
            - dist[np.ix_(~mask, ~mask)].mean()

    labels = np.zeros(len(a) + len(b), dtype=bool)
    labels[:len(a)] = True
    observed = energy(labels)
    exceed = sum(energy(rng.permutation(labels)) >= observed for _ in range(n_perm))
    return StatResult("energy", float(observed), (exceed + 1) / (n_perm + 1), None, len(a) + len(b))


def wald_chi2(p1, se1, p2, se2) -> StatResult:
    """Σ (p1 − p2)² / (se1² + se2²) over bins with positive variance."""
    p1, se1, p2, se2 = (np.asarray(v, dtype=float).ravel() for v in (p1, se1, p2, se2))
    var = se1 ** 2 + se2 ** 2
    kept = var > 0
    diff = p1 - p2
    if not kept.any():
        p = 1.0 if np.all(diff == 0) else math.nan
        return StatResult("wald-chi2", 0.0 if p == 1.0 else math.nan, p, 0, len(p1))
    statistic = float((diff[kept] ** 2 / var[kept]).sum())
    df = max(int(kept.sum()) - 1, 1)
    return StatResult("wald-chi2", statistic, float(stats.chi2.sf(statistic, df)), df, len(p1))


def confidence_interval(estimate: float, se: float, z: Optional[float] = None) -> Tuple[float, float]:
    z = settings.Z_SIGMA if z is None else z
    return estimate - z * se, estimate + z * se


def stat_tests(samples, reference=None, kind: Optional[str] = None, rng: Optional[np.random.Generator] = None,
               n_perm: int = 199) -> Dict[str, StatResult]:
    """Dispatch to the standard tests and return them by name.

    ``gof``: counts against probabilities; ``homogeneity``: a contingency
    table; ``ks``: samples against a CDF; ``two-sample``: per-coordinate
    KS plus the energy test. Without ``kind`` it is inferred from the
    arguments.
    """
    if kind is None:
        if reference is None:
            kind = "homogeneity"
        elif callable(reference) or isinstance(reference, str):
            kind = "ks"
        elif np.ndim(samples) == 1 and np.ndim(reference) == 1 and len(samples) == len(reference) \
                and np.all(np.asarray(samples) == np.round(samples)) and abs(np.sum(reference) - 1.0) < 1e-9:
            kind = "gof"
        else:
            kind = "two-sample"
    if kind == "gof":
        return {"chi2-gof": chi2_goodness_of_fit(samples, reference)}
    if kind == "homogeneity":
        return {"chi2-homogeneity": chi2_homogeneity(samples)}
    if kind == "ks":
        return {"ks-one-sample": ks_one_sample(samples, reference)}
    if kind != "two-sample":
        raise ValueError(f"unknown test kind '{kind}'")
    a = np.asarray(samples, dtype=float)
    b = np.asarray(reference, dtype=float)
    a2 = a[:, None] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    out = {f"ks-{i}": ks_two_sample(a2[:, i], b2[:, i]) for i in range(a2.shape[1])}
    out["energy"] = energy_distance_test(a2, b2, rng or np.random.default_rng(0), n_perm)
    return out


@dataclass(frozen=True, eq=False)
class MarkovTables:
    labels: np.ndarray
    homogeneity: np.ndarray
    memory: np.ndarray


def markov_tables(sites, counts=None) -> MarkovTables:
    """Displacement tallies of chains (n, k, d): per step, and (previous, next) pairs.

    Step j of a path counts when the path reached index j + 1.
    """
    sites = np.asarray(sites, dtype=np.int64)
    if sites.ndim == 2:
        sites = sites[:, :, None]
    n, k, _ = sites.shape
    counts = np.full(n, k) if counts is None else np.asarray(counts)
    disp = sites[:, 1:] - sites[:, :-1]
    valid = np.arange(1, k)[None, :] < counts[:, None]
    if not valid.any():
        empty = np.zeros((0, 0))
        return MarkovTables(np.zeros((0, sites.shape[2]), dtype=np.int64), empty, empty)
    labels, inverse = np.unique(disp[valid], axis=0, return_inverse=True)
    codes = np.full(valid.shape, -1, dtype=np.int64)
    codes[valid] = inverse.reshape(-1)
    homogeneity = np.zeros((k - 1, len(labels)))
    np.add.at(homogeneity, (np.nonzero(valid)[1], codes[valid]), 1)
    prev, nxt = codes[:, :-1].ravel(), codes[:, 1:].ravel()
    both = (prev >= 0) & (nxt >= 0)
    memory = np.zeros((len(labels), len(labels)))
    np.add.at(memory, (prev[both], nxt[both]), 1)
    return MarkovTables(labels, homogeneity, memory)


@dataclass(frozen=True)
class MarkovTestResult:
    homogeneity: StatResult
    memory: StatResult
    tables: MarkovTables

    @property
    def adjusted_p(self) -> float:
        p = min(self.homogeneity.pvalue, self.memory.pvalue)
        return min(1.0, 2 * p) if math.isfinite(p) else math.nan


def markov_test(sites, counts=None, min_count: int = 50) -> MarkovTestResult:
    """χ² homogeneity of displacements across steps and independence of consecutive displacements."""
    tables = markov_tables(sites, counts)
    hom = chi2_homogeneity(tables.homogeneity) if tables.homogeneity.sum() >= min_count \
        else _nan_result("chi2-homogeneity", int(tables.homogeneity.sum()))
    mem = chi2_homogeneity(tables.memory) if tables.memory.sum() >= min_count \
        else _nan_result("chi2-memory", int(tables.memory.sum()))
    return MarkovTestResult(hom, StatResult("chi2-memory", mem.statistic, mem.pvalue, mem.df, mem.n), tables)

# ============================================================================
# 🗂️ MODEL CATALOG AND CHECK CONTEXT
# ============================================================================

MODEL_CATALOG: Dict[str, Dict[str, Any]] = {
    "torus-cover-d1": {"family": "torus-cover-d1"},
    "torus-cover-d2": {"family": "torus-cover-d2"},
    "torus-cover-d3": {"family": "torus-cover-d3"},
    "torus-cover-d2-drift": {"family": "torus-cover-d2", "phi": [[1, 0, 0.3]]},
    "zd-lattice": {"family": "zd-lattice", "d": 2, "radius": 10},
    "zd-lattice-d3": {"family": "zd-lattice", "d": 3, "radius": 8},
    "free-group-tree": {"family": "free-group-tree", "modulus": 2, "radius": 8},
    "sublattice-orbit": {"family": "sublattice-orbit", "d": 2, "modulus": 2, "radius": 10},
    "sublattice-orbit-d3": {"family": "sublattice-orbit", "d": 3, "modulus": 2, "radius": 10},
    "cycle": {"family": "cycle", "n": 7},
    "biased-line": {"family": "biased-line", "radius": 40},
    "dihedral-line": {"family": "dihedral-line", "radius": 20},
}


def catalog_model(model_id: str) -> ModelSpec:
    if model_id not in MODEL_CATALOG:
        raise ConfigError(f"Unknown model id '{model_id}'", {"model": model_id, "known": sorted(MODEL_CATALOG)})
    return ModelSpec.model_validate(MODEL_CATALOG[model_id])


def build_model(model: Union[ModelSpec, str, Mapping[str, Any]]) -> Union[DriftModel, WalkModel]:
    if isinstance(model, str):
        model = catalog_model(model)
    elif not isinstance(model, ModelSpec):
        try:
            model = ModelSpec.model_validate(dict(model))
        except ValidationError as e:
            raise ConfigError(f"Invalid model spec: {e.errors()[0]['msg']}", {"model": dict(model)})
    if model.is_continuous:
        return DriftModel.from_spec(model)
    return build_walk_model(model)


def model_label(spec: ModelSpec) -> str:
    if spec.family in ("torus-cover", "zd-lattice", "sublattice-orbit") and spec.d:
        return f"{spec.family}-d{spec.d}"
    return spec.family


def parse_ls_spec(raw: Any) -> Union[LSDataSpec, str, None]:
    if raw is None or isinstance(raw, LSDataSpec) or raw == "auto-balanced":
        return raw
    if isinstance(raw, str):
        raise ConfigError(f"Unknown LS-data preset '{raw}'", {"field": "ls_data"})
    try:
        return LSDataSpec.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(f"Invalid ls_data: {'.'.join(str(p) for p in first['loc'])}: {first['msg']}",
                          {"field": "ls_data"})


_DATA_SALT = 0xDA7A


@dataclass
class CheckContext:
    """Model, LS-data and sampling parameters for one check, with its own RNG lineage."""
    model_spec: ModelSpec
    model_id: str
    ls_spec: Union[LSDataSpec, str, None] = None
    n_paths: int = 10_000
    seed: int = 0
    workers: int = 1
    params: Dict[str, Any] = field(default_factory=dict)
    lineage: int = 0
    _model: Any = field(default=None, init=False, repr=False)
    _data: Optional[LSData] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.streams = CounterStreams(self.seed).derive(self.lineage)

    @classmethod
    def for_model(cls, model: Union[ModelSpec, str, Mapping[str, Any]], **kwargs) -> 'CheckContext':
        if isinstance(model, str):
            return cls(catalog_model(model), model, **kwargs)
        spec = model if isinstance(model, ModelSpec) else ModelSpec.model_validate(dict(model))
        return cls(spec, model_label(spec), **kwargs)

    @property
    def model(self) -> Union[DriftModel, WalkModel]:
        if self._model is None:
            self._model = build_model(self.model_spec)
        return self._model

    @property
    def continuous(self) -> bool:
        return self.model_spec.is_continuous

    def data(self) -> LSData:
        if self._data is None:
            self._data = build_ls_data(self.model, self.ls_spec, self.streams.derive(_DATA_SALT),
                                       self.params.get("kernel_paths"), self.workers)
        return self._data

    def trunc(self, radius: Optional[int] = None):
        return self.model.truncate(int(radius or self.params.get("radius", self.model_spec.radius)))

    def param(self, key: str, default: Any = None) -> Any:
        return self.params.get(key, default)

    def derive(self, tag: str) -> CounterStreams:
        return self.streams.derive(zlib.crc32(tag.encode("utf-8")))

    def require_continuous(self, check: str):
        if not self.continuous:
            raise PreconditionError(f"{check} needs a continuous model, got {self.model_id}",
                                    {"check": check, "model": self.model_id})

    def require_discrete(self, check: str):
        if self.continuous:
            raise PreconditionError(f"{check} needs a discrete model, got {self.model_id}",
                                    {"check": check, "model": self.model_id})

# ============================================================================
# 🔧 SHARED HELPERS
# ============================================================================


def _origin(d: int) -> Site:
    return (0,) * d


def _unit(d: int, i: int, scale: int = 1) -> Site:
    return tuple(scale if j == i else 0 for j in range(d))


def _probe_offsets(d: int, spacing: int) -> np.ndarray:
    table = {
        1: [[0.5], [0.3], [0.7], [0.25], [0.6]],
        2: [[0.5, 0.0], [0.3, 0.3], [0.5, 0.5], [0.7, 0.2], [0.25, 0.6]],
        3: [[0.5, 0.0, 0.0], [0.3, 0.3, 0.0], [0.25, 0.25, 0.25], [0.7, 0.2, 0.1], [0.5, 0.5, 0.0]],
    }
    return np.asarray(table[d], dtype=float) * spacing


def _pole(data: LSData) -> np.ndarray:
    return data.lattice.site_real(np.zeros((1, data.d), dtype=np.int64))[0] + 0.5 * data.lattice.spacing


def _green_h(points: np.ndarray, pole: np.ndarray) -> np.ndarray:
    """Free-space Green function of ½Δ in ℝ³ with the given pole."""
    return 1.0 / (2.0 * math.pi * np.linalg.norm(np.atleast_2d(points) - pole, axis=1))


def _hit_sample(ctx: CheckContext, start: DeckPoint, F: RegionSpec, n: int, tag: str,
                t_max: Optional[float] = None, extend: bool = True) -> Tuple[np.ndarray, np.ndarray, DeckPoint]:
    streams = ctx.derive(tag)
    blocks = streams.blocks(n)

    def block(b):
        _, _, count = blocks[b]
        res = hit_time(ctx.model, start.repeat(count), F, streams.generator(Purpose.BALAYAGE, b),
                       t_max=t_max, extend=extend)
        return res.point, res.timed_out

    parts = run_blocks(block, len(blocks), ctx.workers)
    PATHS_SIMULATED.labels(engine="diffusion").inc(n)
    points = DeckPoint(np.vstack([p[0].cell for p in parts]), np.vstack([p[0].offset for p in parts]))
    return points.real(), np.concatenate([p[1] for p in parts]), points


def _measure_rows(name: str, mu: FiniteMeasure, se: Mapping[Site, float], n: int) -> List[Dict[str, Any]]:
    return [{"measure": name, "site": _label(s), "estimate": w, "se": se.get(s, 0.0), "n": n}
            for s, w in mu.items()]


def _tv_se(se1: Mapping[Site, float], se2: Mapping[Site, float]) -> float:
    keys = set(se1) | set(se2)
    return 0.5 * math.fsum(math.sqrt(se1.get(k, 0.0) ** 2 + se2.get(k, 0.0) ** 2) for k in keys)


def _binomial_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / max(n, 1))


def _states_by_norm(model: WalkModel, trunc, ids: Iterable[int]) -> List[int]:
    return sorted((int(i) for i in ids), key=lambda i: (model.norm(trunc.coord_of(i)), i))


def _discrete_h(model: WalkModel, trunc, which: str = "auto") -> HarmonicFunction:
    """Bounded ν-harmonic function on the window: branch hitting on the tree, else constant."""
    if which == "constant" or (which == "auto" and not model.has_nonconstant_bounded_harmonic):
        return HarmonicFunction({i: 1.0 for i in range(trunc.n)})
    return HarmonicFunction.from_coords(trunc, branch_hitting_word)


def _ls_measure(ctx: CheckContext, y, tag: str, n: Optional[int] = None) -> LSMeasureResult:
    return ls_measure_recursive(y, ctx.data(), ctx.model, ctx.param("tol"), n or ctx.n_paths, ctx.derive(tag),
                                ctx.workers)

# ============================================================================
# 🧹 SWEEPING AND HARMONICITY
# ============================================================================


@debug_timer
def check_sweeping(ctx: CheckContext) -> CheckReport:
    """β(y,F)(h) = h(y) for bounded harmonic h; β(y,F)(G(·,z)) ≤ G(y,z) off the pole in d = 3."""
    if not ctx.continuous:
        return _discrete_sweeping(ctx)
    data = ctx.data()
    model = ctx.model
    n = ctx.n_paths
    site = np.zeros((1, data.d), dtype=np.int64)
    green_branch = model.transient and model.is_brownian
    pole = _pole(data)
    parts, rows = [], []
    for i, u in enumerate(_probe_offsets(data.d, data.lattice.spacing)):
        start = data.lattice.point_at(site, u[None])
        points, timed_out, _ = _hit_sample(ctx, start, data.F, n, f"sweep:{i}")
        q = float(timed_out.mean())
        parts.append(part(f"constant@{i}", "z", q, settings.TIMEOUT_BOUND, _binomial_se(q, n), n))
        rows.append({"probe": i, "h": "constant", "estimate": 1.0 - q, "se": _binomial_se(q, n), "n": n})
        if green_branch:
            values = np.where(timed_out, 0.0, _green_h(points, pole))
            h_y = float(_green_h(start.real(), pole)[0])
            mean = float(values.mean())
            se = float(values.std(ddof=1) / math.sqrt(n))
            parts.append(part(f"green@{i}", "at_most", mean - h_y, None, se, n))
            rows.append({"probe": i, "h": "green", "estimate": mean, "se": se, "n": n, "reference": h_y})
    return _report(ctx, "sweeping", parts, {"green_branch": green_branch, "pole": pole.tolist()},
                   {"sweeping": rows})


def _sweep_target(family: HittingFamily) -> np.ndarray:
    return np.union1d(family.x_ids, family.trunc.boundary_ids)


def _discrete_sweeping(ctx: CheckContext) -> CheckReport:
    model = ctx.model
    trunc = ctx.trunc()
    family = HittingFamily.of(model, trunc)
    h = _discrete_h(model, trunc, ctx.param("h", "auto"))
    target = _sweep_target(family)
    in_target = np.zeros(trunc.n, dtype=bool)
    in_target[target] = True
    candidates = [i for i in trunc.interior_ids if not in_target[i]] or list(family.x_ids)
    states = _states_by_norm(model, trunc, candidates)[:int(ctx.param("states", 50))]
    tol = float(ctx.param("tolerance", 1e-8))
    worst, rows = 0.0, []
    for y in states:
        swept = balayage(model, y, trunc, target).integrate(h.values)
        dev = abs(swept - h[y])
        worst = max(worst, dev)
        rows.append({"state": repr(trunc.coord_of(y)), "estimate": swept, "se": 0.0, "n": 1, "reference": h[y]})
    parts = [part("sweep", "tolerance", worst, tol, 0.0, len(states))]
    return _report(ctx, "sweeping", parts, {"states": len(states), "target_size": int(len(target))},
                   {"sweeping": rows})


@debug_timer
def check_harmonicity_transfer(ctx: CheckContext) -> CheckReport:
    """μ_y(h) = h(y) for swept h; μ_y(h) < h(y) for G(·,z) in d = 3."""
    if not ctx.continuous:
        return _discrete_transfer(ctx)
    data = ctx.data()
    model = ctx.model
    green_branch = model.transient and model.is_brownian
    if green_branch:
        sites = [tuple(s) for s in ctx.param("sites", [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)])]
        starts = [data.site_point(s) for s in sites]
        labels = [_label(s) for s in sites]
    else:
        origin = np.zeros((1, data.d), dtype=np.int64)
        starts = [data.site_point(_origin(data.d)),
                  data.lattice.point_at(origin, _probe_offsets(data.d, data.lattice.spacing)[:1])]
        labels = ["site", "probe"]
    pole = _pole(data)
    h_sup = 1.0 / (2.0 * math.pi * (math.sqrt(data.d) / 2.0) * data.lattice.spacing)
    parts, rows = [], []
    for label, start in zip(labels, starts):
        res = _ls_measure(ctx, start, f"transfer:{label}")
        q = res.timeout_mass
        parts.append(part(f"constant@{label}", "z", q, settings.TIMEOUT_BOUND, _binomial_se(q, res.n_paths),
                          res.n_paths))
        rows.append({"start": label, "h": "constant", "estimate": res.mu.total + res.residual_mass,
                     "se": _binomial_se(q, res.n_paths), "n": res.n_paths})
        if green_branch:
            sites_arr = np.array(res.mu.support, dtype=np.int64).reshape(-1, data.d)
            h_sites = _green_h(data.lattice.site_real(sites_arr), pole) if len(sites_arr) else np.zeros(0)
            weights = np.array([res.mu[s] for s in res.mu.support])
            ses = np.array([res.se.get(s, 0.0) for s in res.mu.support])
            mu_h = float(weights @ h_sites) if len(weights) else 0.0
            se = float(math.sqrt(((h_sites * ses) ** 2).sum()))
            h_y = float(_green_h(start.real(), pole)[0])
            dev = mu_h + res.residual_mass * h_sup - h_y
            parts.append(part(f"strict@{label}", "strict_below", dev, None, se, res.n_paths))
            rows.append({"start": label, "h": "green", "estimate": mu_h, "se": se, "n": res.n_paths,
                         "reference": h_y})
    return _report(ctx, "harmonicity-transfer", parts, {"green_branch": green_branch, "h_sup": h_sup},
                   {"transfer": rows})


def _discrete_transfer(ctx: CheckContext) -> CheckReport:
    model = ctx.model
    trunc = ctx.trunc()
    family = HittingFamily.of(model, trunc)
    h = _discrete_h(model, trunc, ctx.param("h", "auto"))
    target = _sweep_target(family)
    in_target = np.zeros(trunc.n, dtype=bool)
    in_target[target] = True
    tol = float(ctx.param("tolerance", 1e-8))
    states = _states_by_norm(model, trunc, family.x_ids)[:int(ctx.param("states", 30))]
    swept: Dict[int, float] = {}

    def swept_value(z: int) -> float:
        if in_target[z]:
            return h[z]
        if z not in swept:
            swept[z] = balayage(model, z, trunc, target).integrate(h.values)
        return swept[z]

    worst, rows = 0.0, []
    for y in states:
        value = math.fsum(p * swept_value(z) for z, p in trunc.row(y).items())
        worst = max(worst, abs(value - h[y]))
        rows.append({"state": repr(trunc.coord_of(y)), "estimate": value, "se": 0.0, "n": 1, "reference": h[y]})
    on_x = {int(x): h[int(x)] for x in family.x_ids}
    interior = family.interior()
    residual = harmonic_residual(family, on_x, interior=interior)
    parts = [part("transfer", "tolerance", worst, tol, 0.0, len(states)),
             part("mu-harmonic", "tolerance", residual, tol, 0.0, len(interior))]
    return _report(ctx, "harmonicity-transfer", parts, {"states": len(states)}, {"transfer": rows})

# ============================================================================
# 🧾 LS-MEASURE PROPERTIES
# ============================================================================


def _generators(d: int) -> List[Site]:
    pool = [_unit(d, i) for i in range(d)] + [_unit(d, 0, -1), _unit(d, 0, 2)]
    return pool[:3]


def _compare(label: str, a: FiniteMeasure, se_a: Mapping[Site, float], b: FiniteMeasure,
             se_b: Mapping[Site, float], tol: float, n: int) -> CheckPart:
    return part(label, "at_most", tv_distance(a, b), 2 * tol, _tv_se(se_a, se_b), n)


@debug_timer
def check_lsm_properties(ctx: CheckContext) -> CheckReport:
    """Probability, equivariance, the two composition identities and stopping-time consistency of μ."""
    ctx.require_continuous("lsm-properties")
    data = ctx.data()
    model = ctx.model
    d = data.d
    spacing = data.lattice.spacing
    tol = settings.LS_TOL if ctx.param("tol") is None else float(ctx.param("tol"))
    n = ctx.n_paths
    x = _origin(d)
    parts, tallies = [], {}
    with DebugContext("check_lsm_properties", model=ctx.model_id, n_paths=n):
        base = _ls_measure(ctx, data.site_point(x), "lsm:base")
        deficit = 1.0 - base.mu.total - tol
        parts.append(part("probability", "at_most", deficit, settings.TIMEOUT_BOUND,
                          _binomial_se(base.timeout_mass, n), n))
        missing = sum(1 for i in range(d) for s in (1, -1) if base.mu[_unit(d, i, s)] <= 0)
        parts.append(part("positivity", "tolerance", missing, 0.0, 0.0, n))
        tallies["mu_x"] = _measure_rows("mu_x", base.mu, base.se, n)

        n_eq = int(ctx.param("equivariance_paths", min(n, 2000)))
        point = data.site_point(x)
        reference = _ls_measure(ctx, point, "lsm:equivariance", n_eq).mu
        mismatches = 0
        for g in _generators(d):
            moved = _ls_measure(ctx, point.translate(np.asarray(g) * spacing), "lsm:equivariance", n_eq).mu
            back = moved.map_states(lambda s, g=g: tuple(a - b for a, b in zip(s, g)))
            mismatches += int(back != reference)
        parts.append(part("equivariance", "tolerance", mismatches, 0.0, 0.0, n_eq))

        rhs3, se3 = lsm_property_rhs3(x, data, model, n, tol, ctx.derive("lsm:rhs3"), ctx.workers)
        parts.append(_compare("composition", base.mu, base.se, rhs3, se3, tol, n))
        tallies["rhs3"] = _measure_rows("rhs3", rhs3, se3, n)

        y = data.lattice.site_real(np.asarray(x)[None])[0] + 0.5 * data.F.radius * np.eye(d)[0]
        mu_y = _ls_measure(ctx, y, "lsm:y")
        rhs4, se4 = lsm_property_rhs4(y, x, data, model, n, tol, ctx.derive("lsm:rhs4"), ctx.workers)
        parts.append(_compare("entry-identity", mu_y.mu, mu_y.se, rhs4, se4, tol, n))
        tallies["rhs4"] = _measure_rows("rhs4", rhs4, se4, n)

        parts.append(_stopping_consistency(ctx, tol, tallies))
    return _report(ctx, "lsm-properties", parts, {"C": data.C, "tol": tol}, tallies)


def _stopping_consistency(ctx: CheckContext, tol: float, tallies: Dict[str, List[Dict[str, Any]]]) -> CheckPart:
    data = ctx.data()
    d = data.d
    t0 = float(ctx.param("t0", 0.05))
    resamples = int(ctx.param("resamples", 8))
    n = ctx.n_paths
    y = data.lattice.point_at(np.zeros((1, d), dtype=np.int64), 0.5 * data.lattice.spacing * np.eye(d)[:1])
    direct = _ls_measure(ctx, y, "lsm:stop:direct")
    _, _, stopped = _hit_sample(ctx, y, data.F, int(ctx.param("stop_paths", 2000)), "lsm:stop",
                                t_max=t0, extend=False)
    atoms = [(stopped[i], 1.0) for i in range(len(stopped))]
    picks, _ = allocate_paths(atoms, resamples, ctx.derive("lsm:stop:pick").generator(Purpose.START, 0))
    per = max(1000, n // resamples)
    results = [_ls_measure(ctx, picks[k], f"lsm:stop:{k}", per).mu for k in range(resamples)]
    mixture = FiniteMeasure.mixture((1.0 / resamples, m) for m in results)
    keys = set().union(*(m.support for m in results))
    se_mix = {}
    for s in keys:
        values = np.array([m[s] for m in results])
        se_mix[s] = float(values.std(ddof=1) / math.sqrt(resamples)) if resamples > 1 else float("inf")
    tallies["stopped_mixture"] = _measure_rows("stopped_mixture", mixture, se_mix, per * resamples)
    return _compare("stopping-time", direct.mu, direct.se, mixture, se_mix, tol, n)

# ============================================================================
# 🌿 GREEN RATIO AND MARKOV PROPERTY
# ============================================================================


@debug_timer
def check_green_ratio(ctx: CheckContext) -> CheckReport:
    """G(x,y) = B·C·g(x,y) on balanced data in d = 3, and μ_0(e) = μ_0(−e)."""
    ctx.require_continuous("green-ratio")
    model = ctx.model
    if not model.transient:
        raise PreconditionError("green-ratio needs a transient model (d = 3)", {"d": model.d})
    data = ctx.data()
    if data.B is None:
        raise PreconditionError("green-ratio needs balanced LS-data (B set); use ls_data = \"auto-balanced\"",
                                {"model": ctx.model_id})
    C = data.require_C()
    x = _origin(3)
    pairs = [tuple(p) for p in ctx.param("pairs", [(1, 0, 0), (1, 1, 0), (2, 0, 0), (2, 1, 1), (3, 0, 0)])]
    rho = float(ctx.param("rho", 0.05))
    k_max = int(ctx.param("k_max", 30))
    n = ctx.n_paths
    x_real = data.lattice.site_real(np.asarray(x)[None])[0]
    parts, rows = [], []
    for y in pairs:
        y_real = data.lattice.site_real(np.asarray(y)[None])[0]
        if np.linalg.norm(y_real - x_real) < data.V.radius:
            raise PreconditionError("green-ratio needs y outside V_x", {"y": list(y)})
        G = sojourn_green_estimate(model, x_real, y_real, rho, n, ctx.derive(f"green:G:{_label(y)}"),
                                   workers=ctx.workers)
        g = chain_green_estimate(data.site_point(x), y, data, model, n, k_max,
                                 ctx.derive(f"green:g:{_label(y)}"), workers=ctx.workers)
        g_value = g.value + g.tail_bound
        bcg = data.B * C * g_value
        rel = (G.value - bcg) / G.value if G.value > 0 else math.inf
        rel_se = math.sqrt((G.se / G.value) ** 2 + (g.se / g_value) ** 2) if G.value > 0 and g_value > 0 \
            else math.inf
        forced = INCONCLUSIVE if not rel_se < 0.10 else None
        parts.append(part(f"ratio@{_label(y)}", "z", rel, None, rel_se, n, verdict=forced))
        rows.append({"pair": _label(y), "quantity": "G", "estimate": G.value, "se": G.se, "n": G.n})
        rows.append({"pair": _label(y), "quantity": "BCg", "estimate": bcg, "se": data.B * C * g.se, "n": g.n})
    mu0 = _ls_measure(ctx, data.site_point(x), "green:symmetry")
    for i in range(3):
        plus, minus = _unit(3, i), _unit(3, i, -1)
        diff = mu0.mu[plus] - mu0.mu[minus]
        se = math.sqrt(mu0.se.get(plus, 0.0) ** 2 + mu0.se.get(minus, 0.0) ** 2)
        parts.append(part(f"symmetry@{i}", "z", diff, None, se, n))
    return _report(ctx, "green-ratio", parts, {"B": data.B, "C": C, "rho": rho, "k_max": k_max},
                   {"green_ratio": rows, "mu_0": _measure_rows("mu_0", mu0.mu, mu0.se, n)})


def _table_rows(name: str, table: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str]):
    total = max(float(table.sum()), 1.0)
    return [{"table": name, "row": r, "column": c, "estimate": table[i, j] / total,
             "se": _binomial_se(table[i, j] / total, int(total)), "n": int(total)}
            for i, r in enumerate(row_labels) for j, c in enumerate(col_labels) if table[i, j] > 0]


@debug_timer
def check_markov(ctx: CheckContext) -> CheckReport:
    """Displacements of the discretized chain: same law at every step, independent of the previous one."""
    ctx.require_continuous("markov")
    k = int(ctx.param("k_steps", 4))
    if k < 3:
        raise PreconditionError("the Markov check needs chains of at least 3 steps", {"k_steps": k})
    data = ctx.data()
    start = tuple(ctx.param("start", _origin(data.d)))
    chain = sample_discretized_chain(data.site_point(start), k, data, ctx.model, ctx.n_paths,
                                     ctx.derive("markov"), workers=ctx.workers)
    origin = np.broadcast_to(np.asarray(start, dtype=np.int64), (chain.n, 1, data.d))
    sites = np.concatenate([origin, chain.sites], axis=1)
    result = markov_test(sites, chain.counts + 1, int(ctx.param("min_count", 50)))
    parts = [part("homogeneity", "pvalue", result.homogeneity.pvalue, None, 0.0, result.homogeneity.n, 2),
             part("memory", "pvalue", result.memory.pvalue, None, 0.0, result.memory.n, 2)]
    labels = [_label(tuple(int(c) for c in row)) for row in result.tables.labels]
    tallies = {
        "marginal": _measure_rows("X_N1", chain.marginal(1), {}, chain.n),
        "step_displacements": _table_rows("steps", result.tables.homogeneity,
                                          [str(j) for j in range(result.tables.homogeneity.shape[0])], labels),
        "transition_pairs": _table_rows("pairs", result.tables.memory, labels, labels),
    }
    for row in tallies["marginal"]:
        row["se"] = _binomial_se(row["estimate"], chain.n)
    details = {"k_steps": k, "complete_fraction": chain.complete_fraction,
               "homogeneity": asdict(result.homogeneity), "memory": asdict(result.memory)}
    return _report(ctx, "markov", parts, details, tallies, {"markov": chain.ensemble})

# ============================================================================
# 🌲 DISCRETE BOUNDARY CHECKS
# ============================================================================


@debug_timer
def check_tail_agreement(ctx: CheckContext) -> CheckReport:
    """lim h along the full path equals lim h along its X-subsequence."""
    ctx.require_discrete("tail-agreement")
    model = ctx.model
    if not model.has_nonconstant_bounded_harmonic:
        raise PreconditionError(f"{ctx.model_id} has no nonconstant bounded harmonic function to test",
                                {"model": ctx.model_id})
    horizon = int(ctx.param("horizon", 200))
    tol = float(ctx.param("tolerance", 0.1))
    n = ctx.n_paths
    modulus = model.modulus
    paths = sample_tree_paths(n, horizon, ctx.derive("tail"), workers=ctx.workers)
    rows = np.arange(n)
    in_x = (paths.sigma % modulus) == 0
    last = horizon - np.argmax(in_x[:, ::-1], axis=1)
    if ctx.param("h", "branch") == "constant":
        h_full = np.ones(n)
        h_x = np.ones(n)
    else:
        h_full = branch_hitting(paths.first[:, -1], paths.depth[:, -1])
        h_x = branch_hitting(paths.first[rows, last], paths.depth[rows, last])
    unsettled = float((np.minimum(h_full, 1.0 - h_full) > tol).mean()) if ctx.param("h") != "constant" else 0.0
    disagree = float((np.abs(h_full - h_x) > tol).mean())
    parts = [part("settled", "tolerance", unsettled, 0.01, 0.0, n,
                  verdict=INCONCLUSIVE if unsettled > 0.01 else PASS),
             part("agreement", "tolerance", disagree, 0.01, _binomial_se(disagree, n), n)]
    tallies = {"tail": [
        {"quantity": "disagreement", "estimate": disagree, "se": _binomial_se(disagree, n), "n": n},
        {"quantity": "unsettled", "estimate": unsettled, "se": _binomial_se(unsettled, n), "n": n},
        {"quantity": "branch_limit", "estimate": float(h_full.mean()),
         "se": float(h_full.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0, "n": n},
    ]}
    return _report(ctx, "tail-agreement", parts, {"horizon": horizon, "tolerance": tol}, tallies)


def _nearest_x(trunc, family: HittingFamily, y: int) -> int:
    seen = {y}
    frontier = [y]
    while frontier:
        for s in frontier:
            if family.is_x(s):
                return s
        nxt = []
        for s in frontier:
            for t in trunc.space.neighbors(s):
                t = int(t)
                if t not in seen:
                    seen.add(t)
                    nxt.append(t)
        frontier = sorted(nxt)
    raise PreconditionError("no X state reachable in the window", {"state": repr(trunc.coord_of(y))})


def _epsilon_squared(model: WalkModel, trunc, x: int, y: int, kmax: int) -> float:
    forward = max(kernel_power(model, k, x, trunc).measure[y] for k in range(kmax + 1))
    backward = max(kernel_power(model, k, y, trunc).measure[x] for k in range(kmax + 1))
    return forward * backward


@debug_timer
def check_harnack_sandwich(ctx: CheckContext) -> CheckReport:
    """ε²·K(w, x_n) ≤ K(w, y_n) both ways along diverging sequences, ε from kernel powers."""
    ctx.require_discrete("harnack-sandwich")
    model = ctx.model
    if not model.cofinite:
        raise PreconditionError("harnack-sandwich needs a cofinite action", {"model": ctx.model_id})
    trunc = ctx.trunc()
    family = HittingFamily.of(model, trunc)
    kmax = int(ctx.param("kmax", 4))
    n_seq = int(ctx.param("sequences", 20))
    radius = trunc.radius
    rng = ctx.streams.generator(Purpose.DISCRETE, 0)
    o = trunc.id_of(model.origin)
    tests = [o] + [trunc.id_of(c) for c, _ in model.steps(model.origin) if c in trunc.registry]
    by_norm: Dict[int, List[int]] = {}
    for i in trunc.interior_ids:
        by_norm.setdefault(model.norm(trunc.coord_of(int(i))), []).append(int(i))
    worst, worst_eps, rows = 0.0, 1.0, []
    for seq in range(n_seq):
        for r in range(1, max(radius - 1, 2)):
            pool = by_norm.get(r)
            if not pool:
                continue
            y = pool[int(rng.integers(len(pool)))]
            x = _nearest_x(trunc, family, y)
            eps2 = _epsilon_squared(model, trunc, x, y, kmax)
            worst_eps = min(worst_eps, eps2)
            for w in tests:
                k_x = martin_kernel(model, o, w, x, trunc)
                k_y = martin_kernel(model, o, w, y, trunc)
                ratio = max(k_x / k_y, k_y / k_x) if eps2 > 0 else math.inf
                worst = max(worst, ratio * eps2 if eps2 > 0 else math.inf)
            rows.append({"sequence": seq, "norm": r, "y": repr(trunc.coord_of(y)), "x": repr(trunc.coord_of(x)),
                         "estimate": eps2, "se": 0.0, "n": 1})
    parts = [part("sandwich", "tolerance", worst, 1.0 + 1e-9, 0.0, len(rows))]
    return _report(ctx, "harnack-sandwich", parts, {"kmax": kmax, "min_epsilon_squared": worst_eps},
                   {"epsilon": rows})


@debug_timer
def check_discrete_exactness(ctx: CheckContext) -> CheckReport:
    """Exact identities of the hitting-measure chain on a killed window."""
    ctx.require_discrete("discrete-exactness")
    model = ctx.model
    trunc = ctx.trunc()
    family = HittingFamily.of(model, trunc)
    count = int(ctx.param("states", 60))
    near = _states_by_norm(model, trunc, trunc.interior_ids)[:count]
    parts, rows = [], []

    recursion = max(hitting_recursion_residual(family, y) for y in near)
    parts.append(part("recursion", "tolerance", recursion, 1e-10, 0.0, len(near)))
    rows.append({"identity": "recursion", "estimate": recursion, "se": 0.0, "n": len(near)})

    x_near = _states_by_norm(model, trunc, family.x_ids)[:int(ctx.param("x_states", 10))]
    if not model.finite:
        gap = max(abs(mu_green(family, y, x) - green(model, y, x, trunc)) for y in near[:20] for x in x_near)
        parts.append(part("green", "tolerance", gap, 1e-9, 0.0, len(x_near)))
        rows.append({"identity": "green", "estimate": gap, "se": 0.0, "n": len(x_near)})

    if model.symmetric:
        block = _states_by_norm(model, trunc, family.x_ids)[:80]
        defect = max((abs(family.measure(a)[b] - family.measure(b)[a]) for a in block for b in block), default=0.0)
        parts.append(part("symmetry", "tolerance", defect, 1e-10, 0.0, len(block)))
        rows.append({"identity": "symmetry", "estimate": defect, "se": 0.0, "n": len(block)})

    rng = ctx.streams.generator(Purpose.DISCRETE, 1)
    h = {int(x): float(v) for x, v in zip(family.x_ids, rng.uniform(-1.0, 1.0, len(family.x_ids)))}
    extended = extend_harmonic(h, family)
    off_x = [int(i) for i in trunc.interior_ids if not family.is_x(int(i))]
    residual = harmonic_residual(model, extended, trunc, interior=off_x) if off_x else 0.0
    dirichlet = solve_dirichlet(model, trunc, {**h, **{int(b): 0.0 for b in trunc.boundary_ids}})
    oracle_gap = max((abs(extended[i] - dirichlet[i]) for i in range(trunc.n)), default=0.0)
    parts.append(part("extension", "tolerance", residual, 1e-9, 0.0, len(off_x)))
    parts.append(part("dirichlet-oracle", "tolerance", oracle_gap, 1e-9, 0.0, trunc.n))
    rows.append({"identity": "extension", "estimate": residual, "se": 0.0, "n": len(off_x)})
    rows.append({"identity": "dirichlet-oracle", "estimate": oracle_gap, "se": 0.0, "n": trunc.n})
    return _report(ctx, "discrete-exactness", parts, {"radius": trunc.radius, "states": trunc.n},
                   {"identities": rows})

# ============================================================================
# 🎯 ACCEPTANCE CHECKS
# ============================================================================


@debug_timer
def check_exit_measure_oracle(ctx: CheckContext) -> CheckReport:
    """Simulated exit distribution of a ball against the Poisson kernel."""
    ctx.require_continuous("exit-measure-oracle")
    model = ctx.model
    if not model.is_brownian:
        raise PreconditionError("the Poisson-kernel oracle needs φ ≡ 1", {"model": ctx.model_id})
    d = model.d
    radius = float(ctx.param("radius", 0.3))
    binning = BoundaryBinning(d, ctx.param("n_bins"))
    V = RegionSpec("ball", SiteLattice.build(d), radius)
    y_local = np.asarray(ctx.param("start", 0.3 * radius * np.eye(d)[0]), dtype=float)
    est = exit_measure_estimate(model, V, y_local, ctx.n_paths, binning, ctx.derive("exit-oracle"),
                                workers=ctx.workers)
    exact = binning.probabilities(y_local, radius)[0]
    exact = exact / exact.sum()
    excess = np.maximum(np.abs(est.probabilities - exact) - settings.Z_SIGMA * est.se, 0.0) / exact
    raw = np.abs(est.probabilities - exact) / exact
    gof = chi2_goodness_of_fit(est.counts, exact)
    parts = [part("relative-error", "tolerance", float(excess.max()), 0.05, 0.0, est.n),
             part("timeouts", "z", est.timeout_mass, settings.TIMEOUT_BOUND,
                  _binomial_se(est.timeout_mass, ctx.n_paths), ctx.n_paths)]
    rows = [{"bin": b, "estimate": float(p), "se": float(s), "n": est.n, "reference": float(e)}
            for b, (p, s, e) in enumerate(zip(est.probabilities, est.se, exact))]
    return _report(ctx, "exit-measure-oracle", parts,
                   {"max_relative_error": float(raw.max()), "chi2": asdict(gof), "sparse_bins": est.sparse_bins},
                   {"exit_bins": rows})


@debug_timer
def check_projection_law(ctx: CheckContext) -> CheckReport:
    """Projected cover paths have the law of paths run on the torus."""
    ctx.require_continuous("projection-law")
    model = ctx.model
    t = float(ctx.param("t", 0.5))
    x = np.asarray(ctx.param("start", 0.5 * np.eye(model.d)[0] + 0.1), dtype=float)
    report = projection_law_check(model, x, t, ctx.n_paths, ctx.derive("projection"),
                                  int(ctx.param("n_energy", 500)), int(ctx.param("n_perm", 199)), ctx.workers)
    parts = [part("projection", "pvalue", report.p_min, None, 0.0, report.n, report.n_tests)]
    rows = [{"test": f"ks-{i}", "estimate": p, "se": 0.0, "n": report.n} for i, p in enumerate(report.ks_pvalues)]
    rows.append({"test": "energy", "estimate": report.energy_pvalue, "se": 0.0, "n": report.n})
    return _report(ctx, "projection-law", parts,
                   {"t": t, "coarse_tv": report.coarse_tv, "energy_statistic": report.energy_statistic,
                    "adjusted_p": report.adjusted_p}, {"pvalues": rows})


@debug_timer
def check_equivariance(ctx: CheckContext) -> CheckReport:
    """μ_{γy} = γ·μ_y: bit-equal for the LS-measure, to 1e-12 for hitting measures."""
    if ctx.continuous:
        return _continuous_equivariance(ctx)
    model = ctx.model
    action = model.action
    radius = int(ctx.param("radius", ctx.model_spec.radius))
    trunc = model.truncate(radius)
    family = HittingFamily.of(model, trunc)
    bases = _states_by_norm(model, trunc, family.x_ids)[:3]
    gens = list(action.generators)[:3] or [action.identity]
    worst, rows = 0.0, []
    for g in gens:
        moved_trunc = model.truncate(radius, shift=g)
        moved_family = HittingFamily.of(model, moved_trunc)
        g_inv = action.inverse(g)
        for y in bases:
            coord = trunc.coord_of(y)
            reference = family.measure(y).map_states(trunc.coord_of)
            gy = moved_trunc.id_of(action.apply(g, coord))
            back = moved_family.measure(gy).map_states(lambda i: action.apply(g_inv, moved_trunc.coord_of(i)))
            gap = max((abs(reference[s] - back[s]) for s in set(reference.support) | set(back.support)),
                      default=0.0)
            worst = max(worst, gap)
            rows.append({"generator": repr(g), "state": repr(coord), "estimate": gap, "se": 0.0, "n": 1})
    parts = [part("hitting-measures", "tolerance", worst, 1e-12, 0.0, len(rows))]
    return _report(ctx, "equivariance", parts, {"radius": radius}, {"equivariance": rows})


def _continuous_equivariance(ctx: CheckContext) -> CheckReport:
    data = ctx.data()
    d = data.d
    spacing = data.lattice.spacing
    n_eq = int(ctx.param("equivariance_paths", min(ctx.n_paths, 2000)))
    origin = np.zeros((1, d), dtype=np.int64)
    bases = {
        "site": data.site_point(_origin(d)),
        "in-F": data.lattice.point_at(origin, 0.5 * data.F.radius * np.eye(d)[:1]),
        "midpoint": data.lattice.point_at(origin, 0.5 * spacing * np.ones((1, d))),
    }
    mismatches, rows = 0, []
    for label, point in bases.items():
        reference = _ls_measure(ctx, point, f"equivariance:{label}", n_eq).mu
        for g in _generators(d):
            moved = _ls_measure(ctx, point.translate(np.asarray(g) * spacing), f"equivariance:{label}", n_eq).mu
            back = moved.map_states(lambda s, g=g: tuple(a - b for a, b in zip(s, g)))
            equal = back == reference
            mismatches += int(not equal)
            rows.append({"base": label, "generator": _label(g), "estimate": 0.0 if equal else tv_distance(back, reference),
                         "se": 0.0, "n": n_eq})
    parts = [part("ls-measures", "tolerance", mismatches, 0.0, 0.0, n_eq)]
    return _report(ctx, "equivariance", parts, {"paths": n_eq}, {"equivariance": rows})


@debug_timer
def check_ls_cross_validation(ctx: CheckContext) -> CheckReport:
    """The recursive LS-measure against the first accepted site of simulated LS paths."""
    ctx.require_continuous("ls-cross-validation")
    data = ctx.data()
    x = tuple(ctx.param("start", _origin(data.d)))
    n = ctx.n_paths
    recursive = _ls_measure(ctx, data.site_point(x), "cross:recursive")
    chain = sample_discretized_chain(data.site_point(x), 1, data, ctx.model, n, ctx.derive("cross:paths"),
                                     workers=ctx.workers)
    empirical = chain.marginal(1)
    se_emp = {s: _binomial_se(p, n) for s, p in empirical.items()}
    keys = sorted(set(recursive.mu.support) | set(empirical.support))
    wald = wald_chi2([recursive.mu[s] for s in keys], [recursive.se.get(s, 0.0) for s in keys],
                     [empirical[s] for s in keys], [se_emp.get(s, 0.0) for s in keys])
    tol = settings.LS_TOL if ctx.param("tol") is None else float(ctx.param("tol"))
    parts = [_compare("tv", recursive.mu, recursive.se, empirical, se_emp, tol, n),
             part("wald", "pvalue", wald.pvalue, None, 0.0, n)]
    tallies = {"recursive": _measure_rows("recursive", recursive.mu, recursive.se, n),
               "simulated": _measure_rows("simulated", empirical, se_emp, n)}
    return _report(ctx, "ls-cross-validation", parts, {"wald": asdict(wald)}, tallies,
                   {"cross_validation": chain.ensemble})


@debug_timer
def check_residual_decay(ctx: CheckContext) -> CheckReport:
    """Residual mass after n sweeps stays below (1 − 1/C²)ⁿ + z·SE."""
    ctx.require_continuous("residual-decay")
    data = ctx.data()
    result = _ls_measure(ctx, data.site_point(_origin(data.d)), "residual")
    decay = residual_decay_report(result, float(ctx.param("z", 4.0)))
    slack = max((r - b for r, b in zip(decay.residuals, decay.bounds)), default=0.0)
    parts = [part("decay", "tolerance", slack, 0.0, 0.0, result.n_paths)]
    rows = [{"round": k, "estimate": r, "se": s, "n": result.n_paths, "bound": b}
            for k, r, s, b in zip(decay.rounds, decay.residuals, result.timeout_se, decay.bounds)]
    return _report(ctx, "residual-decay", parts, {"C": result.C, "rounds": result.rounds}, {"residuals": rows})

# ============================================================================
# 🎚️ CALIBRATION
# ============================================================================


def _period_two_walks(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    first = rng.choice([-1, 1], size=n)
    signs = np.where(np.arange(k) % 2 == 0, 1, -1)
    return np.concatenate([np.zeros((n, 1), dtype=np.int64), np.cumsum(first[:, None] * signs, axis=1)], axis=1)


def _iid_walks(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    steps = rng.choice([-1, 1], size=(n, k))
    return np.concatenate([np.zeros((n, 1), dtype=np.int64), np.cumsum(steps, axis=1)], axis=1)


CALIBRATION_PROBS = np.array([0.1, 0.2, 0.3, 0.4])


def _null_pvalues(rng: np.random.Generator) -> Dict[str, float]:
    die = np.full(6, 1 / 6)
    c1 = rng.multinomial(2000, CALIBRATION_PROBS)
    c2 = rng.multinomial(2000, CALIBRATION_PROBS)
    p1, p2 = c1 / 2000, c2 / 2000
    markov = markov_test(_iid_walks(rng, 2000, 4))
    return {
        "chi2-gof": chi2_goodness_of_fit(rng.multinomial(10_000, die), die).pvalue,
        "chi2-homogeneity": chi2_homogeneity(rng.multinomial(500, CALIBRATION_PROBS, size=3)).pvalue,
        "ks-one-sample": ks_one_sample(rng.random(500), "uniform").pvalue,
        "ks-two-sample": ks_two_sample(rng.normal(size=500), rng.normal(size=500)).pvalue,
        "wald-chi2": wald_chi2(p1, np.sqrt(p1 * (1 - p1) / 2000), p2, np.sqrt(p2 * (1 - p2) / 2000)).pvalue,
        "energy": energy_distance_test(rng.normal(size=(100, 2)), rng.normal(size=(100, 2)), rng, 99).pvalue,
        "markov": markov.adjusted_p,
    }


def _power_pvalues(rng: np.random.Generator) -> Dict[str, float]:
    return {
        "ks-shift": ks_two_sample(rng.normal(size=500), rng.normal(loc=0.3, size=500)).pvalue,
        "markov-period-2": markov_test(_period_two_walks(rng, 2000, 4)).adjusted_p,
    }


@debug_timer
def calibrate(ctx: CheckContext) -> CheckReport:
    """False-positive rates of every test under its null, and power against designed alternatives."""
    seeds = int(ctx.param("seeds", 100))
    alpha = settings.ALPHA
    max_fpr = float(ctx.param("max_fpr", 0.02))
    min_power = float(ctx.param("min_power", 0.9))

    def run(b):
        rng = ctx.streams.generator(Purpose.CALIBRATION, b)
        return _null_pvalues(rng), _power_pvalues(rng)

    results = run_blocks(run, seeds, ctx.workers)
    parts, rows = [], []
    for name in results[0][0]:
        ps = np.array([r[0][name] for r in results])
        fpr = float((ps <= alpha).mean())
        parts.append(part(f"fpr:{name}", "at_most", fpr, max_fpr, _binomial_se(max_fpr, seeds), seeds))
        rows.append({"test": name, "rate": "false_positive", "estimate": fpr, "se": _binomial_se(fpr, seeds),
                     "n": seeds})
    for name in results[0][1]:
        ps = np.array([r[1][name] for r in results])
        miss = float((~(ps <= alpha)).mean())
        parts.append(part(f"power:{name}", "at_most", miss, 1.0 - min_power,
                          _binomial_se(1.0 - min_power, seeds), seeds))
        rows.append({"test": name, "rate": "power", "estimate": 1.0 - miss, "se": _binomial_se(miss, seeds),
                     "n": seeds})
    return _report(ctx, "calibration", parts, {"alpha": alpha, "seeds": seeds}, {"calibration": rows})

# ============================================================================
# 📚 REGISTRY AND SUITES
# ============================================================================

CHECK_REGISTRY: Dict[str, Tuple[Callable[[CheckContext], CheckReport], str]] = {
    "sweeping": (check_sweeping, "sweeping preserves bounded harmonic functions and lowers superharmonic ones"),
    "lsm-properties": (check_lsm_properties, "LS-measures are equivariant probability measures with the "
                                             "composition identities"),
    "harmonicity-transfer": (check_harmonicity_transfer, "swept harmonic functions stay harmonic for the "
                                                         "discretized chain; others become strictly superharmonic"),
    "green-ratio": (check_green_ratio, "G(x,y) = B·C·g(x,y) for balanced data, with symmetric μ"),
    "markov": (check_markov, "the discretized chain has time-homogeneous Markov transitions"),
    "tail-agreement": (check_tail_agreement, "bounded harmonic limits agree along paths and their X-subsequences"),
    "harnack-sandwich": (check_harnack_sandwich, "Martin kernels at y and its nearby orbit point agree up to ε⁻²"),
    "discrete-exactness": (check_discrete_exactness, "hitting-measure recursion, Green identity, symmetry and "
                                                     "harmonic extension hold exactly"),
    "exit-measure-oracle": (check_exit_measure_oracle, "ball exit distributions match the Poisson kernel"),
    "projection-law": (check_projection_law, "projections of cover paths have the torus law"),
    "equivariance": (check_equivariance, "deck or group translations commute with the discretization"),
    "ls-cross-validation": (check_ls_cross_validation, "recursive LS-measures match simulated first acceptances"),
    "residual-decay": (check_residual_decay, "LS residual mass decays geometrically in the number of sweeps"),
    "calibration": (calibrate, "statistical tests hold their false-positive rate and have power"),
}


def _entries(*items: Tuple[str, Optional[str], Dict[str, Any]]) -> List[SuiteEntry]:
    return [SuiteEntry(check=c, model=m, params=p) for c, m, p in items]


SUITES: Dict[str, List[SuiteEntry]] = {
    "sweeping": _entries(("sweeping", None, {})),
    "lsm-properties": _entries(("lsm-properties", None, {})),
    "harmonicity": _entries(("harmonicity-transfer", None, {})),
    "green-ratio": _entries(("green-ratio", None, {})),
    "markov": _entries(("markov", None, {})),
    "tail-agreement": _entries(("tail-agreement", None, {})),
    "harnack-sandwich": _entries(("harnack-sandwich", None, {})),
    "discrete-section6": _entries(("discrete-exactness", "zd-lattice", {}),
                                  ("discrete-exactness", "free-group-tree", {"radius": 10}),
                                  ("sweeping", "free-group-tree", {"radius": 6}),
                                  ("harmonicity-transfer", "free-group-tree", {"radius": 6}),
                                  ("equivariance", "free-group-tree", {"radius": 6}),
                                  ("harnack-sandwich", "sublattice-orbit", {})),
    "cross-validation": _entries(("ls-cross-validation", None, {})),
    "residual-decay": _entries(("residual-decay", None, {})),
    "equivariance": _entries(("equivariance", None, {})),
    "exit-oracle": _entries(("exit-measure-oracle", None, {})),
    "projection-law": _entries(("projection-law", None, {})),
    "calibration": _entries(("calibration", None, {})),
    "acceptance": _entries(
        ("sweeping", "torus-cover-d2", {}),
        ("sweeping", "torus-cover-d3", {}),
        ("sweeping", "free-group-tree", {}),
        ("lsm-properties", "torus-cover-d1", {}),
        ("lsm-properties", "torus-cover-d2", {}),
        ("harmonicity-transfer", "torus-cover-d3", {}),
        ("harmonicity-transfer", "free-group-tree", {}),
        ("green-ratio", "torus-cover-d3", {"ls_data": "auto-balanced"}),
        ("markov", "torus-cover-d1", {}),
        ("markov", "torus-cover-d2", {}),
        ("tail-agreement", "free-group-tree", {}),
        ("harnack-sandwich", "sublattice-orbit-d3", {}),
        ("discrete-exactness", "zd-lattice", {}),
        ("discrete-exactness", "free-group-tree", {"radius": 10}),
        ("exit-measure-oracle", "torus-cover-d2", {}),
        ("projection-law", "torus-cover-d2-drift", {}),
        ("equivariance", "torus-cover-d2", {}),
        ("equivariance", "free-group-tree", {}),
        ("ls-cross-validation", "torus-cover-d1", {}),
        ("residual-decay", "torus-cover-d1", {}),
        ("residual-decay", "torus-cover-d2", {}),
        ("calibration", None, {}),
    ),
}
SUITES["discrete-exactness"] = SUITES["discrete-section6"]


def resolve_suite(name: str) -> List[SuiteEntry]:
    if name not in SUITES:
        raise ConfigError(f"Unknown suite '{name}'", {"suite": name, "known": sorted(SUITES)})
    return list(SUITES[name])


@dataclass
class SuiteOutcome:
    reports: List[CheckReport]
    errors: List[Tuple[SuiteEntry, LSDiscretizeError]]


def _context_for(entry: SuiteEntry, index: int, model: Optional[ModelSpec], ls_spec, n_paths: int, seed: int,
                 workers: int, params: Mapping[str, Any]) -> CheckContext:
    merged = {**params, **entry.params}
    if entry.model is None:
        if model is None:
            raise ConfigError(f"Suite entry '{entry.check}' has no model and the config names none",
                              {"check": entry.check})
        spec, model_id = model, model_label(model)
        data_spec = parse_ls_spec(merged["ls_data"]) if "ls_data" in merged else ls_spec
    else:
        spec, model_id = catalog_model(entry.model), entry.model
        data_spec = parse_ls_spec(merged.get("ls_data"))
    lineage = zlib.crc32(f"{entry.check}:{model_id}:{index}".encode("utf-8"))
    return CheckContext(spec, model_id, data_spec, int(merged.get("n_paths", n_paths)), seed, workers, merged,
                        lineage)


def run_check(name: str, ctx: CheckContext) -> CheckReport:
    if name not in CHECK_REGISTRY:
        raise ConfigError(f"Unknown check '{name}'", {"check": name, "known": sorted(CHECK_REGISTRY)})
    return CHECK_REGISTRY[name][0](ctx)


def run_suite(entries: Sequence[SuiteEntry], model: Optional[ModelSpec], ls_spec=None, n_paths: int = 10_000,
              seed: int = 0, workers: int = 1, params: Optional[Mapping[str, Any]] = None,
              jobs: int = 1) -> SuiteOutcome:
    """Run suite entries as independent jobs; typed errors are collected per entry.

    Entries without a model use ``model`` and ``ls_spec``; catalog entries
    take their LS-data from an ``ls_data`` parameter. Reports come back in
    entry order whatever ``jobs`` is.
    """
    params = dict(params or {})
    unknown = sorted({e.check for e in entries} - set(CHECK_REGISTRY))
    if unknown:
        raise ConfigError(f"Unknown check(s): {', '.join(unknown)}", {"checks": unknown})
    contexts = [_context_for(e, i, model, ls_spec, n_paths, seed, workers, params) for i, e in enumerate(entries)]
    logger.info(f"🧪 Running {len(entries)} check(s) with seed {seed}")

    def job(i):
        try:
            return run_check(entries[i].check, contexts[i]), None
        except LSDiscretizeError as e:
            debug_logger.log_error(e.to_debug_error(ErrorSeverity.ERROR))
            return None, e

    outcomes = run_blocks(job, len(entries), jobs)
    reports = [r for r, _ in outcomes if r is not None]
    errors = [(entries[i], e) for i, (_, e) in enumerate(outcomes) if e is not None]
    return SuiteOutcome(reports, errors)
