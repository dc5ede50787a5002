"""
🧮 LS discretization of the continuous engine.

LS-data pairs (F_x, V_x) around the sites of an orbit X, a Harnack constant
C and optionally a balance constant B. On top of it:

* the sweep operator μ ↦ (μ′, μ″) and the recursive LS-measures μ_y,
* the κ-rejection discretization of diffusion paths and the resulting chain,
* chain Green functions and the balayage identity for them.

Sweep measures carry boundary mass as (site, ∂V bin) atoms, so mass
bookkeeping is exact in the estimator.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import CounterStreams, FiniteMeasure, Purpose, run_blocks
from .debug_utils import (DebugContext, DecayContractError, EmptyBinError, NegativeSweepMassError,
                          NonDecayingVisitsError, PreconditionError, RegionError, debug_assert,
                          debug_timer, get_logger)
from .diffusion import (BoundaryBinning, DeckPoint, DriftModel, EntryRecords, ExitKernel, PathEnsemble,
                        RegionSpec, SiteLattice, allocate_paths, hit_time, poisson_kernel, simulate_ls_paths)
from .metrics import SWEEP_ROUNDS
from .settings import LSDataSpec, settings

logger = get_logger(__name__)

Site = Tuple[int, ...]

MIN_F_FRACTION = 0.05
DEFAULT_F_RADIUS = 0.1
KERNEL_PATHS = 4000
ROUND_KEY_SHIFT = 24
ALLOCATION_BLOCK = (1 << ROUND_KEY_SHIFT) - 1

# ============================================================================
# 📐 LS-DATA
# ============================================================================


def ball_green(d: int, radius: float, r) -> np.ndarray:
    """G_{B(0,R)}(z, 0) of ½Δ at |z| = r."""
    r = np.asarray(r, dtype=float)
    if d == 1:
        return radius - r
    if d == 2:
        return np.log(radius / r) / math.pi
    return (1.0 / r - 1.0 / radius) / (2.0 * math.pi)


def balanced_radius(d: int, radius: float, balance: float) -> float:
    """Radius r with ball_green(d, R, r) = B."""
    if d == 1:
        return radius - balance
    if d == 2:
        return radius * math.exp(-math.pi * balance)
    return 1.0 / (2.0 * math.pi * balance + 1.0 / radius)


@dataclass(eq=False)
class LSData:
    """Equivariant LS-data: F_x and V_x are deck translates of one base pair."""
    lattice: SiteLattice
    F: RegionSpec
    V: RegionSpec
    C: Optional[float] = None
    B: Optional[float] = None
    equivariant: bool = True
    n_bins: Optional[int] = None
    kernel: Optional[ExitKernel] = field(default=None, repr=False)
    _binning: Optional[BoundaryBinning] = field(default=None, repr=False)

    def __post_init__(self):
        if self.C is not None and self.C <= 1.0:
            raise RegionError("the Harnack constant must exceed 1", {"C": self.C})

    @classmethod
    def build(cls, d: int, f_radius: float, v_radius: float, spacing: int = 1,
              center: Optional[Sequence[float]] = None, C: Optional[float] = None, B: Optional[float] = None,
              n_bins: Optional[int] = None, f_profile: Optional[Sequence[float]] = None) -> 'LSData':
        lattice = SiteLattice.build(d, spacing, center)
        if f_profile:
            F = RegionSpec("radial-profile", lattice, f_radius, profile=tuple(float(r) for r in f_profile))
        else:
            F = RegionSpec("orbit-balls", lattice, f_radius)
        V = RegionSpec("orbit-balls", lattice, v_radius)
        return cls(lattice, F, V, C, B, True, n_bins)

    @property
    def d(self) -> int:
        return self.lattice.d

    @property
    def binning(self) -> BoundaryBinning:
        if self._binning is None:
            self._binning = BoundaryBinning(self.d, self.n_bins)
        return self._binning

    def require_C(self) -> float:
        if self.C is None:
            raise PreconditionError("LS-data has no Harnack constant yet; run estimate_harnack_C first")
        return self.C

    def with_C(self, C: float) -> 'LSData':
        return replace(self, C=float(C))

    def exit_kernel(self, model: DriftModel, n_paths: Optional[int] = None,
                    streams: Optional[CounterStreams] = None, workers: int = 1) -> ExitKernel:
        if self.kernel is None or self.kernel.model is not model:
            self.kernel = ExitKernel(model, self.F, self.V, self.binning, n_paths or KERNEL_PATHS,
                                     streams or CounterStreams(settings.SEED or 0).derive(0xE817),
                                     workers)
        return self.kernel

    def site_point(self, site: Site) -> DeckPoint:
        return self.lattice.point_at(np.asarray(site, dtype=np.int64)[None], np.zeros((1, self.d)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "d": self.d,
            "spacing": self.lattice.spacing,
            "center": (self.lattice.center_cell + self.lattice.center_offset).tolist(),
            "f_radius": self.F.radius,
            "f_profile": list(self.F.profile) if self.F.profile else None,
            "v_radius": self.V.radius,
            "C": self.C,
            "B": self.B,
            "equivariant": self.equivariant,
            "n_bins": self.binning.n_bins,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> 'LSData':
        return cls.build(int(raw["d"]), float(raw["f_radius"]), float(raw["v_radius"]), int(raw.get("spacing", 1)),
                         raw.get("center"), raw.get("C"), raw.get("B"), raw.get("n_bins"), raw.get("f_profile"))


@dataclass(frozen=True)
class ConditionResult:
    name: str
    passed: Optional[bool]
    margin: float
    detail: str = ""


@dataclass(frozen=True)
class LSDataReport:
    conditions: Dict[str, ConditionResult]

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.conditions.values())

    def failed(self) -> List[str]:
        return [name for name, c in self.conditions.items() if c.passed is False]

    def to_dict(self) -> Dict[str, Any]:
        return {name: {"passed": c.passed, "margin": c.margin, "detail": c.detail}
                for name, c in self.conditions.items()}


def _geometry_conditions(data: LSData) -> Dict[str, ConditionResult]:
    f_max = data.F.max_radius
    f_min = min(data.F.profile) if data.F.profile else data.F.radius
    r_v = data.V.radius
    s = data.lattice.spacing
    d1 = ConditionResult("D1", f_min > 0 and f_max < r_v, r_v - f_max,
                         f"x interior to F_x; max F radius {f_max:g} vs V radius {r_v:g}")
    d2 = ConditionResult("D2", 2 * r_v < s, s - 2 * r_v,
                         f"V balls of neighbouring sites at distance {s} need 2·r_V < {s}")
    return {"D1": d1, "D2": d2}


@debug_timer
def validate_ls_data(data: LSData, model: DriftModel, n_paths: int = 2000, streams: Optional[CounterStreams] = None,
                     strict: bool = True, workers: int = 1) -> LSDataReport:
    """Check (D1)–(D5) plus equivariance, with measured margins.

    Geometry failures (D1, D2) raise ``RegionError`` when ``strict``;
    otherwise they are reported like the statistical conditions.
    """
    streams = streams or CounterStreams(settings.SEED or 0)
    conditions = _geometry_conditions(data)
    bad = [c for c in conditions.values() if not c.passed]
    if bad and strict:
        raise RegionError(f"LS-data geometry violates {', '.join(c.name for c in bad)}",
                          {c.name: c.detail for c in bad})
    if bad:
        conditions["D3"] = ConditionResult("D3", None, float("nan"), "skipped: geometry invalid")
        return LSDataReport(conditions)

    with DebugContext("validate_ls_data", d=data.d, n_paths=n_paths):
        midpoint = data.lattice.site_real(np.zeros((1, data.d), dtype=np.int64)) + data.lattice.spacing / 2.0
        start = DeckPoint.from_real(midpoint)
        runs = min(n_paths, 2000)
        blocks = streams.blocks(runs)

        def block(b):
            _, _, count = blocks[b]
            return hit_time(model, start.repeat(count), data.F, streams.generator(Purpose.BALAYAGE, b)).timed_out

        timed_out = np.concatenate(run_blocks(block, len(blocks), workers))
        hit_fraction = 1.0 - float(timed_out.mean())
        conditions["D3"] = ConditionResult("D3", hit_fraction >= 1.0 - settings.TIMEOUT_BOUND,
                                           hit_fraction - (1.0 - settings.TIMEOUT_BOUND),
                                           f"F hit before t_max by {hit_fraction:.4f} of {runs} paths")

        if data.C is not None:
            kernel = data.exit_kernel(model, streams=streams.derive(0xD4), workers=workers)
            ys = np.vstack([np.zeros((1, data.d)), kernel.entry_points()])
            zs = data.binning.reps * data.V.radius
            yy = np.repeat(ys, len(zs), axis=0)
            zz = np.tile(zs, (len(ys), 1))
            ratio = kernel.ratio(yy, zz)
            worst = float(max(ratio.max(), (1.0 / ratio).max()))
            conditions["D4"] = ConditionResult("D4", worst <= data.C, data.C / worst,
                                               f"density ratios within [{1 / worst:.4f}, {worst:.4f}] for C={data.C:.4f}")

        if data.B is not None:
            if model.is_brownian:
                rs = data.F.radius_toward(data.binning.reps)
                green = ball_green(data.d, data.V.radius, rs)
                dev = float(np.max(np.abs(green - data.B) / data.B))
                conditions["D5"] = ConditionResult("D5", dev <= 0.03, 0.03 - dev,
                                                   f"max relative deviation of G_V(z,x) from B: {dev:.2e}")
            else:
                conditions["D5"] = ConditionResult("D5", None, float("nan"),
                                                   "no analytic ball Green function for this drift")

        conditions["equivariance"] = ConditionResult(
            "equivariance", data.equivariant and data.F.kind != "ball" and data.V.kind != "ball", 0.0,
            "regions are deck translates of the base pair")
    report = LSDataReport(conditions)
    logger.info(f"🧾 LS-data validation: {'pass' if report.passed else 'fail ' + ','.join(report.failed())}")
    return report


@debug_timer
def estimate_harnack_C(data: LSData, model: DriftModel, n_paths: Optional[int] = None, n_bins: Optional[int] = None,
                       margin: Optional[float] = None, streams: Optional[CounterStreams] = None,
                       sample_points: Optional[np.ndarray] = None, workers: int = 1) -> float:
    """C = margin × max over sampled y ∈ F_x and bins of max(ratio, 1/ratio).

    Estimated once at the base site and reused orbit-wide. For φ ≡ 1 the
    pointwise Poisson-kernel extremum over the sampled pairs is included.
    """
    margin = settings.HARNACK_MARGIN if margin is None else margin
    work = data
    if n_bins is not None and n_bins != data.binning.n_bins:
        work = replace(data, n_bins=n_bins, kernel=None, _binning=None)
    kernel = work.exit_kernel(model, n_paths, streams, workers)
    if sample_points is None:
        points = kernel.entry_points()
        rows = kernel.entry_rows()
    else:
        points = np.atleast_2d(np.asarray(sample_points, dtype=float))
        rows = kernel.row_at(points)
    center = kernel.center_row
    if np.any(center <= 0) or np.any(rows <= 0):
        raise EmptyBinError("Exit histogram has empty bins; use fewer bins or more kernel paths",
                            {"n_bins": work.binning.n_bins, "empty_center": int((center <= 0).sum()),
                             "empty_rows": int((rows <= 0).sum())})
    ratio = center[None, :] / rows
    worst = float(max(ratio.max(), (1.0 / ratio).max()))
    if kernel.analytic:
        zs = work.binning.reps * work.V.radius
        pk = poisson_kernel(points[:, None, :], zs[None], work.V.radius)
        worst = max(worst, float(pk.max()), float((1.0 / pk).max()))
    C = margin * worst
    logger.info(f"📏 Harnack constant C = {C:.4f} (margin {margin}, {work.binning.n_bins} bins)")
    return C


def balanced_data(model: DriftModel, v_radius: float, balance: float, spacing: int = 1,
                  center: Optional[Sequence[float]] = None, n_bins: Optional[int] = None,
                  margin: Optional[float] = None) -> LSData:
    """(D5) data: F_x = {G_{V_x}(·, x) ≥ B}, a ball whose radius solves the ball Green function."""
    if not model.is_brownian:
        raise PreconditionError("balanced data needs φ ≡ 1 (analytic ball Green function)", {"model": model.name})
    if balance <= 0:
        raise RegionError("balance constant must be positive", {"B": balance})
    f_radius = balanced_radius(model.d, v_radius, balance)
    smallest = MIN_F_FRACTION * v_radius
    if f_radius < smallest * (1 - 1e-12):
        raise RegionError(f"B={balance:g} is too large: F radius {f_radius:.4g} below the minimum {smallest:.4g}",
                          {"B": balance, "f_radius": f_radius, "min_radius": smallest})
    if f_radius <= 0 or f_radius >= v_radius:
        raise RegionError(f"B={balance:g} gives an F radius {f_radius:.4g} outside (0, {v_radius})",
                          {"B": balance, "f_radius": f_radius})
    if 2 * v_radius >= spacing:
        raise RegionError("V balls overlap for this spacing", {"v_radius": v_radius, "spacing": spacing})
    data = LSData.build(model.d, f_radius, v_radius, spacing, center, B=balance, n_bins=n_bins)
    return data.with_C(estimate_harnack_C(data, model, margin=margin))


def build_ls_data(model: DriftModel, spec: Union[LSDataSpec, str, None], streams: Optional[CounterStreams] = None,
                  kernel_paths: Optional[int] = None, workers: int = 1) -> LSData:
    """LS-data from an experiment config entry; ``"auto-balanced"`` picks B so that r_F = 0.1."""
    if spec is None:
        spec = LSDataSpec()
    if spec == "auto-balanced":
        v_radius = 0.3
        return balanced_data(model, v_radius, float(ball_green(model.d, v_radius, DEFAULT_F_RADIUS)))
    if spec.balance is not None:
        return balanced_data(model, spec.v_radius, spec.balance, spec.spacing, spec.center, spec.n_bins,
                             spec.harnack_margin)
    data = LSData.build(model.d, spec.f_radius or DEFAULT_F_RADIUS, spec.v_radius, spec.spacing, spec.center,
                        n_bins=spec.n_bins)
    bad = [c for c in _geometry_conditions(data).values() if not c.passed]
    if bad:
        raise RegionError(f"LS-data geometry violates {', '.join(c.name for c in bad)}",
                          {c.name: c.detail for c in bad})
    if spec.harnack is not None:
        data = data.with_C(spec.harnack)
        data.exit_kernel(model, kernel_paths, streams, workers)
        return data
    C = estimate_harnack_C(data, model, kernel_paths, margin=spec.harnack_margin, streams=streams, workers=workers)
    return data.with_C(C)

# ============================================================================
# 🎲 κ AND SWEEPING
# ============================================================================


def kappa_local(data: LSData, model: DriftModel, y_local: np.ndarray, z_local: np.ndarray) -> np.ndarray:
    """κ = (1/C)·dε(x,V_x)/dε(y,V_x)(z) with y, z relative to the site x."""
    C = data.require_C()
    y_local = np.atleast_2d(np.asarray(y_local, dtype=float))
    z_local = np.atleast_2d(np.asarray(z_local, dtype=float))
    tol = settings.SNAP_TOLERANCE
    outside = np.linalg.norm(y_local, axis=1) > data.F.radius_toward(y_local) * (1 + tol) + tol
    if outside.any():
        raise RegionError("entry point y is not in F_x", {"y": y_local[outside][0].tolist()})
    off = np.abs(np.linalg.norm(z_local, axis=1) - data.V.radius) > tol * max(1.0, data.V.radius)
    if off.any():
        raise RegionError("exit point z is off ∂V_x beyond the snap tolerance",
                          {"z": z_local[off][0].tolist(), "radius": data.V.radius})
    kappa = data.exit_kernel(model).ratio(y_local, z_local) / C
    low, high = 1.0 / (C * C), 1.0
    bad = (kappa <= low - 1e-12) | (kappa > high + 1e-12)
    if bad.any():
        raise NegativeSweepMassError(f"κ={kappa[bad][0]:.6g} outside (1/C², 1]: C={C:.4f} is underestimated",
                                     {"C": C, "kappa": float(kappa[bad][0])})
    return np.minimum(kappa, 1.0)


def kappa(x: Site, y, z, data: LSData, model: DriftModel) -> Union[float, np.ndarray]:
    """κ(x, y, z) for points y, z given in ℝ^d coordinates."""
    site = data.lattice.site_real(np.asarray(x, dtype=np.int64)[None])
    y = np.asarray(y, dtype=float)
    values = kappa_local(data, model, np.atleast_2d(y) - site, np.atleast_2d(np.asarray(z, dtype=float)) - site)
    return float(values[0]) if y.ndim == 1 else values


@dataclass(frozen=True)
class KappaParams:
    """One acceptance probability: site x, entry y ∈ F_x, exit z ∈ ∂V_x."""
    site: Site
    y: Tuple[float, ...]
    z: Tuple[float, ...]
    value: float

    def __post_init__(self):
        debug_assert(0.0 < self.value <= 1.0, "κ must lie in (0, 1]", {"site": self.site, "kappa": self.value})

    @classmethod
    def at(cls, x: Site, y, z, data: LSData, model: DriftModel) -> 'KappaParams':
        value = kappa(x, np.asarray(y, dtype=float), np.asarray(z, dtype=float), data, model)
        return cls(tuple(int(c) for c in x), tuple(float(c) for c in np.ravel(y)),
                   tuple(float(c) for c in np.ravel(z)), float(value))


def make_kappa_fn(data: LSData, model: DriftModel) -> Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]:
    def fn(sites, y_local, z_local):
        if not len(sites):
            return np.zeros(0)
        return kappa_local(data, model, y_local, z_local)
    return fn


@dataclass(frozen=True, eq=False)
class SweepMeasure:
    """Finite measure as free weighted points plus (site, ∂V bin) atoms."""
    points: Tuple[Tuple[DeckPoint, float], ...] = ()
    bins: Dict[Tuple[Site, int], float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return math.fsum([w for _, w in self.points] + list(self.bins.values()))

    def atoms(self, data: LSData) -> List[Tuple[DeckPoint, float]]:
        reps = data.binning.reps * data.V.radius
        out = list(self.points)
        for (site, b), w in self.bins.items():
            out.append((data.lattice.point_at(np.asarray(site, dtype=np.int64)[None], reps[b][None]), w))
        return out

    def site_masses(self) -> FiniteMeasure:
        masses: Dict[Site, List[float]] = {}
        for (site, _), w in self.bins.items():
            masses.setdefault(site, []).append(w)
        return FiniteMeasure({s: math.fsum(ws) for s, ws in masses.items()})


@dataclass(frozen=True)
class SweepResult:
    mu_prime: SweepMeasure
    mu_second: FiniteMeasure
    se: Dict[Site, float]
    timeout_mass: float
    n: int


@debug_timer
def sweep_step(mu: SweepMeasure, data: LSData, model: DriftModel, n_paths: int, streams: CounterStreams,
               round_index: int = 0, workers: int = 1) -> SweepResult:
    """(μ′, μ″): μ″ = (1/C)Σ β_μ(F_x)δ_x, μ′ = Σ∫β_μ(dy)(ε_y − ε_x/C) over ∂V bins."""
    C = data.require_C()
    kernel = data.exit_kernel(model)
    total = mu.total
    if total <= 0:
        return SweepResult(SweepMeasure(), FiniteMeasure(), {}, 0.0, 0)
    key = round_index << ROUND_KEY_SHIFT
    starts, weight = allocate_paths(mu.atoms(data), n_paths, streams.generator(Purpose.SWEEP, key | ALLOCATION_BLOCK))
    blocks = streams.blocks(n_paths)

    def block(b):
        _, first, count = blocks[b]
        return hit_time(model, starts[first:first + count], data.F, streams.generator(Purpose.SWEEP, key | b))

    parts = run_blocks(block, len(blocks), workers)
    ok = np.concatenate([~p.timed_out for p in parts])
    sites = np.vstack([p.site for p in parts])[ok]
    local = np.vstack([p.local for p in parts])[ok]
    timeout_mass = weight * float((~ok).sum())
    if not len(sites):
        return SweepResult(SweepMeasure(), FiniteMeasure(), {}, timeout_mass, n_paths)

    rows = kernel.row_for_entry(local)
    contrib = weight * (rows - kernel.center_row[None, :] / C)
    if contrib.min() < -1e-12 * weight:
        i, b = np.unravel_index(np.argmin(contrib), contrib.shape)
        raise NegativeSweepMassError(f"μ′ is negative in bin {int(b)}: C={C:.4f} is underestimated",
                                     {"C": C, "site": sites[i].tolist(), "bin": int(b),
                                      "value": float(contrib[i, b])})
    contrib = np.maximum(contrib, 0.0)
    uniq, inverse, counts = np.unique(sites, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    per_site = np.zeros((len(uniq), contrib.shape[1]))
    np.add.at(per_site, inverse, contrib)
    keys = [tuple(int(c) for c in s) for s in uniq]
    bins = {(site, int(b)): float(per_site[i, b])
            for i, site in enumerate(keys) for b in np.flatnonzero(per_site[i] > settings.PRUNE_THRESHOLD)}
    second = FiniteMeasure({site: weight * int(c) / C for site, c in zip(keys, counts)})
    p = counts / n_paths
    se = {site: (weight * n_paths / C) * math.sqrt(q * (1 - q) / n_paths) for site, q in zip(keys, p)}
    mu_prime = SweepMeasure((), bins)
    debug_assert(abs(mu_prime.total + second.total + timeout_mass - total) <= 1e-9 * max(total, 1.0),
                 "sweep mass bookkeeping broken",
                 {"in": total, "prime": mu_prime.total, "second": second.total, "timeout": timeout_mass})
    SWEEP_ROUNDS.inc()
    return SweepResult(mu_prime, second, se, timeout_mass, n_paths)

# ============================================================================
# 🔁 RECURSIVE LS-MEASURES
# ============================================================================


def round_cap(C: float, tol: float) -> int:
    return int(math.ceil(math.log(tol) / math.log(1.0 - 1.0 / (C * C)))) + settings.ROUND_SLACK


def initial_measure(start: DeckPoint, data: LSData, model: DriftModel) -> SweepMeasure:
    """δ_y off X; ε(y, V_y) as bin atoms when y is a site."""
    site, local = data.lattice.nearest(start.cell[:1], start.offset[:1])
    if np.all(local == 0.0):
        center = data.exit_kernel(model).center_row
        key = tuple(int(c) for c in site[0])
        return SweepMeasure((), {(key, int(b)): float(w) for b, w in enumerate(center) if w > 0})
    return SweepMeasure(((start[:1], 1.0),))


@dataclass(frozen=True)
class LSMeasureResult:
    mu: FiniteMeasure
    se: Dict[Site, float]
    residual_mass: float
    rounds: int
    tau_masses: Tuple[float, ...]
    residuals: Tuple[float, ...]
    # binomial SE of the cumulative timeout mass; given the timeouts the residual is exact
    timeout_se: Tuple[float, ...]
    timeout_mass: float
    C: float
    n_paths: int

    def to_csv(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["site", "mass", "se"])
            for site, mass in self.mu.items():
                writer.writerow([" ".join(str(c) for c in site), repr(mass), repr(self.se.get(site, 0.0))])


def _as_point(y) -> DeckPoint:
    return y[:1] if isinstance(y, DeckPoint) else DeckPoint.from_real(y)


@debug_timer
def ls_measure_recursive(y, data: LSData, model: DriftModel, tol: Optional[float] = None, n_paths: int = 10_000,
                         streams: Optional[CounterStreams] = None, workers: int = 1) -> LSMeasureResult:
    """μ_y = Σ τ_{y,n}, sweeping μ_{y,n} until the residual mass drops below tol."""
    tol = settings.LS_TOL if tol is None else tol
    if not 0 < tol < 1:
        raise ValueError("tol must lie in (0, 1)")
    C = data.require_C()
    streams = streams or CounterStreams(settings.SEED or 0)
    start = _as_point(y)
    cap = round_cap(C, tol)
    mu = initial_measure(start, data, model)
    accumulated: List[FiniteMeasure] = []
    variances: Dict[Site, float] = {}
    taus, residuals, timeout_se = [], [], []
    timeouts = 0.0
    rounds = 0
    with DebugContext("ls_measure_recursive", C=C, tol=tol, n_paths=n_paths):
        while mu.total >= tol:
            if rounds >= cap:
                raise DecayContractError(f"residual {mu.total:.3g} still above tol={tol:g} after {rounds} rounds",
                                         {"rounds": rounds, "cap": cap, "residual": mu.total, "C": C})
            step_result = sweep_step(mu, data, model, n_paths, streams, rounds + 1, workers)
            rounds += 1
            accumulated.append(step_result.mu_second)
            for site, s in step_result.se.items():
                variances[site] = variances.get(site, 0.0) + s * s
            timeouts += step_result.timeout_mass
            mu = step_result.mu_prime
            taus.append(step_result.mu_second.total)
            residuals.append(mu.total)
            timeout_se.append(math.sqrt(max(timeouts * (1 - timeouts), 0.0) / n_paths))
            logger.debug(f"🔁 round {rounds}: τ mass {taus[-1]:.5f}, residual {residuals[-1]:.5f}")
    result = LSMeasureResult(FiniteMeasure.mixture((1.0, m) for m in accumulated),
                             {s: math.sqrt(v) for s, v in variances.items()}, mu.total, rounds, tuple(taus),
                             tuple(residuals), tuple(timeout_se), timeouts, C, n_paths)
    debug_assert(abs(result.mu.total + result.residual_mass + timeouts - 1.0) <= 1e-9,
                 "LS-measure mass bookkeeping broken",
                 {"mu": result.mu.total, "residual": result.residual_mass, "timeout": timeouts})
    return result


@dataclass(frozen=True)
class ResidualDecayReport:
    rounds: Tuple[int, ...]
    residuals: Tuple[float, ...]
    bounds: Tuple[float, ...]

    @property
    def passed(self) -> bool:
        return all(r <= b for r, b in zip(self.residuals, self.bounds))

    @property
    def worst_slack(self) -> float:
        return min((b - r for r, b in zip(self.residuals, self.bounds)), default=0.0)


def residual_decay_report(result: LSMeasureResult, z: float = 4.0) -> ResidualDecayReport:
    """Residual after n sweeps against (1 − 1/C²)ⁿ + z·SE, SE that of the timeout mass so far."""
    q = 1.0 - 1.0 / (result.C ** 2)
    rounds = tuple(range(1, result.rounds + 1))
    bounds = tuple(q ** n + z * se for n, se in zip(rounds, result.timeout_se))
    return ResidualDecayReport(rounds, result.residuals, bounds)


def _bin_compositions(x: Site, data: LSData, model: DriftModel, n_paths: int, tol: Optional[float],
                      streams: CounterStreams, workers: int) -> Tuple[List[LSMeasureResult], np.ndarray]:
    kernel = data.exit_kernel(model)
    reps = data.binning.reps * data.V.radius
    site = np.asarray(x, dtype=np.int64)[None]
    per_bin = max(200, n_paths // data.binning.n_bins)
    results = []
    for b, z in enumerate(reps):
        point = data.lattice.point_at(site, z[None])
        results.append(ls_measure_recursive(point, data, model, tol, per_bin, streams.derive(b), workers))
    return results, kernel.center_row


def _compose(terms: Sequence[Tuple[float, LSMeasureResult]]) -> Tuple[FiniteMeasure, Dict[Site, float]]:
    mu = FiniteMeasure.mixture((c, r.mu) for c, r in terms if c > 0)
    var: Dict[Site, float] = {}
    for c, r in terms:
        for s, e in r.se.items():
            var[s] = var.get(s, 0.0) + (c * e) ** 2
    return mu, {s: math.sqrt(v) for s, v in var.items()}


def lsm_property_rhs3(x: Site, data: LSData, model: DriftModel, n_paths: int = 10_000, tol: Optional[float] = None,
                      streams: Optional[CounterStreams] = None,
                      workers: int = 1) -> Tuple[FiniteMeasure, Dict[Site, float]]:
    """∫_{∂V_x} ε_x(dz) μ_z, composed over ∂V bins."""
    streams = streams or CounterStreams(settings.SEED or 0)
    results, center = _bin_compositions(x, data, model, n_paths, tol, streams, workers)
    return _compose(list(zip(center, results)))


def lsm_property_rhs4(y, x: Site, data: LSData, model: DriftModel, n_paths: int = 10_000,
                      tol: Optional[float] = None, streams: Optional[CounterStreams] = None,
                      workers: int = 1) -> Tuple[FiniteMeasure, Dict[Site, float]]:
    """(1/C)δ_x + ∫ ε_x(dz)(dε(y,V_x)/dε(x,V_x) − 1/C) μ_z for y ∈ F_x."""
    C = data.require_C()
    streams = streams or CounterStreams(settings.SEED or 0)
    site = data.lattice.site_real(np.asarray(x, dtype=np.int64)[None])
    y_local = np.atleast_2d(np.asarray(y, dtype=float)) - site
    if np.linalg.norm(y_local) > data.F.radius_toward(y_local)[0] * (1 + settings.SNAP_TOLERANCE):
        raise RegionError("y must lie in F_x", {"y": np.asarray(y).tolist(), "site": list(x)})
    results, center = _bin_compositions(x, data, model, n_paths, tol, streams, workers)
    row_y = data.exit_kernel(model).row_for_entry(y_local)[0]
    coefs = [max(ry - cx / C, 0.0) for ry, cx in zip(row_y, center)]
    mu, se = _compose(list(zip(coefs, results)))
    return mu + FiniteMeasure.dirac(tuple(int(c) for c in x), 1.0 / C), se

# ============================================================================
# 🪙 PATH DISCRETIZATION
# ============================================================================


@dataclass(frozen=True)
class DiscretizedPath:
    indices: np.ndarray
    sites: np.ndarray
    times: np.ndarray
    complete: bool


def path_entries(ensemble: PathEnsemble, path: int) -> EntryRecords:
    e = ensemble.entries
    mask = e.path == np.uint64(path)
    return EntryRecords(*(getattr(e, f)[mask] for f in EntryRecords.FIELDS))


def discretize_path(entries: EntryRecords, alpha: np.ndarray, data: Optional[LSData] = None,
                    model: Optional[DriftModel] = None, k: Optional[int] = None,
                    kappa_values=None) -> DiscretizedPath:
    """N_k = successive n with α_n < κ(X_n, Y_n, Z_n); T_k = S_{N_k}.

    Entry n (counted from 1) is compared with ``alpha[n-1]``. ``kappa_values``
    overrides κ, e.g. a constant for synthetic runs.
    """
    m = len(entries)
    if kappa_values is not None:
        kap = np.broadcast_to(np.asarray(kappa_values, dtype=float), (m,))
    elif m and np.all(np.isfinite(entries.kappa)):
        kap = entries.kappa
    elif m:
        kap = kappa_local(data, model, entries.enter_local, entries.exit_local)
    else:
        kap = np.zeros(0)
    alpha = np.asarray(alpha, dtype=float)
    if len(alpha) < m:
        raise ValueError(f"alpha stream has {len(alpha)} values for {m} entries")
    accept = alpha[:m] < kap
    idx = np.flatnonzero(accept)
    if k is not None:
        idx = idx[:k]
    complete = k is None or len(idx) >= k
    if not complete:
        logger.debug(f"path exhausted after {m} entries with {len(idx)}/{k} acceptances")
    return DiscretizedPath(entries.index[idx] + 1, entries.site[idx], entries.exit_time[idx], complete)


@dataclass(frozen=True, eq=False)
class DiscretizedChain:
    """X_{N_1}, …, X_{N_k} per path, with tallies for Markov tests."""
    sites: np.ndarray
    counts: np.ndarray
    k_steps: int
    ensemble: PathEnsemble

    @property
    def n(self) -> int:
        return len(self.counts)

    @property
    def complete_fraction(self) -> float:
        return float((self.counts >= self.k_steps).mean())

    def marginal(self, step: int = 1) -> FiniteMeasure:
        """Law of X_{N_step}, normalized by all paths."""
        keep = self.counts >= step
        sites, counts = np.unique(self.sites[keep, step - 1], axis=0, return_counts=True)
        return FiniteMeasure({tuple(int(c) for c in s): int(n) / self.n for s, n in zip(sites, counts)})

    def transitions(self, step: int) -> Dict[Tuple[Site, Site], int]:
        """Counts of (X_{N_step}, X_{N_step+1}) pairs."""
        keep = self.counts >= step + 1
        pairs = np.hstack([self.sites[keep, step - 1], self.sites[keep, step]])
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        d = self.sites.shape[2]
        return {(tuple(int(c) for c in u[:d]), tuple(int(c) for c in u[d:])): int(n) for u, n in zip(uniq, counts)}

    def displacements(self, step: int) -> Dict[Tuple[Site, Site], int]:
        """Counts of (X_{N_step}, X_{N_step+1} − X_{N_step})."""
        return {(a, tuple(q - p for p, q in zip(a, b))): n for (a, b), n in self.transitions(step).items()}

    def triples(self, step: int) -> Dict[Tuple[Site, Site, Site], int]:
        """Counts of (X_{N_step−1}, X_{N_step}, X_{N_step+1})."""
        keep = self.counts >= step + 1
        d = self.sites.shape[2]
        trip = np.hstack([self.sites[keep, step - 2], self.sites[keep, step - 1], self.sites[keep, step]])
        uniq, counts = np.unique(trip, axis=0, return_counts=True)
        return {(tuple(int(c) for c in u[:d]), tuple(int(c) for c in u[d:2 * d]), tuple(int(c) for c in u[2 * d:])):
                int(n) for u, n in zip(uniq, counts)}


@debug_timer
def sample_discretized_chain(y, k_steps: int, data: LSData, model: DriftModel, n_paths: int,
                             streams: Optional[CounterStreams] = None, max_entries: int = 200,
                             t_max: Optional[float] = None, workers: int = 1) -> DiscretizedChain:
    """Simulate LS paths with online κ-rejection and keep the first k accepted sites."""
    if k_steps < 1:
        raise ValueError("k_steps must be at least 1")
    streams = streams or CounterStreams(settings.SEED or 0)
    ensemble = simulate_ls_paths(model, data.F, data.V, _as_point(y), n_paths, streams, make_kappa_fn(data, model),
                                 k_accept=k_steps, max_entries=max_entries, t_max=t_max, workers=workers)
    short = float((ensemble.accepted_count < k_steps).mean())
    if short > 0:
        logger.info(f"⚠️ {short:.2%} of chains stopped before {k_steps} steps")
    return DiscretizedChain(ensemble.accepted_sites, ensemble.accepted_count, k_steps, ensemble)

# ============================================================================
# 🌿 CHAIN GREEN FUNCTIONS
# ============================================================================


@dataclass(frozen=True)
class ChainGreenEstimate:
    value: float
    se: float
    upper: float
    n: int
    k_max: int
    visits: Tuple[float, ...]
    tail_bound: float
    decay_exponent: Optional[float]
    exhausted_fraction: float


def _require_transient(model: DriftModel):
    if not model.transient:
        raise PreconditionError("the chain Green function needs a transient model (d = 3)", {"d": model.d})


def _is_site_point(start: DeckPoint, x: Site, data: LSData) -> bool:
    site, local = data.lattice.nearest(start.cell, start.offset)
    return bool(np.all(local == 0.0) and tuple(int(c) for c in site[0]) == tuple(x))


@debug_timer
def chain_green_estimate(y, x: Site, data: LSData, model: DriftModel, n_paths: int, k_max: int,
                         streams: Optional[CounterStreams] = None, max_entries: int = 400,
                         workers: int = 1) -> ChainGreenEstimate:
    """g(y,x) = δ_y(x) + Σ_{k≤k_max} P̃_y(X_{N_k} = x), with a power-law tail bound.

    The tail beyond k_max is bounded by fitting v_k ~ k^{−p} on the second
    half of the observed visit probabilities; p ≤ 1 means the visits do
    not decay.
    """
    _require_transient(model)
    start = _as_point(y)
    delta = 1.0 if _is_site_point(start, x, data) else 0.0
    if k_max == 0:
        return ChainGreenEstimate(delta, 0.0, delta, n_paths, 0, (), 0.0, None, 0.0)
    chain = sample_discretized_chain(start, k_max, data, model, n_paths, streams, max_entries, workers=workers)
    valid = np.arange(k_max)[None, :] < chain.counts[:, None]
    hits = np.all(chain.sites == np.asarray(x, dtype=np.int64), axis=2) & valid
    per_path = hits.sum(axis=1)
    visits = hits.mean(axis=0)
    value = delta + float(per_path.mean())
    se = float(per_path.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("inf")

    ks = np.arange(1, k_max + 1)
    half = ks >= max(1, k_max // 2)
    usable = half & (visits > 0)
    exponent, tail = None, 0.0
    if usable.sum() >= 3:
        slope, intercept = np.polyfit(np.log(ks[usable]), np.log(visits[usable]), 1)
        exponent = float(-slope)
        if exponent <= 1.0:
            raise NonDecayingVisitsError(f"visit probabilities decay like k^-{exponent:.2f}; the chain is not transient",
                                         {"exponent": exponent, "k_max": k_max})
        v_end = math.exp(intercept) * k_max ** slope
        tail = v_end * k_max / (exponent - 1.0)
    upper = value + 3.0 * se if per_path.any() else delta + 3.0 / n_paths
    exhausted = float(chain.ensemble.exhausted.mean())
    return ChainGreenEstimate(value, se, upper, n_paths, k_max, tuple(float(v) for v in visits), tail, exponent,
                              exhausted)


@dataclass(frozen=True)
class BalayageGreenReport:
    g_chain: float
    g_balayage: float
    se_diff: float
    z: float
    partial_sums: Tuple[float, ...]
    first_term: float
    n: int

    @property
    def passed(self) -> bool:
        return abs(self.z) <= settings.Z_SIGMA


@debug_timer
def balayage_green_identity_check(y, x: Site, data: LSData, model: DriftModel, n_paths: int,
                                  streams: Optional[CounterStreams] = None, max_entries: int = 50,
                                  workers: int = 1) -> BalayageGreenReport:
    """g(y,x) against (1/C)Σ_n ν_{y,n}(F_x), paired on the same paths."""
    _require_transient(model)
    C = data.require_C()
    start = _as_point(y)
    site_real = data.lattice.site_real(np.asarray(x, dtype=np.int64)[None])
    if np.linalg.norm(start.real() - site_real) < data.V.radius:
        raise PreconditionError("y must lie outside V_x", {"y": start.real()[0].tolist(), "site": list(x)})
    streams = streams or CounterStreams(settings.SEED or 0)
    ensemble = simulate_ls_paths(model, data.F, data.V, start, n_paths, streams, make_kappa_fn(data, model),
                                 k_accept=max_entries, max_entries=max_entries, workers=workers)
    e = ensemble.entries
    at_x = np.all(e.site == np.asarray(x, dtype=np.int64), axis=1)
    path = e.path.astype(np.int64)
    entries_per_path = np.bincount(path[at_x], minlength=n_paths)
    accepted_per_path = np.bincount(path[at_x & e.accepted], minlength=n_paths)
    nu = np.bincount(e.index[at_x], minlength=max_entries)[:max_entries] / n_paths
    partial = np.cumsum(nu) / C
    diff = accepted_per_path - entries_per_path / C
    se = float(diff.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("inf")
    mean = float(diff.mean())
    z = mean / se if se > 0 else (0.0 if mean == 0 else math.copysign(math.inf, mean))
    return BalayageGreenReport(float(accepted_per_path.mean()), float(entries_per_path.mean() / C), se, z,
                               tuple(float(p) for p in partial), float(partial[0]) if len(partial) else 0.0, n_paths)
