"""
🌊 Diffusions on Euclidean covers of the torus.

The generator is L = −½Δ + ⟨∇ln φ, ∇·⟩ on ℝ^d with φ periodic under ℤ^d.
Points are stored as (integer deck cell, offset in [0,1)^d): the drift only
sees the offset, so deck translations act exactly and every estimator is
bit-for-bit equivariant under stream replay.

Paths are simulated by Euler–Maruyama in fixed blocks keyed by the counter
streams of ``core``. Region crossings get one midpoint bisection and a
radial snap onto the analytic boundary.
"""

import math
import zlib
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse, stats
from scipy.spatial import ConvexHull

from .core import CounterStreams, FiniteMeasure, Purpose, run_blocks
from .debug_utils import (EmptyBinError, PreconditionError, RegionError, debug_assert,
                          debug_timer, get_logger)
from .metrics import PATHS_SIMULATED
from .settings import ModelSpec, phi_terms, settings

logger = get_logger(__name__)

TWO_PI = 2.0 * math.pi

# ============================================================================
# 🧲 DRIFT MODEL
# ============================================================================


@dataclass(frozen=True)
class DriftModel:
    """ln φ(x) = Σ a·cos(2π k·x) on ℝ^d → T^d; drift = ∇ln φ.

    With no terms (or all amplitudes zero) φ ≡ 1 and ``drift`` returns
    exact zeros without evaluating any trigonometry.
    """
    d: int
    terms: Tuple[Tuple[Tuple[int, ...], float], ...] = ()
    dt: Optional[float] = None
    t_max: Optional[float] = None
    name: str = "torus-cover"

    symmetric = True
    has_nonconstant_bounded_harmonic = False

    def __post_init__(self):
        if not 1 <= self.d <= 3:
            raise ValueError(f"d must be 1, 2 or 3, got {self.d}")
        for k, _ in self.terms:
            if len(k) != self.d:
                raise ValueError(f"wave vector {k} does not match d={self.d}")
        if self.dt is None:
            object.__setattr__(self, "dt", settings.default_dt(self.d))
        if self.t_max is None:
            object.__setattr__(self, "t_max", settings.T_MAX)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        waves = np.array([k for k, _ in self.terms], dtype=float).reshape(-1, self.d)
        object.__setattr__(self, "_waves", waves)
        object.__setattr__(self, "_amps", np.array([a for _, a in self.terms], dtype=float))

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> 'DriftModel':
        return cls(spec.d, phi_terms(spec), spec.dt, spec.t_max, spec.family)

    @property
    def is_brownian(self) -> bool:
        return not np.any(self._amps)

    @property
    def transient(self) -> bool:
        return self.d >= 3

    def log_phi(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.is_brownian:
            return np.zeros(len(x))
        return np.cos(TWO_PI * x @ self._waves.T) @ self._amps

    def phi(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_phi(x))

    def drift(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.is_brownian:
            return np.zeros_like(x, dtype=float)
        return -(np.sin(TWO_PI * x @ self._waves.T) * self._amps) @ (TWO_PI * self._waves)

# ============================================================================
# 📍 DECK POINTS AND SITES
# ============================================================================


def _normalize(cell: np.ndarray, offset: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    shift = np.floor(offset)
    offset = offset - shift
    cell = cell + shift.astype(np.int64)
    over = offset >= 1.0
    if over.any():
        offset = np.where(over, offset - 1.0, offset)
        cell = cell + over.astype(np.int64)
    return cell, offset


@dataclass(frozen=True, eq=False)
class DeckPoint:
    """A batch of points of ℝ^d as integer cell plus offset in [0,1)^d."""
    cell: np.ndarray
    offset: np.ndarray

    @classmethod
    def from_real(cls, x) -> 'DeckPoint':
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cell = np.floor(x).astype(np.int64)
        return cls(*_normalize(cell, x - cell))

    @classmethod
    def from_parts(cls, cell, offset) -> 'DeckPoint':
        return cls(*_normalize(np.atleast_2d(np.asarray(cell, dtype=np.int64)),
                               np.atleast_2d(np.asarray(offset, dtype=float))))

    @property
    def d(self) -> int:
        return self.cell.shape[1]

    def __len__(self) -> int:
        return len(self.cell)

    def __getitem__(self, idx) -> 'DeckPoint':
        return DeckPoint(np.atleast_2d(self.cell[idx]), np.atleast_2d(self.offset[idx]))

    def real(self) -> np.ndarray:
        return self.cell + self.offset

    def project(self) -> np.ndarray:
        return self.offset.copy()

    def translate(self, gamma) -> 'DeckPoint':
        return DeckPoint(self.cell + np.asarray(gamma, dtype=np.int64), self.offset.copy())

    def repeat(self, n: int) -> 'DeckPoint':
        return DeckPoint(np.repeat(self.cell[:1], n, axis=0), np.repeat(self.offset[:1], n, axis=0))

    def same_as(self, other: 'DeckPoint') -> bool:
        return np.array_equal(self.cell, other.cell) and np.array_equal(self.offset, other.offset)


@dataclass(frozen=True, eq=False)
class SiteLattice:
    """The orbit X = center + spacing·ℤ^d, indexed by j ∈ ℤ^d.

    Site lookups split the cell by integer divmod, so a translation by
    spacing·e moves j by e and leaves the local displacement bit-identical.
    """
    d: int
    spacing: int
    center_cell: np.ndarray
    center_offset: np.ndarray

    @classmethod
    def build(cls, d: int, spacing: int = 1, center: Optional[Sequence[float]] = None) -> 'SiteLattice':
        if spacing < 1:
            raise RegionError("site spacing must be a positive integer", {"spacing": spacing})
        point = DeckPoint.from_real(np.zeros(d) if center is None else center)
        return cls(d, int(spacing), point.cell[0], point.offset[0])

    def nearest(self, cell: np.ndarray, offset: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        q, r = np.divmod(cell - self.center_cell, self.spacing)
        frac = r + (offset - self.center_offset)
        k = np.round(frac / self.spacing).astype(np.int64)
        return q + k, frac - self.spacing * k

    def displacement(self, cell: np.ndarray, offset: np.ndarray, site: np.ndarray) -> np.ndarray:
        return (cell - self.center_cell - self.spacing * site) + (offset - self.center_offset)

    def point_at(self, site: np.ndarray, local: np.ndarray) -> DeckPoint:
        site = np.atleast_2d(site)
        return DeckPoint.from_parts(self.center_cell + self.spacing * site, self.center_offset + np.atleast_2d(local))

    def site_real(self, site: np.ndarray) -> np.ndarray:
        return self.center_cell + self.spacing * np.atleast_2d(site) + self.center_offset


@dataclass(frozen=True, eq=False)
class RegionSpec:
    """A ball, the union of balls over the orbit, or an orbit of star-shaped regions.

    ``radial-profile`` (d = 2 only) gives the boundary radius at equally
    spaced angles, interpolated linearly.
    """
    kind: str
    lattice: SiteLattice
    radius: float
    site: Optional[Tuple[int, ...]] = None
    profile: Optional[Tuple[float, ...]] = None

    KINDS = ("ball", "orbit-balls", "radial-profile")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise RegionError(f"unknown region kind '{self.kind}'", {"kind": self.kind})
        if self.radius <= 0:
            raise RegionError("region radius must be positive", {"radius": self.radius})
        if self.kind == "ball" and self.site is None:
            object.__setattr__(self, "site", (0,) * self.lattice.d)
        if self.kind == "radial-profile":
            if self.lattice.d != 2 or not self.profile:
                raise RegionError("radial profiles are defined for d=2 with at least one radius",
                                  {"d": self.lattice.d})
            if min(self.profile) <= 0:
                raise RegionError("radial profile radii must be positive", {"profile": list(self.profile)})

    @property
    def max_radius(self) -> float:
        return max(self.profile) if self.kind == "radial-profile" else self.radius

    @property
    def is_ball(self) -> bool:
        return self.kind != "radial-profile"

    def radius_toward(self, local: np.ndarray) -> np.ndarray:
        local = np.atleast_2d(local)
        if self.kind != "radial-profile":
            return np.full(len(local), self.radius)
        prof = np.asarray(self.profile, dtype=float)
        m = len(prof)
        pos = (np.arctan2(local[:, 1], local[:, 0]) % TWO_PI) / TWO_PI * m
        lo = np.floor(pos).astype(int) % m
        frac = pos - np.floor(pos)
        return (1 - frac) * prof[lo] + frac * prof[(lo + 1) % m]

    def locate(self, cell: np.ndarray, offset: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(site, local displacement) of each point relative to its region center."""
        if self.kind == "ball":
            site = np.broadcast_to(np.asarray(self.site, dtype=np.int64), cell.shape).copy()
            return site, self.lattice.displacement(cell, offset, site)
        return self.lattice.nearest(cell, offset)

    def contains(self, point: DeckPoint) -> np.ndarray:
        _, local = self.locate(point.cell, point.offset)
        return np.linalg.norm(local, axis=1) <= self.radius_toward(local)

    def with_site(self, site) -> 'RegionSpec':
        return RegionSpec("ball", self.lattice, self.radius, tuple(int(s) for s in site), self.profile)

# ============================================================================
# 🧭 BOUNDARY BINNING AND POISSON KERNELS
# ============================================================================


def poisson_kernel(y: np.ndarray, z: np.ndarray, radius: float) -> np.ndarray:
    """Exit density at z ∈ ∂B(0,R) from y ∈ B(0,R) relative to the normalized surface measure.

    R^{d−2}(R² − |y|²)/|z − y|^d; broadcasts over leading axes.
    """
    d = y.shape[-1]
    num = radius ** (d - 2) * (radius * radius - np.sum(y * y, axis=-1))
    return num / np.linalg.norm(z - y, axis=-1) ** d


def _icosahedral_vertices(count: int) -> np.ndarray:
    g = (1.0 + math.sqrt(5.0)) / 2.0
    base = []
    for a in (-1.0, 1.0):
        for b in (-g, g):
            base += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    verts = np.array(base)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    while len(verts) < count:
        hull = ConvexHull(verts)
        edges = set()
        for tri in hull.simplices:
            for i in range(3):
                a, b = sorted((int(tri[i]), int(tri[(i + 1) % 3])))
                edges.add((a, b))
        mids = np.array([verts[a] + verts[b] for a, b in sorted(edges)])
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        verts = np.vstack([verts, mids])
    return verts


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    theta = math.pi * (1.0 + math.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


class BoundaryBinning:
    """Bins on the unit sphere S^{d−1}: two points, equal angles, or icosahedral Voronoi cells."""

    ICOSAHEDRAL_COUNTS = (12, 42, 162, 642)
    GAUSS_NODES = 16
    SPHERE_NODES = 20_000

    def __init__(self, d: int, n_bins: Optional[int] = None):
        self.d = d
        if d == 1:
            self.reps = np.array([[-1.0], [1.0]])
            self.weights = np.array([0.5, 0.5])
        elif d == 2:
            n = int(n_bins or 64)
            if n < 2:
                raise RegionError("need at least two boundary bins", {"n_bins": n})
            angles = (np.arange(n) + 0.5) * TWO_PI / n
            self.reps = np.column_stack([np.cos(angles), np.sin(angles)])
            self.weights = np.full(n, 1.0 / n)
            x, w = np.polynomial.legendre.leggauss(self.GAUSS_NODES)
            width = TWO_PI / n
            theta = (np.arange(n)[:, None] + (x[None, :] + 1.0) / 2.0) * width
            self._nodes = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
            self._node_weights = w * (width / 2.0) / TWO_PI
        else:
            wanted = int(n_bins or 162)
            count = next((c for c in self.ICOSAHEDRAL_COUNTS if c >= wanted), self.ICOSAHEDRAL_COUNTS[-1])
            if count != wanted:
                logger.debug(f"d=3 binning uses {count} icosahedral cells for {wanted} requested")
            self.reps = _icosahedral_vertices(count)[:count]
            self._nodes = _fibonacci_sphere(self.SPHERE_NODES)
            node_bins = self.bin_of(self._nodes)
            self._indicator = sparse.csr_matrix(
                (np.full(len(node_bins), 1.0 / len(node_bins)), (np.arange(len(node_bins)), node_bins)),
                shape=(len(node_bins), count))
            self.weights = np.bincount(node_bins, minlength=count) / len(node_bins)
        self.n_bins = len(self.reps)

    @property
    def angular_width(self) -> float:
        if self.d == 1:
            return math.pi
        if self.d == 2:
            return TWO_PI / self.n_bins
        return math.sqrt(4.0 * math.pi / self.n_bins)

    def bin_of(self, directions: np.ndarray) -> np.ndarray:
        directions = np.atleast_2d(directions)
        if self.d == 1:
            return (directions[:, 0] > 0).astype(np.int64)
        if self.d == 2:
            angle = np.arctan2(directions[:, 1], directions[:, 0]) % TWO_PI
            return np.minimum((angle / (TWO_PI / self.n_bins)).astype(np.int64), self.n_bins - 1)
        return np.argmax(directions @ self.reps.T, axis=1)

    def probabilities(self, points: np.ndarray, radius: float) -> np.ndarray:
        """Poisson-kernel exit probabilities of each bin for Brownian starts inside B(0,R)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.d == 1:
            y = points[:, 0]
            return np.column_stack([(radius - y) / (2 * radius), (radius + y) / (2 * radius)])
        if self.d == 2:
            z = radius * self._nodes
            dens = poisson_kernel(points[:, None, None, :], z[None], radius)
            return dens @ self._node_weights
        out = np.empty((len(points), self.n_bins))
        z = radius * self._nodes
        for lo in range(0, len(points), 256):
            chunk = points[lo:lo + 256]
            dens = poisson_kernel(chunk[:, None, :], z[None], radius)
            out[lo:lo + 256] = (self._indicator.T @ dens.T).T
        return out

# ============================================================================
# 👣 STEPPING AND STOPPING TIMES
# ============================================================================


def step(model: DriftModel, point: DeckPoint, rng: Optional[np.random.Generator] = None,
         noise: Optional[np.ndarray] = None, dt: Optional[float] = None) -> DeckPoint:
    """One Euler–Maruyama increment x ← x + ∇lnφ(x)·dt + √dt·ξ."""
    dt = model.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    if noise is None:
        noise = rng.standard_normal(point.offset.shape)
    incr = model.drift(point.offset) * dt + math.sqrt(dt) * np.asarray(noise, dtype=float)
    return DeckPoint(*_normalize(point.cell, point.offset + incr))


@dataclass(frozen=True, eq=False)
class Crossing:
    """Result of a stopping time: time, snapped point, its site and local displacement."""
    time: np.ndarray
    point: DeckPoint
    site: np.ndarray
    local: np.ndarray
    timed_out: np.ndarray


class _Enter:
    def __init__(self, region: RegionSpec):
        self.region = region

    def __call__(self, cell, offset, rows):
        site, local = self.region.locate(cell, offset)
        radius = self.region.radius_toward(local)
        return np.linalg.norm(local, axis=1) <= radius, site, local, radius


class _Leave:
    def __init__(self, region: RegionSpec, sites: np.ndarray):
        self.region = region
        self.sites = sites

    def __call__(self, cell, offset, rows):
        site = self.sites[rows]
        local = self.region.lattice.displacement(cell, offset, site)
        radius = self.region.radius_toward(local)
        return np.linalg.norm(local, axis=1) >= radius, site, local, radius


def _run_until(model: DriftModel, start: DeckPoint, region: RegionSpec, crossed, rng: np.random.Generator,
               t0, t_max: Optional[float], extend: bool = True) -> Crossing:
    n, d = start.cell.shape
    dt = model.dt
    root_dt = math.sqrt(dt)
    cell = start.cell.copy()
    offset = start.offset.copy()
    t = np.broadcast_to(np.asarray(t0, dtype=float), (n,)).copy()
    site = np.zeros((n, d), dtype=np.int64)
    local = np.zeros((n, d))
    timed_out = np.zeros(n, dtype=bool)
    hit, s0, l0, _ = crossed(cell, offset, np.arange(n))
    site[hit] = s0[hit]
    local[hit] = l0[hit]
    active = np.flatnonzero(~hit)
    horizon = float(model.t_max if t_max is None else t_max)
    extended = not extend
    while active.size:
        late = t[active] + 0.5 * dt >= horizon
        if late.any():
            if not extended:
                extended = True
                horizon *= 2.0
                logger.debug(f"⏳ {int(late.sum())} paths reached t_max; doubling the horizon to {horizon:g}")
                continue
            timed_out[active[late]] = True
            active = active[~late]
            continue
        c, o = cell[active], offset[active]
        incr = model.drift(o) * dt + root_dt * rng.standard_normal((active.size, d))
        nc, no = _normalize(c, o + incr)
        hit, hs, hl, hr = crossed(nc, no, active)
        t[active] += dt
        cell[active] = nc
        offset[active] = no
        if hit.any():
            h = np.flatnonzero(hit)
            rows = active[h]
            mc, mo = _normalize(c[h], o[h] + 0.5 * incr[h])
            mhit, ms, ml, mr = crossed(mc, mo, rows)
            s_h = np.where(mhit[:, None], ms, hs[h])
            l_h = np.where(mhit[:, None], ml, hl[h])
            r_h = np.where(mhit, mr, hr[h])
            t[rows] -= np.where(mhit, 0.5 * dt, 0.0)
            norm = np.maximum(np.linalg.norm(l_h, axis=1), 1e-300)
            snapped = l_h * (r_h / norm)[:, None]
            point = region.lattice.point_at(s_h, snapped)
            cell[rows] = point.cell
            offset[rows] = point.offset
            site[rows] = s_h
            local[rows] = snapped
            active = active[~hit]
    if timed_out.any():
        logger.debug(f"⌛ {int(timed_out.sum())}/{n} paths timed out at t={horizon:g}")
    return Crossing(t, DeckPoint(cell, offset), site, local, timed_out)


def hit_time(model: DriftModel, start: DeckPoint, F: RegionSpec, rng: np.random.Generator,
             t0=0.0, t_max: Optional[float] = None, extend: bool = True) -> Crossing:
    """R^F: first time in F, with the entry point snapped onto ∂F.

    Starts inside F stop at time t0 where they are. Paths still running at
    t_max get one doubled horizon (unless ``extend`` is false), then are
    reported as timed out at their current position.
    """
    return _run_until(model, start, F, _Enter(F), rng, t0, t_max, extend)


def exit_time(model: DriftModel, start: DeckPoint, V: RegionSpec, rng: np.random.Generator,
              sites: Optional[np.ndarray] = None, t0=0.0, t_max: Optional[float] = None) -> Crossing:
    """S^V: first time outside V around the given sites, exit point snapped onto ∂V."""
    if sites is None:
        sites, _ = V.locate(start.cell, start.offset)
    return _run_until(model, start, V, _Leave(V, np.asarray(sites, dtype=np.int64)), rng, t0, t_max)

# ============================================================================
# 🎯 EXIT MEASURES AND BALAYAGE
# ============================================================================


@dataclass(frozen=True)
class ExitMeasureEstimate:
    probabilities: np.ndarray
    se: np.ndarray
    counts: np.ndarray
    n: int
    timeout_mass: float
    sparse_bins: Tuple[int, ...]

    @property
    def total(self) -> float:
        return float(self.probabilities.sum())


def _block_streams(streams: CounterStreams, purpose: Purpose, offset: int = 0):
    return lambda b: streams.generator(purpose, offset + b)


@debug_timer
def exit_measure_estimate(model: DriftModel, V: RegionSpec, y_local, n_paths: int, binning: BoundaryBinning,
                          streams: CounterStreams, purpose: Purpose = Purpose.EXIT_KERNEL,
                          workers: int = 1) -> ExitMeasureEstimate:
    """Histogram of ε(y, V_x) over boundary bins, normalized over paths that exited."""
    y_local = np.atleast_2d(np.asarray(y_local, dtype=float))
    site = np.asarray(V.site if V.kind == "ball" and V.site else (0,) * model.d, dtype=np.int64)
    if np.linalg.norm(y_local) > V.radius_toward(y_local)[0] * (1 + settings.SNAP_TOLERANCE):
        raise RegionError("exit measure needs a start inside V", {"start": y_local.ravel().tolist()})
    region = V.with_site(site) if V.kind == "ball" else V
    start = region.lattice.point_at(site[None], y_local)
    gens = _block_streams(streams, purpose)
    blocks = streams.blocks(n_paths)

    def block(b):
        _, _, count = blocks[b]
        res = exit_time(model, start.repeat(count), region, gens(b), sites=np.repeat(site[None], count, axis=0))
        dirs = res.local / np.maximum(np.linalg.norm(res.local, axis=1, keepdims=True), 1e-300)
        return binning.bin_of(dirs)[~res.timed_out], int(res.timed_out.sum())

    parts = run_blocks(block, len(blocks), workers)
    PATHS_SIMULATED.labels(engine="diffusion").inc(n_paths)
    bins = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, dtype=np.int64)
    timeouts = sum(p[1] for p in parts)
    counts = np.bincount(bins, minlength=binning.n_bins)
    n_ok = max(int(counts.sum()), 1)
    probs = counts / n_ok
    se = np.sqrt(probs * (1 - probs) / n_ok)
    sparse_bins = tuple(int(b) for b in np.flatnonzero(counts < 5))
    if sparse_bins:
        logger.warning(f"⚠️ {len(sparse_bins)} exit bins have fewer than 5 counts; use fewer bins or more paths")
    return ExitMeasureEstimate(probs, se, counts, n_ok, timeouts / max(n_paths, 1), sparse_bins)


class ExitKernel:
    """Exit distributions ε(y, V_x) over ∂V bins for starts y in F_x, at the base site.

    Brownian balls use the Poisson kernel; drift models estimate each row by
    Monte Carlo and smooth densities with an Epanechnikov window of
    ``SMOOTHING_BINS`` bin widths. Rows are reused orbit-wide.
    """

    def __init__(self, model: DriftModel, F: RegionSpec, V: RegionSpec, binning: BoundaryBinning,
                 n_paths: int = 4000, streams: Optional[CounterStreams] = None, workers: int = 1):
        self.model = model
        self.F = F
        self.V = V.with_site((0,) * model.d) if V.kind != "radial-profile" else V
        self.binning = binning
        self.n_paths = n_paths
        self.streams = streams or CounterStreams(0)
        self.workers = workers
        self.analytic = model.is_brownian and V.is_ball
        self.radius = V.radius
        self._rows: Dict[bytes, np.ndarray] = {}
        self._lock = threading.Lock()
        self._entry_rows: Optional[np.ndarray] = None
        self.center_row = self.row_at(np.zeros((1, model.d)))[0]

    def _estimate(self, point: np.ndarray) -> np.ndarray:
        key = np.round(point, 12).tobytes()
        with self._lock:
            if key in self._rows:
                return self._rows[key]
        salt = zlib.crc32(key)
        est = exit_measure_estimate(self.model, self.V, point, self.n_paths, self.binning,
                                    self.streams.derive(salt), workers=self.workers)
        with self._lock:
            self._rows[key] = est.probabilities
        return est.probabilities

    def row_at(self, local: np.ndarray) -> np.ndarray:
        local = np.atleast_2d(np.asarray(local, dtype=float))
        if self.analytic:
            probs = self.binning.probabilities(local, self.radius)
            return probs / probs.sum(axis=1, keepdims=True)
        return np.vstack([self._estimate(p) for p in local])

    def entry_points(self) -> np.ndarray:
        reps = self.binning.reps
        return reps * self.F.radius_toward(reps)[:, None]

    def entry_rows(self) -> np.ndarray:
        if self._entry_rows is None:
            self._entry_rows = self.row_at(self.entry_points())
        return self._entry_rows

    def row_for_entry(self, local: np.ndarray) -> np.ndarray:
        """Exit rows for F-entry points; ∂F points share their entry-bin row unless rows are cheap."""
        local = np.atleast_2d(local)
        if self.analytic and self.model.d <= 2:
            return self.row_at(local)
        norm = np.linalg.norm(local, axis=1)
        inside = norm < self.F.radius_toward(local) * (1 - 1e-9)
        rows = np.empty((len(local), self.binning.n_bins))
        on_edge = ~inside
        if on_edge.any():
            dirs = local[on_edge] / norm[on_edge, None]
            rows[on_edge] = self.entry_rows()[self.binning.bin_of(dirs)]
        if inside.any():
            rows[inside] = self.row_at(local[inside])
        return rows

    def density(self, rows: np.ndarray, z_local: np.ndarray) -> np.ndarray:
        """Smoothed exit density at z relative to the normalized surface measure."""
        rows = np.atleast_2d(rows)
        z_local = np.atleast_2d(z_local)
        dirs = z_local / np.linalg.norm(z_local, axis=1, keepdims=True)
        per_bin = rows / self.binning.weights
        if self.model.d == 1:
            b = self.binning.bin_of(dirs)
            return per_bin[np.arange(len(per_bin)) if len(per_bin) > 1 else 0, b]
        angle = np.arccos(np.clip(dirs @ self.binning.reps.T, -1.0, 1.0))
        width = settings.SMOOTHING_BINS * self.binning.angular_width
        weights = np.clip(1.0 - (angle / width) ** 2, 0.0, None)
        return (weights * per_bin).sum(axis=1) / weights.sum(axis=1)

    def ratio(self, y_local: np.ndarray, z_local: np.ndarray) -> np.ndarray:
        """dε(x, V_x)/dε(y, V_x) at z ∈ ∂V_x."""
        y_local = np.atleast_2d(y_local)
        z_local = np.atleast_2d(z_local)
        if self.analytic:
            z = z_local * (self.radius / np.linalg.norm(z_local, axis=1))[:, None]
            return 1.0 / poisson_kernel(y_local, z, self.radius)
        dens_y = self.density(self.row_for_entry(y_local), z_local)
        if np.any(dens_y <= 0):
            raise EmptyBinError("Exit density from an F point vanishes near z; use fewer bins or more kernel paths",
                                {"n_bins": self.binning.n_bins, "kernel_paths": self.n_paths})
        return self.density(self.center_row[None, :], z_local) / dens_y


@dataclass(frozen=True)
class BalayageEstimate:
    components: FiniteMeasure
    entries: FiniteMeasure
    se: Dict[Tuple[int, ...], float]
    timeout_mass: float
    n: int


@debug_timer
def balayage_estimate(model: DriftModel, start: Union[DeckPoint, Sequence[Tuple[DeckPoint, float]]], F: RegionSpec,
                      n_paths: int, streams: CounterStreams, binning: Optional[BoundaryBinning] = None,
                      purpose: Purpose = Purpose.BALAYAGE, workers: int = 1) -> BalayageEstimate:
    """β(start, F): masses of the components F_x and binned entry points on ∂F_x.

    ``start`` is one point or a list of (point, weight) atoms; paths are
    allocated to atoms by systematic resampling.
    """
    atoms = [(start, 1.0)] if isinstance(start, DeckPoint) else list(start)
    starts, weight = allocate_paths(atoms, n_paths, streams.generator(purpose, (1 << 40)))
    blocks = streams.blocks(n_paths)
    gens = _block_streams(streams, purpose)

    def block(b):
        _, first, count = blocks[b]
        res = hit_time(model, starts[slice(first, first + count)], F, gens(b))
        return res

    parts = run_blocks(block, len(blocks), workers)
    PATHS_SIMULATED.labels(engine="diffusion").inc(n_paths)
    comp: Dict[Tuple[int, ...], float] = {}
    entries: Dict[Tuple[Tuple[int, ...], int], float] = {}
    counts: Dict[Tuple[int, ...], int] = {}
    timeouts = 0
    for res in parts:
        ok = ~res.timed_out
        timeouts += int((~ok).sum())
        if binning is not None and ok.any():
            norm = np.maximum(np.linalg.norm(res.local[ok], axis=1, keepdims=True), 1e-300)
            bins = binning.bin_of(res.local[ok] / norm)
        else:
            bins = np.zeros(int(ok.sum()), dtype=np.int64)
        for s, b in zip(map(tuple, res.site[ok].tolist()), bins.tolist()):
            counts[s] = counts.get(s, 0) + 1
            entries[(s, b)] = entries.get((s, b), 0.0) + weight
    comp = {s: c * weight for s, c in counts.items()}
    total = weight * n_paths
    se = {s: total * math.sqrt((c / n_paths) * (1 - c / n_paths) / n_paths) for s, c in counts.items()}
    return BalayageEstimate(FiniteMeasure(comp), FiniteMeasure(entries), se, timeouts * weight, n_paths)


def allocate_paths(atoms: Sequence[Tuple[DeckPoint, float]], n_paths: int,
                   rng: np.random.Generator) -> Tuple[DeckPoint, float]:
    """Systematic resampling of n_paths starts over weighted atoms; each path carries W/n."""
    weights = np.array([w for _, w in atoms], dtype=float)
    total = float(math.fsum(weights))
    if total <= 0 or n_paths < 1:
        raise ValueError("need positive total weight and at least one path")
    edges = np.cumsum(weights) / total
    positions = (rng.random() + np.arange(n_paths)) / n_paths
    owner = np.minimum(np.searchsorted(edges, positions, side="right"), len(atoms) - 1)
    cells = np.vstack([atoms[i][0].cell[:1] for i in owner])
    offsets = np.vstack([atoms[i][0].offset[:1] for i in owner])
    return DeckPoint(cells, offsets), total / n_paths

# ============================================================================
# ⏱️ SOJOURN GREEN ESTIMATES
# ============================================================================


@dataclass(frozen=True)
class SojournEstimate:
    value: float
    se: float
    n: int
    bias_bound: float
    killed_fraction: float


@debug_timer
def sojourn_green_estimate(model: DriftModel, x, z, rho: float, n_paths: int, streams: CounterStreams,
                           t_max: Optional[float] = None, kill_radius: Optional[float] = None,
                           purpose: Purpose = Purpose.SOJOURN, workers: int = 1) -> SojournEstimate:
    """G(x,z)·φ²(z) from the expected time spent in B(z, ρ), divided by vol B.

    Paths are stopped at ``kill_radius`` from z (or t_max); for φ ≡ 1 the
    exact remaining sojourn vol/(2π|w − z|) is added at the stopping point,
    otherwise the missing tail is reported as a bias bound.
    """
    if model.d != 3:
        raise PreconditionError("sojourn Green estimates need a transient model (d = 3)", {"d": model.d})
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    distance = float(np.linalg.norm(x - z))
    if distance <= rho:
        raise PreconditionError("the start must lie outside the probe ball", {"distance": distance, "rho": rho})
    kill = float(kill_radius or 4.0 * max(1.0, distance))
    horizon = float(t_max or model.t_max)
    vol = 4.0 / 3.0 * math.pi * rho ** 3
    zp = DeckPoint.from_real(z)
    start = DeckPoint.from_real(x)
    dt = model.dt
    blocks = streams.blocks(n_paths)
    gens = _block_streams(streams, purpose)

    def block(b):
        _, _, count = blocks[b]
        rng = gens(b)
        pts = start.repeat(count)
        cell, offset = pts.cell, pts.offset
        occupied = np.zeros(count)
        tail = np.zeros(count)
        stopped = np.zeros(count, dtype=bool)
        censored = np.zeros(count, dtype=bool)
        t = 0.0
        active = np.arange(count)
        while active.size:
            if t >= horizon:
                censored[active] = True
                rel = (cell[active] - zp.cell) + (offset[active] - zp.offset)
                tail[active] = 1.0 / (TWO_PI * np.linalg.norm(rel, axis=1))
                break
            c, o = cell[active], offset[active]
            incr = model.drift(o) * dt + math.sqrt(dt) * rng.standard_normal(o.shape)
            c, o = _normalize(c, o + incr)
            cell[active], offset[active] = c, o
            rel = (c - zp.cell) + (o - zp.offset)
            r = np.linalg.norm(rel, axis=1)
            occupied[active] += dt * (r <= rho)
            out = r >= kill
            if out.any():
                rows = active[out]
                stopped[rows] = True
                tail[rows] = 1.0 / (TWO_PI * r[out])
                active = active[~out]
            t += dt
        return occupied / vol, tail, stopped | censored

    parts = run_blocks(block, len(blocks), workers)
    PATHS_SIMULATED.labels(engine="diffusion").inc(n_paths)
    occupied = np.concatenate([p[0] for p in parts])
    tail = np.concatenate([p[1] for p in parts])
    stopped = np.concatenate([p[2] for p in parts])
    if model.is_brownian:
        samples = occupied + tail
        bias = 0.0
    else:
        samples = occupied
        bias = float(tail.mean()) * float(np.exp(2 * model.log_phi(z[None])[0]))
    value = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(len(samples))) if len(samples) > 1 else float("inf")
    return SojournEstimate(value, se, len(samples), bias, float(stopped.mean()))

# ============================================================================
# 🧵 LIFTS AND PROJECTIONS
# ============================================================================


@dataclass(frozen=True, eq=False)
class DeckPath:
    cells: np.ndarray
    offsets: np.ndarray

    def project(self) -> np.ndarray:
        return self.offsets.copy()

    def real(self) -> np.ndarray:
        return self.cells + self.offsets


def lift_path(increments: np.ndarray, start: DeckPoint) -> DeckPath:
    """Continuous lift to ℝ^d of a torus path given by its increments.

    ``increments`` is (T, d) for one path or (n, T, d) for a batch.
    """
    inc = np.asarray(increments, dtype=float)
    single = inc.ndim == 2
    if single:
        inc = inc[None]
    n, steps, d = inc.shape
    pts = start if len(start) == n else start.repeat(n)
    cells = np.empty((n, steps + 1, d), dtype=np.int64)
    offsets = np.empty((n, steps + 1, d))
    cell, offset = pts.cell.copy(), pts.offset.copy()
    cells[:, 0], offsets[:, 0] = cell, offset
    for k in range(steps):
        cell, offset = _normalize(cell, offset + inc[:, k])
        cells[:, k + 1], offsets[:, k + 1] = cell, offset
    if single:
        return DeckPath(cells[0], offsets[0])
    return DeckPath(cells, offsets)


def torus_path(increments: np.ndarray, start_offset: np.ndarray) -> np.ndarray:
    """Base path on T^d = [0,1)^d driven by the same increments."""
    inc = np.asarray(increments, dtype=float)
    single = inc.ndim == 2
    if single:
        inc = inc[None]
    n, steps, d = inc.shape
    out = np.empty((n, steps + 1, d))
    offset = np.broadcast_to(np.asarray(start_offset, dtype=float), (n, d)).copy()
    out[:, 0] = offset
    for k in range(steps):
        _, offset = _normalize(np.zeros((n, d), dtype=np.int64), offset + inc[:, k])
        out[:, k + 1] = offset
    return out[0] if single else out


def _simulate_to(model: DriftModel, start: DeckPoint, steps: int, rng: np.random.Generator) -> DeckPoint:
    pt = start
    for _ in range(steps):
        pt = step(model, pt, rng)
    return pt


@dataclass(frozen=True)
class ProjectionLawReport:
    ks_pvalues: Tuple[float, ...]
    energy_pvalue: float
    energy_statistic: float
    p_min: float
    n_tests: int
    coarse_tv: float
    n: int

    @property
    def adjusted_p(self) -> float:
        return min(1.0, self.p_min * self.n_tests)


def _torus_distances(points: np.ndarray) -> np.ndarray:
    diff = np.abs(points[:, None, :] - points[None, :, :])
    diff = np.minimum(diff, 1.0 - diff)
    return np.sqrt((diff ** 2).sum(axis=-1))


def energy_permutation_test(a: np.ndarray, b: np.ndarray, rng: np.random.Generator,
                            n_perm: int = 199) -> Tuple[float, float]:
    """Energy-distance two-sample test on the flat torus; returns (statistic, p-value)."""
    pooled = np.vstack([a, b])
    dist = _torus_distances(pooled)
    m = len(a)

    def energy(mask):
        ab = dist[np.ix_(mask, ~mask)].mean()
        aa = dist[np.ix_(mask, mask)].mean()
        bb = dist[np.ix_(~mask, ~mask)].mean()
        return 2 * ab - aa - bb

    labels = np.zeros(len(pooled), dtype=bool)
    labels[:m] = True
    observed = energy(labels)
    exceed = 0
    for _ in range(n_perm):
        if energy(rng.permutation(labels)) >= observed:
            exceed += 1
    return float(observed), (exceed + 1) / (n_perm + 1)


def _coarse_tv(a: np.ndarray, b: np.ndarray, per_axis: int = 4) -> float:
    d = a.shape[1]
    edges = [np.linspace(0.0, 1.0, per_axis + 1)] * d
    ha, _ = np.histogramdd(a, bins=edges)
    hb, _ = np.histogramdd(b, bins=edges)
    return 0.5 * float(np.abs(ha / len(a) - hb / len(b)).sum())


@debug_timer
def projection_law_check(model: DriftModel, x, t: float, n_paths: int, streams: CounterStreams,
                         n_energy: int = 500, n_perm: int = 199, workers: int = 1) -> ProjectionLawReport:
    """Compare projected time-t marginals of cover paths with paths run directly on T^d.

    KS per coordinate plus an energy-distance permutation test; the report
    carries the Bonferroni-adjusted minimum p-value over the d + 1 tests.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    steps = max(1, int(round(t / model.dt)))
    start = DeckPoint.from_real(x)
    blocks = streams.blocks(n_paths)

    def cover(b):
        _, _, count = blocks[b]
        return _simulate_to(model, start.repeat(count), steps, streams.generator(Purpose.PATHS, b)).project()

    def torus(b):
        _, _, count = blocks[b]
        rng = streams.generator(Purpose.TORUS, b)
        offset = np.repeat(start.offset, count, axis=0)
        zero = np.zeros_like(offset, dtype=np.int64)
        for _ in range(steps):
            incr = model.drift(offset) * model.dt + math.sqrt(model.dt) * rng.standard_normal(offset.shape)
            _, offset = _normalize(zero, offset + incr)
        return offset

    a = np.vstack(run_blocks(cover, len(blocks), workers))
    b = np.vstack(run_blocks(torus, len(blocks), workers))
    PATHS_SIMULATED.labels(engine="diffusion").inc(2 * n_paths)
    ks = tuple(float(stats.ks_2samp(a[:, i], b[:, i]).pvalue) for i in range(model.d))
    m = min(n_energy, len(a))
    energy, p_energy = energy_permutation_test(a[:m], b[:m], streams.generator(Purpose.PERMUTATION, 0), n_perm)
    p_min = min(ks + (p_energy,))
    return ProjectionLawReport(ks, p_energy, energy, p_min, model.d + 1, _coarse_tv(a, b), n_paths)

# ============================================================================
# 🛤️ LS PATH ENSEMBLES
# ============================================================================

EVENT_TAGS = {"start": 0, "enter": 1, "exit": 2, "accept": 3, "timeout": 4}
SITE_BIAS = 1 << 20
SITE_BITS = 21
ALPHA_CHUNK = 64


def event_dtype(d: int) -> np.dtype:
    return np.dtype([("path", "<u8"), ("tag", "u1"), ("time", "<f8"), ("coords", "<f8", (d,)), ("site", "<i8")])


def site_index(site: np.ndarray) -> np.ndarray:
    """Pack site coordinates into one i64: Σ (c_i + 2^20)·2^(21 i)."""
    site = np.atleast_2d(np.asarray(site, dtype=np.int64))
    debug_assert(bool(np.all(np.abs(site) < SITE_BIAS)), "site coordinate out of packing range",
                 {"max": int(np.abs(site).max(initial=0))})
    shifts = np.arange(site.shape[1], dtype=np.int64) * SITE_BITS
    return ((site + SITE_BIAS) << shifts).sum(axis=1)


@dataclass(frozen=True, eq=False)
class EntryRecords:
    """One row per F-entry: (R_n, Y_n, X_n, S_n, Z_n), κ_n and the acceptance flag."""
    path: np.ndarray
    index: np.ndarray
    enter_time: np.ndarray
    enter_local: np.ndarray
    site: np.ndarray
    exit_time: np.ndarray
    exit_local: np.ndarray
    kappa: np.ndarray
    accepted: np.ndarray

    FIELDS = ("path", "index", "enter_time", "enter_local", "site", "exit_time", "exit_local", "kappa", "accepted")

    def __len__(self) -> int:
        return len(self.path)

    @classmethod
    def concat(cls, parts: Sequence['EntryRecords'], d: int) -> 'EntryRecords':
        if not parts:
            empty = np.zeros(0)
            return cls(empty.astype(np.uint64), empty.astype(np.int64), empty, np.zeros((0, d)),
                       np.zeros((0, d), dtype=np.int64), empty, np.zeros((0, d)), empty, empty.astype(bool))
        merged = {f: np.concatenate([getattr(p, f) for p in parts]) for f in cls.FIELDS}
        order = np.lexsort((merged["index"], merged["path"]))
        return cls(**{f: v[order] for f, v in merged.items()})


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    seed: int
    n_paths: int
    dt: float
    d: int
    start: DeckPoint
    lattice: SiteLattice
    entries: EntryRecords
    start_exit_time: np.ndarray
    start_exit_local: np.ndarray
    timed_out: np.ndarray
    timeout_time: np.ndarray
    accepted_sites: np.ndarray
    accepted_times: np.ndarray
    accepted_count: np.ndarray
    exhausted: np.ndarray

    def first_accepted(self) -> Tuple[np.ndarray, np.ndarray]:
        """Sites X_{N_1} and the mask of paths that accepted at least once."""
        return self.accepted_sites[:, 0], self.accepted_count > 0

    def entry_counts(self, site) -> np.ndarray:
        """Number of entries into F_site per path."""
        hit = np.all(self.entries.site == np.asarray(site, dtype=np.int64), axis=1)
        return np.bincount(self.entries.path[hit].astype(np.int64), minlength=self.n_paths)

    def check_order(self):
        e = self.entries
        if not len(e):
            return
        same = e.path[1:] == e.path[:-1]
        ordered = np.all(e.enter_time <= e.exit_time) and np.all(e.exit_time[:-1][same] <= e.enter_time[1:][same])
        first = np.ones(len(e), dtype=bool)
        first[1:] = ~same
        starts_ok = np.all(self.start_exit_time[e.path[first].astype(np.int64)] <= e.enter_time[first])
        debug_assert(bool(ordered and starts_ok), "stopping times out of order", {"entries": len(e)})

    def events(self) -> np.ndarray:
        """Flat event log in path order, each path chronological."""
        d = self.d
        e = self.entries
        n = self.n_paths
        paths = np.arange(n, dtype=np.uint64)
        start_real = np.repeat(self.start.real(), n, axis=0)
        start_site, _ = self.lattice.nearest(self.start.cell, self.start.offset)
        chunks = [(paths, EVENT_TAGS["start"], np.zeros(n), start_real, np.repeat(site_index(start_site), n),
                   np.zeros(n))]
        at_site = self.start_exit_time > 0
        if at_site.any():
            z = self.lattice.site_real(start_site) + self.start_exit_local[at_site]
            chunks.append((paths[at_site], EVENT_TAGS["exit"], self.start_exit_time[at_site], z,
                           np.repeat(site_index(start_site), int(at_site.sum())), np.ones(int(at_site.sum()))))
        site_real = self.lattice.site_real(e.site) if len(e) else np.zeros((0, d))
        seq = 2.0 + 3.0 * e.index
        chunks.append((e.path, EVENT_TAGS["enter"], e.enter_time, site_real + e.enter_local, site_index(e.site), seq))
        chunks.append((e.path, EVENT_TAGS["exit"], e.exit_time, site_real + e.exit_local, site_index(e.site), seq + 1))
        acc = e.accepted
        chunks.append((e.path[acc], EVENT_TAGS["accept"], e.exit_time[acc], (site_real + e.exit_local)[acc],
                       site_index(e.site[acc]) if acc.any() else np.zeros(0, dtype=np.int64), seq[acc] + 2))
        late = np.flatnonzero(self.timed_out)
        chunks.append((paths[late], EVENT_TAGS["timeout"], self.timeout_time[late], np.full((len(late), d), np.nan),
                       np.full(len(late), -1, dtype=np.int64), np.full(len(late), np.inf)))
        total = sum(len(c[0]) for c in chunks)
        out = np.zeros(total, dtype=event_dtype(d))
        order_key = np.empty(total)
        pos = 0
        for path, tag, time, coords, site, key in chunks:
            k = len(path)
            out["path"][pos:pos + k] = path
            out["tag"][pos:pos + k] = tag
            out["time"][pos:pos + k] = time
            out["coords"][pos:pos + k] = coords
            out["site"][pos:pos + k] = site
            order_key[pos:pos + k] = key
            pos += k
        return out[np.lexsort((order_key, out["path"]))]

    def write_events(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.events().tofile(path)


def read_events(path: Union[str, Path], d: int) -> np.ndarray:
    return np.fromfile(path, dtype=event_dtype(d))


KappaFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@debug_timer
def simulate_ls_paths(model: DriftModel, F: RegionSpec, V: RegionSpec, start: DeckPoint, n_paths: int,
                      streams: CounterStreams, kappa_fn: Optional[KappaFn] = None, k_accept: int = 1,
                      max_entries: int = 200, t_max: Optional[float] = None, workers: int = 1) -> PathEnsemble:
    """Event-driven LS paths: S_0, then alternating F-entries R_n and V-exits S_n.

    S_0 is the exit time of V_y when the start is a site and 0 otherwise.
    With ``kappa_fn`` each entry is accepted when α_n < κ(X_n, Y_n, Z_n),
    α coming from its own stream; a path stops after ``k_accept``
    acceptances, after ``max_entries`` entries, or at the horizon.
    """
    if k_accept < 1:
        raise ValueError("k_accept must be at least 1")
    d = model.d
    lattice = F.lattice
    start = start[:1]
    j0, l0 = lattice.nearest(start.cell, start.offset)
    start_at_site = bool(np.all(l0 == 0.0))
    blocks = streams.blocks(n_paths)

    def block(b):
        _, first, count = blocks[b]
        rng = streams.generator(Purpose.PATHS, b)
        alpha_rng = streams.generator(Purpose.ALPHA, b)
        alpha = alpha_rng.random((count, ALPHA_CHUNK))
        pts = start.repeat(count)
        cell, offset = pts.cell, pts.offset
        t = np.zeros(count)
        active = np.ones(count, dtype=bool)
        timed_out = np.zeros(count, dtype=bool)
        timeout_time = np.zeros(count)
        s0_time = np.zeros(count)
        s0_local = np.zeros((count, d))
        acc_sites = np.zeros((count, k_accept, d), dtype=np.int64)
        acc_times = np.full((count, k_accept), np.nan)
        acc_count = np.zeros(count, dtype=np.int64)
        records: List[EntryRecords] = []
        if start_at_site:
            res = exit_time(model, pts, V, rng, sites=np.repeat(j0, count, axis=0), t_max=t_max)
            cell, offset, t = res.point.cell.copy(), res.point.offset.copy(), res.time.copy()
            s0_time, s0_local = res.time.copy(), res.local.copy()
            timed_out |= res.timed_out
            timeout_time[res.timed_out] = res.time[res.timed_out]
            active &= ~res.timed_out
        for n in range(max_entries):
            idx = np.flatnonzero(active)
            if not idx.size:
                break
            hit = hit_time(model, DeckPoint(cell[idx], offset[idx]), F, rng, t0=t[idx], t_max=t_max)
            late = hit.timed_out
            if late.any():
                timed_out[idx[late]] = True
                timeout_time[idx[late]] = hit.time[late]
                active[idx[late]] = False
            ok = np.flatnonzero(~late)
            rows = idx[ok]
            sites = hit.site[ok]
            ex = exit_time(model, hit.point[ok], V, rng, sites=sites, t0=hit.time[ok], t_max=t_max)
            done = ~ex.timed_out
            if ex.timed_out.any():
                gone = rows[ex.timed_out]
                timed_out[gone] = True
                timeout_time[gone] = ex.time[ex.timed_out]
                active[gone] = False
            rows, sites = rows[done], sites[done]
            y_local, z_local = hit.local[ok][done], ex.local[done]
            r_time, s_time = hit.time[ok][done], ex.time[done]
            cell[rows], offset[rows], t[rows] = ex.point.cell[done], ex.point.offset[done], s_time
            if kappa_fn is not None:
                if n >= alpha.shape[1]:
                    alpha = np.hstack([alpha, alpha_rng.random((count, ALPHA_CHUNK))])
                kap = kappa_fn(sites, y_local, z_local)
                accepted = alpha[rows, n] < kap
            else:
                kap = np.full(len(rows), np.nan)
                accepted = np.zeros(len(rows), dtype=bool)
            for r, s, st in zip(rows[accepted], sites[accepted], s_time[accepted]):
                acc_sites[r, acc_count[r]] = s
                acc_times[r, acc_count[r]] = st
                acc_count[r] += 1
            finished = rows[acc_count[rows] >= k_accept]
            active[finished] = False
            records.append(EntryRecords((first + rows).astype(np.uint64), np.full(len(rows), n, dtype=np.int64),
                                        r_time, y_local, sites, s_time, z_local, kap, accepted))
        exhausted = active.copy()
        return (EntryRecords.concat(records, d), s0_time, s0_local, timed_out, timeout_time,
                acc_sites, acc_times, acc_count, exhausted)

    parts = run_blocks(block, len(blocks), workers)
    PATHS_SIMULATED.labels(engine="diffusion").inc(n_paths)

    def cat(i):
        return np.concatenate([p[i] for p in parts])

    ensemble = PathEnsemble(streams.seed, n_paths, model.dt, d, start, lattice,
                            EntryRecords.concat([p[0] for p in parts], d), cat(1), cat(2), cat(3), cat(4),
                            cat(5), cat(6), cat(7), cat(8))
    ensemble.check_order()
    timeout_fraction = float(ensemble.timed_out.mean()) if n_paths else 0.0
    if timeout_fraction > settings.TIMEOUT_BOUND:
        logger.warning(f"⌛ {timeout_fraction:.2%} of LS paths timed out (bound {settings.TIMEOUT_BOUND:.0%})")
    return ensemble
