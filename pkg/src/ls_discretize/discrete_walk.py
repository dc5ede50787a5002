"""
🌳 Random walks on countable sets, solved exactly on killed truncations.

Every quantity here is a sparse linear solve on a ``Truncation`` whose
boundary states are absorbing and killing: kernel powers, hitting measures
on the orbit X, Green functions, Martin kernels, harmonic extension and the
averaging operators on X. Monte Carlo samplers are provided as independent
oracles for the solves.
"""

import math
import itertools
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import bicgstab, splu

from .core import (CounterStreams, CyclicAction, DihedralLineAction, FiniteMeasure,
                   FreeGroupAction, GroupAction, LatticeAction, Purpose, State, StateRegistry,
                   StateSpace, TrivialAction, Truncation, exponent_sum, free_reduce, run_blocks)
from .debug_utils import (DominationError, IsotropyError, LeakageError, MissingValuesError,
                          NoPositivePathError, NotCentralError, PreconditionError,
                          SingularSystemError, StateOutsideWindowError, debug_assert,
                          debug_timer, get_logger)
from .metrics import LINEAR_SOLVES, PATHS_SIMULATED
from .settings import ModelSpec, settings

logger = get_logger(__name__)

# ============================================================================
# 🧭 WALK MODELS
# ============================================================================


class WalkModel:
    """Countable state space, Γ-invariant transition family ν and orbit X.

    Subclasses describe the infinite object through ``steps``, ``in_orbit``
    and ``norm``; ``truncate`` turns it into a finite killed chain.
    """

    family = "walk"
    symmetric = True
    cofinite = True
    finite = False
    has_nonconstant_bounded_harmonic = False

    def __init__(self, action: GroupAction, name: Optional[str] = None):
        self.action = action
        self.name = name or self.family
        self._truncations: Dict[Tuple[int, Any], Truncation] = {}
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"

    @property
    def origin(self) -> State:
        raise NotImplementedError

    @property
    def representatives(self) -> Tuple[State, ...]:
        """Representatives of Γ\\X."""
        return (self.origin,)

    def steps(self, coord: State) -> Sequence[Tuple[State, float]]:
        raise NotImplementedError

    def in_orbit(self, coord: State) -> bool:
        return True

    def norm(self, coord: State) -> int:
        raise NotImplementedError

    def distance(self, a: State, b: State) -> float:
        raise NotImplementedError

    def window_coords(self, radius: int) -> List[State]:
        raise NotImplementedError

    def nu(self, coord: State) -> FiniteMeasure:
        return FiniteMeasure.mixture([(p, FiniteMeasure.dirac(t)) for t, p in self.steps(coord)])

    def truncate(self, radius: int, shift: Any = None) -> Truncation:
        """Killed chain on the window of the given radius, translated by ``shift`` ∈ Γ.

        Translated windows list their states in the same order as the base
        window, so solves on them are bit-identical to the base solves.
        """
        g = self.action.identity if shift is None else self.action.element(shift)
        key = (radius, g)
        with self._lock:
            if key in self._truncations:
                return self._truncations[key]
        trunc = self._build_truncation(radius, g)
        with self._lock:
            return self._truncations.setdefault(key, trunc)

    def _build_truncation(self, radius: int, g: Any) -> Truncation:
        base = self.window_coords(radius)
        coords = [self.action.apply(g, c) for c in base]
        registry = StateRegistry(coords)
        n = len(coords)
        if self.finite:
            boundary = np.zeros(n, dtype=bool)
        else:
            boundary = np.fromiter((self.norm(c) >= radius for c in base), dtype=bool, count=n)
        adj_rows: List[int] = []
        adj_cols: List[int] = []
        rows: List[int] = []
        cols: List[int] = []
        vals: List[float] = []
        for i, c in enumerate(coords):
            for target, p in self.steps(c):
                j = registry.get(target)
                if j is None or p <= 0:
                    continue
                adj_rows.append(i)
                adj_cols.append(j)
                if not boundary[i]:
                    rows.append(i)
                    cols.append(j)
                    vals.append(p)
        adjacency = sparse.csr_matrix((np.ones(len(adj_rows), dtype=bool), (adj_rows, adj_cols)), shape=(n, n))
        transition = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        transition.sum_duplicates()
        space = StateSpace(registry, adjacency, self.distance)
        logger.debug(f"🗺️ {self.name}: window radius {radius} with {n} states, {int(boundary.sum())} on the boundary")
        return Truncation(space, radius, boundary, transition)


class LatticeWalk(WalkModel):
    """Simple walk on ℤ^d with Γ = scale·ℤ^d and X = scale·ℤ^d.

    ``scale = 1`` is the ``zd-lattice`` family, larger scales the
    ``sublattice-orbit`` family. Windows are ℓ∞ boxes.
    """

    family = "zd-lattice"

    def __init__(self, d: int, scale: int = 1, lazy: bool = False, name: Optional[str] = None):
        super().__init__(LatticeAction(d, scale), name)
        self.d = d
        self.scale = scale
        self.lazy = lazy
        if scale != 1:
            self.family = "sublattice-orbit"
        self._units = [tuple(s if j == i else 0 for j in range(d)) for i in range(d) for s in (1, -1)]

    @property
    def origin(self):
        return (0,) * self.d

    def steps(self, coord):
        p = 1.0 / (2 * self.d)
        out = []
        if self.lazy:
            out.append((coord, 0.5))
            p *= 0.5
        for u in self._units:
            out.append((tuple(a + b for a, b in zip(coord, u)), p))
        return out

    def in_orbit(self, coord):
        return all(c % self.scale == 0 for c in coord)

    def norm(self, coord):
        return max(abs(c) for c in coord)

    def distance(self, a, b):
        return float(sum(abs(x - y) for x, y in zip(a, b)))

    def window_coords(self, radius):
        return list(itertools.product(range(-radius, radius + 1), repeat=self.d))


class BiasedLineWalk(LatticeWalk):
    """Walk on ℤ with ν(−1) = e^b/(e^b + 1) and ν(+1) = 1/(e^b + 1)."""

    family = "biased-line"
    symmetric = False

    def __init__(self, bias: float = 1.0, name: Optional[str] = None):
        super().__init__(1, 1, name=name)
        self.family = "biased-line"
        self.bias = bias
        self.p_left = math.exp(bias) / (math.exp(bias) + 1.0)

    def steps(self, coord):
        (n,) = coord
        return [((n - 1,), self.p_left), ((n + 1,), 1.0 - self.p_left)]


class CycleWalk(WalkModel):
    """Simple or lazy walk on ℤ/n; finite, so windows are the whole cycle."""

    family = "cycle"
    finite = True

    def __init__(self, n: int, lazy: bool = False, name: Optional[str] = None):
        super().__init__(CyclicAction(n), name)
        self.n = n
        self.lazy = lazy

    @property
    def origin(self):
        return 0

    def steps(self, coord):
        if self.lazy:
            return [(coord, 0.5), ((coord - 1) % self.n, 0.25), ((coord + 1) % self.n, 0.25)]
        return [((coord - 1) % self.n, 0.5), ((coord + 1) % self.n, 0.5)]

    def norm(self, coord):
        return min(coord, self.n - coord)

    def distance(self, a, b):
        k = abs(a - b) % self.n
        return float(min(k, self.n - k))

    def window_coords(self, radius):
        return list(range(self.n))


class DihedralLineWalk(WalkModel):
    """Simple walk on ℤ with the infinite dihedral group acting by reflections and translations."""

    family = "dihedral-line"

    def __init__(self, name: Optional[str] = None):
        super().__init__(DihedralLineAction(), name)

    @property
    def origin(self):
        return 0

    def steps(self, coord):
        return [(coord - 1, 0.5), (coord + 1, 0.5)]

    def norm(self, coord):
        return abs(coord)

    def distance(self, a, b):
        return float(abs(a - b))

    def window_coords(self, radius):
        return list(range(-radius, radius + 1))


class FreeGroupTree(WalkModel):
    """Simple walk on the 4-regular Cayley tree of F2 = ⟨a, b⟩.

    X = {w : exponent sum of w ≡ 0 mod ``modulus``}, the orbit of the root
    under the finite-index kernel Γ. Windows are word-length balls.
    """

    family = "free-group-tree"
    has_nonconstant_bounded_harmonic = True
    LETTERS = "aAbB"

    def __init__(self, modulus: int = 2, name: Optional[str] = None):
        super().__init__(FreeGroupAction(modulus), name)
        self.modulus = modulus

    @property
    def origin(self):
        return ""

    def steps(self, coord):
        return [(free_reduce(coord + s), 0.25) for s in self.LETTERS]

    def in_orbit(self, coord):
        return exponent_sum(coord) % self.modulus == 0

    def norm(self, coord):
        return len(coord)

    def distance(self, a, b):
        return float(len(free_reduce(self.action.inverse(a) + b)))

    def window_coords(self, radius):
        words = [""]
        frontier = [""]
        for _ in range(radius):
            nxt = []
            for w in frontier:
                for s in self.LETTERS:
                    if w and w[-1] == s.swapcase():
                        continue
                    nxt.append(w + s)
            words.extend(nxt)
            frontier = nxt
        return words


class ExplicitWalk(WalkModel):
    """Finite transition table with the trivial group; used for designed counterexamples."""

    family = "explicit"
    finite = True
    cofinite = True

    def __init__(self, transitions: Sequence[Sequence[float]], orbit: Optional[Sequence[int]] = None,
                 name: Optional[str] = None):
        super().__init__(TrivialAction(), name)
        matrix = np.asarray(transitions, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("explicit transitions must be a square table")
        if np.any(matrix < 0) or not np.allclose(matrix.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("explicit transition rows must be probability vectors")
        self.matrix = matrix
        self.orbit = frozenset(range(len(matrix)) if orbit is None else orbit)
        self.symmetric = bool(np.allclose(matrix, matrix.T, atol=1e-14))

    @property
    def origin(self):
        return 0

    @property
    def representatives(self):
        return tuple(sorted(self.orbit))

    def steps(self, coord):
        row = self.matrix[coord]
        return [(int(j), float(row[j])) for j in np.flatnonzero(row)]

    def in_orbit(self, coord):
        return coord in self.orbit

    def norm(self, coord):
        return 0

    def distance(self, a, b):
        return 0.0 if a == b else 1.0

    def window_coords(self, radius):
        return list(range(len(self.matrix)))


def build_walk_model(spec: ModelSpec) -> WalkModel:
    """Discrete model from a validated config entry."""
    family = spec.family
    d = spec.d or 1
    if family == "zd-lattice":
        return LatticeWalk(d, 1, lazy=spec.lazy, name=f"zd-lattice-d{d}")
    if family == "sublattice-orbit":
        return LatticeWalk(d, spec.modulus, lazy=spec.lazy, name=f"sublattice-orbit-d{d}-m{spec.modulus}")
    if family == "free-group-tree":
        return FreeGroupTree(spec.modulus)
    if family == "cycle":
        return CycleWalk(spec.n, lazy=spec.lazy)
    if family == "biased-line":
        return BiasedLineWalk(spec.bias)
    if family == "dihedral-line":
        return DihedralLineWalk()
    if family == "explicit":
        if spec.transitions is None:
            raise ValueError("explicit family needs a transitions table")
        return ExplicitWalk(spec.transitions)
    raise ValueError(f"{family} is not a discrete model family")

# ============================================================================
# 🧮 LINEAR SOLVES
# ============================================================================


class LinearSolver:
    """Solves A u = b or Aᵀ u = b under a fixed residual contract.

    Sparse LU below the direct-solve limit, BiCGSTAB above it.
    """

    def __init__(self, matrix: sparse.spmatrix, label: str = "system"):
        self.matrix = sparse.csc_matrix(matrix)
        self.n = self.matrix.shape[0]
        self.label = label
        self.method = "direct" if self.n < settings.DIRECT_SOLVE_LIMIT else "bicgstab"
        self._lu = None
        if self.n and self.method == "direct":
            try:
                self._lu = splu(self.matrix)
            except RuntimeError as e:
                raise SingularSystemError(f"{label} is singular: {e}", {"states": self.n})
        logger.debug(f"🧮 {label}: {self.n} unknowns, {self.method} solve")

    def solve(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self.n == 0:
            return np.zeros(0)
        op = self.matrix.T if transpose else self.matrix
        if self._lu is not None:
            solution = self._lu.solve(rhs, trans="T" if transpose else "N")
        else:
            solution, info = bicgstab(op, rhs, rtol=settings.ITERATIVE_RTOL, atol=0.0, maxiter=20 * self.n)
            if info != 0:
                raise SingularSystemError(f"{self.label}: BiCGSTAB did not converge (info={info})",
                                          {"states": self.n, "info": int(info)})
        if not np.all(np.isfinite(solution)):
            raise SingularSystemError(f"{self.label}: solve produced non-finite values", {"states": self.n})
        residual = float(np.linalg.norm(op @ solution - rhs))
        if residual > settings.RESIDUAL_CONTRACT * max(1.0, float(np.linalg.norm(rhs))):
            raise SingularSystemError(f"{self.label}: residual {residual:.3e} misses the contract",
                                      {"residual": residual, "method": self.method})
        LINEAR_SOLVES.labels(method=self.method).inc()
        return solution


def _solver(trunc: Truncation, key: str, build_matrix: Callable[[], sparse.spmatrix], label: str) -> LinearSolver:
    return trunc.memo(key, lambda: LinearSolver(build_matrix(), label))

# ============================================================================
# 📐 KERNEL POWERS AND IRREDUCIBILITY
# ============================================================================


@dataclass(frozen=True)
class KernelPowerResult:
    measure: FiniteMeasure
    leaked: float
    k: int


def kernel_power(model: WalkModel, k: int, y: int, trunc: Truncation) -> KernelPowerResult:
    """ν^k_y on the killed window; k = 0 gives δ_y."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    vec = np.zeros(trunc.n)
    vec[y] = 1.0
    pt = trunc.transition.T.tocsr()
    for _ in range(k):
        vec = pt @ vec
    measure = FiniteMeasure.from_vector(vec, range(trunc.n))
    return KernelPowerResult(measure, max(0.0, 1.0 - float(vec.sum())), k)


@dataclass(frozen=True)
class IrreducibilityResult:
    irreducible: bool
    witness: Optional[Tuple[State, State]]
    k_used: int


@debug_timer
def is_irreducible(model: WalkModel, trunc: Truncation, kmax: int) -> IrreducibilityResult:
    """Positive ν^k_y(z) for some 1 ≤ k ≤ kmax, for all interior pairs of the killed chain."""
    interior = trunc.interior_ids
    sub = trunc.transition[interior][:, interior]
    graph = sparse.csr_matrix((np.ones(sub.nnz), sub.indices, sub.indptr), shape=sub.shape)
    dist = csgraph.shortest_path(graph, directed=True, unweighted=True)
    lengths = dist.copy()
    for a in range(len(interior)):
        out = graph.indices[graph.indptr[a]:graph.indptr[a + 1]]
        lengths[a, a] = 1.0 + dist[out, a].min() if len(out) else np.inf
    bad = np.argwhere(lengths > kmax)
    if len(bad):
        a, b = bad[0]
        witness = (trunc.coord_of(int(interior[a])), trunc.coord_of(int(interior[b])))
        return IrreducibilityResult(False, witness, kmax)
    return IrreducibilityResult(True, None, int(lengths.max()) if lengths.size else 0)

# ============================================================================
# 🎯 HITTING MEASURES ON X
# ============================================================================


class HittingFamily:
    """The family μ = (μ_y) of first-entry distributions on X ∩ interior.

    μ_y counts entries from step ≥ 1 (one forced ν-step when y ∈ X).
    Boundary states kill, so they never count as entries; ``leak`` reports
    the mass lost to them.
    """

    def __init__(self, model: WalkModel, trunc: Truncation):
        self.model = model
        self.trunc = trunc
        x_mask = np.fromiter((model.in_orbit(c) for c in trunc.registry.coords), dtype=bool, count=trunc.n)
        x_mask &= ~trunc.boundary
        if not x_mask.any():
            raise PreconditionError("X does not meet the interior of the window", {"states": trunc.n})
        self.x_mask = x_mask
        self.x_ids = np.flatnonzero(x_mask)
        self.n_ids = np.flatnonzero(~x_mask)
        self._x_pos = {int(x): i for i, x in enumerate(self.x_ids)}
        p = trunc.transition
        self._p_yx = p[:, self.x_ids].tocsr()
        self._p_yn = p[:, self.n_ids].tocsr()
        self._p_nx = p[self.n_ids][:, self.x_ids].tocsr()
        p_nn = p[self.n_ids][:, self.n_ids]
        self._one_step = p_nn.nnz == 0
        a = sparse.identity(len(self.n_ids), format="csc") - p_nn
        self._solver = LinearSolver(a, f"{model.name} hitting system")
        self._measures: Dict[int, FiniteMeasure] = {}
        self._lock = threading.Lock()
        self._matrix: Optional[sparse.csr_matrix] = None
        self._green_solver: Optional[LinearSolver] = None

    @classmethod
    def of(cls, model: WalkModel, trunc: Truncation) -> 'HittingFamily':
        return trunc.memo("hitting_family", lambda: cls(model, trunc))

    def is_x(self, y: int) -> bool:
        return bool(self.x_mask[y])

    def position(self, x: int) -> int:
        return self._x_pos[int(x)]

    def measure(self, y: int) -> FiniteMeasure:
        y = int(y)
        with self._lock:
            cached = self._measures.get(y)
        if cached is not None:
            return cached
        if self._one_step:
            return self._cache(y, self._one_step_measure(y))
        values = self._p_yx[y].toarray().ravel()
        rhs = self._p_yn[y].toarray().ravel()
        if rhs.any():
            w = self._solver.solve(rhs, transpose=True)
            values = values + self._p_nx.T @ w
        debug_assert(values.min(initial=0.0) > -1e-10, "hitting measure has negative mass",
                     {"state": repr(self.trunc.coord_of(y)), "min": float(values.min(initial=0.0))})
        values[values < 0] = 0.0
        measure = FiniteMeasure.from_vector(values, self.x_ids)
        return self._cache(y, measure)

    def _cache(self, y: int, measure: FiniteMeasure) -> FiniteMeasure:
        with self._lock:
            self._measures[y] = measure
        return measure

    def _one_step_measure(self, y: int) -> FiniteMeasure:
        # no N→N transitions: every path leaving N enters X on its next step
        row = self._p_yx[y] + self._p_yn[y] @ self._p_nx
        row = row.tocsr()
        return FiniteMeasure({int(self.x_ids[j]): float(w) for j, w in zip(row.indices, row.data)})

    def leak(self, y: int) -> float:
        return max(0.0, 1.0 - self.measure(y).total)

    def interior(self, tol: Optional[float] = None) -> np.ndarray:
        """X states whose hitting measure loses at most ``tol`` to the boundary."""
        tol = settings.INTERIOR_LEAK if tol is None else tol
        return np.array([x for x in self.x_ids if self.leak(x) <= tol], dtype=int)

    def matrix(self) -> sparse.csr_matrix:
        """μ restricted to X × X, rows and columns in ``x_ids`` order."""
        with self._lock:
            if self._matrix is not None:
                return self._matrix
        rows, cols, vals = [], [], []
        for i, x in enumerate(self.x_ids):
            for target, w in self.measure(x).items():
                rows.append(i)
                cols.append(self._x_pos[target])
                vals.append(w)
        size = len(self.x_ids)
        matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(size, size))
        with self._lock:
            self._matrix = matrix
        return matrix

    def vector(self, y: int) -> np.ndarray:
        vec = np.zeros(len(self.x_ids))
        for target, w in self.measure(y).items():
            vec[self._x_pos[target]] = w
        return vec

    def power(self, y: int, k: int) -> FiniteMeasure:
        """μ^k_y; μ^0_y = δ_y."""
        if k == 0:
            return FiniteMeasure.dirac(int(y))
        vec = self.vector(y)
        if k > 1:
            mt = self.matrix().T.tocsr()
            for _ in range(k - 1):
                vec = mt @ vec
        return FiniteMeasure.from_vector(vec, self.x_ids)

    def green_solver(self) -> LinearSolver:
        with self._lock:
            if self._green_solver is not None:
                return self._green_solver
        size = len(self.x_ids)
        solver = LinearSolver(sparse.identity(size, format="csc") - self.matrix(), f"{self.model.name} mu-chain Green")
        with self._lock:
            self._green_solver = solver
        return solver


def hitting_measure(model: WalkModel, y: int, trunc: Truncation,
                    leak_tolerance: Optional[float] = None) -> FiniteMeasure:
    """μ_y(x) = P_y[ω at its first X-entry from step ≥ 1 is x]."""
    family = HittingFamily.of(model, trunc)
    measure = family.measure(y)
    tol = settings.LEAK_TOLERANCE if leak_tolerance is None else leak_tolerance
    leaked = max(0.0, 1.0 - measure.total)
    if leaked > tol:
        raise LeakageError(f"Hitting measure from {trunc.coord_of(y)!r} leaks {leaked:.3e} to the boundary; "
                           f"use a radius larger than {trunc.radius}",
                           {"state": repr(trunc.coord_of(y)), "leak": leaked, "radius": trunc.radius})
    return measure


def hitting_recursion_residual(family: HittingFamily, y: int) -> float:
    """max_x |μ_y(x) − ν_y(x)1_X(x) − Σ_{z∉X} ν_y(z) μ_z(x)|."""
    trunc = family.trunc
    row = trunc.row(y)
    terms = []
    for z, p in row.items():
        if family.is_x(z):
            terms.append((p, FiniteMeasure.dirac(z)))
        else:
            terms.append((p, family.measure(z)))
    rhs = FiniteMeasure.mixture(terms)
    lhs = family.measure(y)
    states = set(lhs.support) | set(rhs.support)
    return max((abs(lhs[s] - rhs[s]) for s in states), default=0.0)


def symmetric_mu_defect(family: HittingFamily) -> float:
    """max |μ_x(y) − μ_y(x)| over X × X."""
    m = family.matrix()
    diff = (m - m.T).tocoo()
    return float(np.abs(diff.data).max()) if diff.nnz else 0.0


def balayage(model: WalkModel, y: int, trunc: Truncation, target: Sequence[int]) -> FiniteMeasure:
    """First hitting distribution of ``target`` from step 0 on the killed chain."""
    target = np.unique(np.asarray(target, dtype=int))
    if y in set(target.tolist()):
        return FiniteMeasure.dirac(int(y))
    mask = np.zeros(trunc.n, dtype=bool)
    mask[target] = True
    others = np.flatnonzero(~mask)
    key = f"balayage:{hash(target.tobytes())}"
    p = trunc.transition

    def build():
        return sparse.identity(len(others), format="csc") - p[others][:, others]

    solver = _solver(trunc, key, build, f"{model.name} balayage system")
    pos = int(np.searchsorted(others, y))
    rhs = np.zeros(len(others))
    rhs[pos] = 1.0
    w = solver.solve(rhs, transpose=True)
    values = p[others][:, target].T @ w
    values[values < 0] = 0.0
    return FiniteMeasure.from_vector(values, target)


def solve_dirichlet(model: WalkModel, trunc: Truncation, data: Mapping[int, float]) -> np.ndarray:
    """Harmonic extension of boundary data on the killed chain by one direct Y-solve.

    Returns the vector u on the window with u = data on the data set and
    u(y) = E_y[data at the first visit to the data set], killed paths
    contributing zero.
    """
    fixed = np.array(sorted(data), dtype=int)
    mask = np.zeros(trunc.n, dtype=bool)
    mask[fixed] = True
    free = np.flatnonzero(~mask)
    p = trunc.transition
    values = np.array([data[i] for i in fixed], dtype=float)
    a = sparse.identity(len(free), format="csc") - p[free][:, free]
    rhs = p[free][:, fixed] @ values
    solution = LinearSolver(a, f"{model.name} Dirichlet system").solve(rhs)
    out = np.zeros(trunc.n)
    out[fixed] = values
    out[free] = solution
    return out

# ============================================================================
# 🌡️ GREEN FUNCTIONS AND MARTIN KERNELS
# ============================================================================


def green_column(model: WalkModel, x: int, trunc: Truncation) -> np.ndarray:
    """G(·, x) on the window: expected visits to x before killing."""
    def build():
        solver = _solver(trunc, "green_solver",
                         lambda: sparse.identity(trunc.n, format="csc") - trunc.transition,
                         f"{model.name} Green system")
        rhs = np.zeros(trunc.n)
        rhs[x] = 1.0
        return solver.solve(rhs)

    return trunc.memo(f"green_col:{int(x)}", build)


def green(model: WalkModel, y: int, x: int, trunc: Truncation) -> float:
    """G(y,x) = δ_y(x) + Σ_{i≥1} P_y[ω_i = x] on the killed chain."""
    return float(green_column(model, x, trunc)[y])


def mu_green(family: HittingFamily, y: int, x: int) -> float:
    """Green function g(y,x) = δ_y(x) + Σ_k μ^k_y(x) of the hitting-measure chain, x ∈ X."""
    if not family.is_x(x):
        raise PreconditionError("mu-chain Green function needs x in X", {"state": repr(family.trunc.coord_of(x))})
    pos = family.position(x)

    def build():
        rhs = np.zeros(len(family.x_ids))
        rhs[pos] = 1.0
        return family.green_solver().solve(rhs)

    column = family.trunc.memo(f"mu_green_col:{int(x)}", build)
    return (1.0 if int(y) == int(x) else 0.0) + math.fsum(
        w * column[family.position(x1)] for x1, w in family.measure(y).items())


def martin_kernel(model: WalkModel, x0: int, y: int, x: int, trunc: Truncation) -> float:
    """K(y,x) = G(y,x)/G(x0,x)."""
    column = green_column(model, x, trunc)
    base = float(column[x0])
    if base < 1e-14:
        raise SingularSystemError(f"G(x0, x) = {base:.3e} is too small to normalize the Martin kernel",
                                  {"x0": repr(trunc.coord_of(x0)), "x": repr(trunc.coord_of(x))})
    return float(column[y]) / base

# ============================================================================
# 🌊 HARMONIC FUNCTIONS
# ============================================================================


@dataclass(frozen=True)
class HarmonicFunction:
    """Values on window ids, tagged with the domain they live on (X or Y)."""
    values: Mapping[int, float]
    domain: str = "Y"

    @classmethod
    def from_coords(cls, trunc: Truncation, fn: Callable[[State], float],
                    ids: Optional[Sequence[int]] = None, domain: str = "Y") -> 'HarmonicFunction':
        ids = range(trunc.n) if ids is None else ids
        return cls({int(i): float(fn(trunc.coord_of(int(i)))) for i in ids}, domain)

    def __getitem__(self, state: int) -> float:
        return self.values[state]

    def __contains__(self, state: int) -> bool:
        return state in self.values


def _values(h: Union[HarmonicFunction, Mapping[int, float]]) -> Mapping[int, float]:
    return h.values if isinstance(h, HarmonicFunction) else h


def harmonic_residual(target: Union[HittingFamily, WalkModel], h: Union[HarmonicFunction, Mapping[int, float]],
                      trunc: Optional[Truncation] = None, interior: Optional[Sequence[int]] = None) -> float:
    """max over interior states of |h(x) − Σ μ_x(y) h(y)|.

    With a ``HittingFamily`` the kernel is μ on X and the interior is the X
    states with negligible leak; with a ``WalkModel`` it is ν on the
    truncation and the interior is the states with no mass on the boundary.
    """
    values = _values(h)
    if isinstance(target, HittingFamily):
        states = target.interior() if interior is None else interior
        kernel = target.measure
    else:
        if trunc is None:
            raise ValueError("harmonic residual of a walk model needs a truncation")
        if interior is None:
            leak = trunc.one_step_leak()
            touches = np.asarray(trunc.transition[:, trunc.boundary_ids].sum(axis=1)).ravel() if trunc.boundary.any() \
                else np.zeros(trunc.n)
            states = np.flatnonzero((leak <= 1e-12) & (touches == 0) & ~trunc.boundary)
        else:
            states = interior
        kernel = trunc.row
    worst = 0.0
    for x in states:
        x = int(x)
        if x not in values:
            raise MissingValuesError(f"h has no value at interior state {_state_label(target, trunc, x)!r}",
                                     {"state": x})
        worst = max(worst, abs(values[x] - kernel(x).integrate(values)))
    return worst


def _state_label(target, trunc, x):
    t = target.trunc if isinstance(target, HittingFamily) else trunc
    return t.coord_of(x) if t is not None else x


def extend_harmonic(h: Union[HarmonicFunction, Mapping[int, float]], family: HittingFamily,
                    bounded: bool = True, kmax: Optional[int] = None) -> HarmonicFunction:
    """h(y) = Σ_x μ_y(x) h(x) off X; h itself on X.

    For unbounded h every extended value is certified by a domination
    constant, μ_y ≤ c·μ_{y0} with y0 ∈ X, so the sum is controlled by
    μ_{y0}(|h|).
    """
    values = _values(h)
    trunc = family.trunc
    out: Dict[int, float] = {}
    for y in range(trunc.n):
        if family.is_x(y) and y in values:
            out[y] = float(values[y])
            continue
        if trunc.boundary[y]:
            out[y] = 0.0
            continue
        value = family.measure(y).integrate(values)
        if not bounded:
            dom = domination_constant(family.model, y, trunc, kmax=kmax)
            bound = dom.c * family.measure(dom.y0).integrate(lambda s: abs(values.get(s, 0.0)))
            if not abs(value) <= bound * (1.0 + 1e-9) + 1e-12:
                raise DominationError(f"Extension at {trunc.coord_of(y)!r} exceeds its domination bound",
                                      {"state": repr(trunc.coord_of(y)), "value": value, "bound": bound})
        out[y] = value
    return HarmonicFunction(out, "Y")

# ============================================================================
# 🔗 DOMINATION, CENTER BOUNDS, DICHOTOMY
# ============================================================================


@dataclass(frozen=True)
class DominationResult:
    y0: int
    c: float
    path: Tuple[int, ...]
    max_violation: float


def _domination_tree(family: HittingFamily):
    trunc = family.trunc
    p = trunc.transition.tocoo()
    keep = ~family.x_mask[p.col] & (p.data > 0)
    weights = -np.log(p.data[keep]) + 1e-12
    graph = sparse.csr_matrix((weights, (p.row[keep], p.col[keep])), shape=(trunc.n, trunc.n))
    return csgraph.dijkstra(graph, directed=True, indices=family.x_ids, min_only=True,
                            return_predecessors=True)


def domination_constant(model: WalkModel, y: int, trunc: Truncation,
                        kmax: Optional[int] = None) -> DominationResult:
    """y0 ∈ X and c with μ_y ≤ c·μ_{y0}, from the most likely ν-path y0 → y avoiding X.

    c = 1/(ν_{y_i}(y)···ν_{y0}(y1)); the inequality is verified on the
    whole window.
    """
    family = HittingFamily.of(model, trunc)
    y = int(y)
    if family.is_x(y):
        return DominationResult(y, 1.0, (y,), 0.0)
    dist, pred, sources = trunc.memo("domination_tree", lambda: _domination_tree(family))
    if not np.isfinite(dist[y]):
        raise NoPositivePathError(f"No positive path from X to {trunc.coord_of(y)!r}",
                                  {"state": repr(trunc.coord_of(y))})
    path = [y]
    while pred[path[-1]] >= 0:
        path.append(int(pred[path[-1]]))
    path.reverse()
    y0 = int(sources[y])
    debug_assert(path[0] == y0, "domination path must start at its source", {"path": path, "source": y0})
    if kmax is not None and len(path) - 1 > kmax:
        raise NoPositivePathError(f"Shortest positive path to {trunc.coord_of(y)!r} needs {len(path) - 1} > {kmax} steps",
                                  {"state": repr(trunc.coord_of(y)), "kmax": kmax})
    p = trunc.transition
    prob = math.prod(float(p[a, b]) for a, b in zip(path[:-1], path[1:]))
    c = 1.0 / prob
    mu_y = family.measure(y)
    mu_y0 = family.measure(y0)
    violation = max((mu_y[x] - c * mu_y0[x] for x in mu_y.support), default=0.0)
    if violation > 1e-12 + 1e-9 * c:
        raise DominationError(f"μ_y ≤ c·μ_y0 fails by {violation:.3e} at {trunc.coord_of(y)!r}",
                              {"state": repr(trunc.coord_of(y)), "c": c, "violation": violation})
    return DominationResult(y0, c, tuple(path), max(violation, 0.0))


@dataclass(frozen=True)
class CenterRatioBound:
    bound: float
    k: int
    c: float
    max_ratio: float
    verified: bool


@debug_timer
def center_ratio_bound(model: WalkModel, h: Union[HarmonicFunction, Mapping[int, float]], g: Any,
                       trunc: Truncation, kmax: int = 20) -> CenterRatioBound:
    """c > 0 and k with μ^k_x(g·x) ≥ c on all representatives, so h(g·x)/h(x) ≤ 1/c."""
    if not model.cofinite:
        raise PreconditionError("center ratio bound needs a cofinite action", {"model": model.name})
    action = model.action
    element = action.element(g)
    if not action.is_central(element):
        raise NotCentralError(f"{g!r} is not central in {action.label}", {"element": repr(element)})
    values = _values(h)
    if element == action.identity:
        return CenterRatioBound(1.0, 0, 1.0, 1.0, True)
    family = HittingFamily.of(model, trunc)
    reps = [trunc.id_of(r) for r in model.representatives]
    targets = [trunc.id_of(action.apply(element, r)) for r in model.representatives]
    for k in range(1, kmax + 1):
        c = min(family.power(rep, k)[tgt] for rep, tgt in zip(reps, targets))
        if c > 0:
            break
    else:
        raise NoPositivePathError(f"No k ≤ {kmax} gives uniform positivity of μ^k_x(g·x)",
                                  {"element": repr(element), "kmax": kmax})
    bound = 1.0 / c
    worst = 0.0
    for x in family.x_ids:
        x = int(x)
        image = trunc.registry.get(action.apply(element, trunc.coord_of(x)))
        if image is None or x not in values or image not in values:
            continue
        if values[x] <= 0:
            raise PreconditionError("center ratio bound needs a positive h", {"state": repr(trunc.coord_of(x))})
        worst = max(worst, values[image] / values[x])
    verified = worst <= bound * (1 + 1e-9)
    logger.info(f"🔒 center ratio bound for {element!r}: k={k}, c={c:.4g}, bound={bound:.4g}, max ratio={worst:.4g}")
    return CenterRatioBound(bound, k, c, worst, verified)


def dichotomy_term(c: float) -> float:
    """c + 1/c − 2, nonnegative with equality iff c = 1."""
    return c + 1.0 / c - 2.0


@dataclass(frozen=True)
class DichotomyReport:
    verdict: str
    total: float
    terms: Dict[str, float]
    ratios: Dict[str, float]
    relative_variance: Dict[str, float]
    unbounded_directions: Tuple[str, ...]
    symmetric: bool


def dichotomy_certificate(model: WalkModel, h: Union[HarmonicFunction, Mapping[int, float]], x0: int,
                          trunc: Truncation, tol: float = 1e-9,
                          variance_tol: float = 1e-6) -> DichotomyReport:
    """Evaluate Σ μ_{x0}(γx0)(c(γ) + 1/c(γ) − 2) with c(γ) = γ*h/h.

    Verdicts: ``constant`` (c ≡ 1, h is Γ-invariant), ``exponential``
    (c is a nontrivial homomorphism, only possible without symmetry) and
    ``not-homomorphism`` (some c(γ) varies over the orbit window).
    """
    values = _values(h)
    family = HittingFamily.of(model, trunc)
    action = model.action
    x0_coord = trunc.coord_of(x0)
    terms: Dict[str, float] = {}
    ratios: Dict[str, float] = {}
    variances: Dict[str, float] = {}
    constant = True
    for x, weight in family.measure(x0).items():
        gamma = action.transporter(x0_coord, trunc.coord_of(x))
        if gamma is None:
            continue
        samples = []
        for z in family.x_ids:
            z = int(z)
            image = trunc.registry.get(action.apply(gamma, trunc.coord_of(z)))
            if image is not None and z in values and image in values and values[z] != 0:
                samples.append(values[image] / values[z])
        label = repr(gamma)
        arr = np.asarray(samples)
        mean = float(arr.mean()) if len(arr) else 1.0
        rel_var = float(arr.var() / mean ** 2) if len(arr) > 1 and mean != 0 else 0.0
        variances[label] = rel_var
        if rel_var >= variance_tol:
            constant = False
        ratios[label] = mean
        terms[label] = weight * dichotomy_term(mean)
    total = math.fsum(terms.values())
    unbounded = tuple(label for label, c in ratios.items() if abs(c - 1.0) > 1e-9)
    if not constant:
        verdict = "not-homomorphism"
    elif total <= tol and not unbounded:
        verdict = "constant"
    else:
        verdict = "exponential"
    logger.info(f"⚖️ dichotomy certificate: sum={total:.3e}, verdict={verdict}")
    return DichotomyReport(verdict, total, terms, ratios, variances, unbounded, model.symmetric)

# ============================================================================
# 📉 AVERAGING OPERATORS
# ============================================================================


@dataclass(frozen=True)
class CesaroReport:
    average: Dict[int, float]
    limit: Dict[int, float]
    oscillation: float
    converged: bool
    residual: Optional[float]
    horizon: int
    heuristic: bool = True


@debug_timer
def cesaro_projection(family: HittingFamily, f: Mapping[int, float], horizon: int,
                      tol: float = 1e-6) -> CesaroReport:
    """Cesàro averages (1/K) Σ_{k<K} μ^k_x(f) with a Richardson limit 2A_2K − A_K.

    This stands in for an invariant mean; non-convergence is reported.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    missing = [int(x) for x in family.x_ids if int(x) not in f]
    if missing:
        raise MissingValuesError(f"f has no value at {len(missing)} X states", {"missing": missing[:10]})
    vec = np.array([f[int(x)] for x in family.x_ids], dtype=float)
    m = family.matrix()
    running = np.zeros_like(vec)
    avg_k = None
    for k in range(2 * horizon):
        running += vec
        if k + 1 == horizon:
            avg_k = running / horizon
        vec = m @ vec
    avg_2k = running / (2 * horizon)
    limit = 2.0 * avg_2k - avg_k
    oscillation = float(np.abs(avg_2k - avg_k).max()) if len(vec) else 0.0
    converged = oscillation < tol
    limit_map = {int(x): float(v) for x, v in zip(family.x_ids, limit)}
    residual = harmonic_residual(family, limit_map) if converged else None
    if not converged:
        logger.debug(f"Cesàro averages still moving at K={horizon}: oscillation {oscillation:.3e}")
    return CesaroReport({int(x): float(v) for x, v in zip(family.x_ids, avg_k)}, limit_map,
                        oscillation, converged, residual, horizon)


def isotropy_average(f: Callable[[Any], float], action: GroupAction, representatives: Sequence[State],
                     points: Sequence[State]) -> Dict[State, float]:
    """E(f)(γx) = (1/|Γ_x|) Σ_{σ∈Γ_x} f(γσ) for x in the representatives."""
    isotropies = {}
    for x in representatives:
        group = tuple(action.isotropy(x))
        members = set(group)
        if action.identity not in members:
            raise IsotropyError(f"isotropy of {x!r} misses the identity", {"point": repr(x)})
        for sigma in group:
            if action.apply(sigma, x) != x:
                raise IsotropyError(f"{sigma!r} does not fix {x!r}", {"point": repr(x), "element": repr(sigma)})
            for tau in group:
                if action.compose(sigma, tau) not in members:
                    raise IsotropyError(f"isotropy of {x!r} is not closed under composition",
                                        {"point": repr(x), "pair": [repr(sigma), repr(tau)]})
        isotropies[x] = group
    out: Dict[State, float] = {}
    for y in points:
        for x, group in isotropies.items():
            gamma = action.transporter(x, y)
            if gamma is not None:
                out[y] = math.fsum(f(action.compose(gamma, sigma)) for sigma in group) / len(group)
                break
        else:
            raise StateOutsideWindowError(f"{y!r} is not in the orbit of any representative", {"point": repr(y)})
    return out


@dataclass(frozen=True)
class XSubsequence:
    states: Tuple[State, ...]
    reached_x: bool


def x_subsequence(path: Sequence[State], in_x: Union[Callable[[State], bool], set, frozenset]) -> XSubsequence:
    """The start of the path followed by its members in X, in order."""
    member = in_x if callable(in_x) else in_x.__contains__
    if not len(path):
        return XSubsequence((), False)
    kept = [path[0]] + [s for s in path[1:] if member(s)]
    return XSubsequence(tuple(kept), len(kept) > 1)

# ============================================================================
# 🎲 MONTE CARLO ORACLES
# ============================================================================


def _row_tables(trunc: Truncation):
    p = trunc.transition
    cum = np.cumsum(p.data)
    starts = np.repeat(np.concatenate(([0.0], cum))[p.indptr[:-1]], np.diff(p.indptr))
    return p.indptr, p.indices, cum - starts


def _advance(state: np.ndarray, u: np.ndarray, tables) -> np.ndarray:
    indptr, indices, cum = tables
    alive = state >= 0
    nxt = np.full_like(state, -1)
    s = state[alive]
    lo = indptr[s]
    length = indptr[s + 1] - lo
    uu = u[alive]
    count = np.zeros(len(s), dtype=np.int64)
    for j in range(int(length.max(initial=0))):
        inside = j < length
        idx = np.where(inside, lo + j, 0)
        count += (inside & (cum[idx] <= uu)).astype(np.int64)
    ok = count < length
    picked = np.full(len(s), -1, dtype=np.int64)
    picked[ok] = indices[lo[ok] + count[ok]]
    nxt[alive] = picked
    return nxt


def sample_paths(trunc: Truncation, start: int, horizon: int, n_paths: int,
                 streams: CounterStreams, workers: int = 1) -> np.ndarray:
    """Paths of the killed chain as window ids; −1 after killing."""
    tables = _row_tables(trunc)

    def block(b):
        _, first, count = streams.blocks(n_paths)[b]
        gen = streams.generator(Purpose.DISCRETE, b)
        out = np.full((count, horizon + 1), -1, dtype=np.int64)
        out[:, 0] = start
        for t in range(horizon):
            out[:, t + 1] = _advance(out[:, t], gen.random(count), tables)
        return out

    parts = run_blocks(block, len(streams.blocks(n_paths)), workers)
    PATHS_SIMULATED.labels(engine="discrete").inc(n_paths)
    return np.vstack(parts) if parts else np.zeros((0, horizon + 1), dtype=np.int64)


@dataclass(frozen=True)
class SampledMeasure:
    measure: FiniteMeasure
    se: Dict[int, float]
    n: int
    leaked: float

    def tv_se(self) -> float:
        return 0.5 * math.fsum(self.se.values())


def sample_hitting_measure(model: WalkModel, y: int, trunc: Truncation, n_paths: int,
                           streams: CounterStreams, max_steps: Optional[int] = None) -> SampledMeasure:
    """Empirical μ_y from simulated first X-entries (step ≥ 1)."""
    family = HittingFamily.of(model, trunc)
    tables = _row_tables(trunc)
    max_steps = max_steps or 50 * max(trunc.radius, 1) ** 2 + 100
    hits: List[np.ndarray] = []
    for b, _, count in streams.blocks(n_paths):
        gen = streams.generator(Purpose.DISCRETE, b)
        state = np.full(count, int(y), dtype=np.int64)
        result = np.full(count, -1, dtype=np.int64)
        active = np.ones(count, dtype=bool)
        for _ in range(max_steps):
            if not active.any():
                break
            u = gen.random(count)
            nxt = _advance(np.where(active, state, -1), u, tables)
            entered = active & (nxt >= 0) & family.x_mask[np.maximum(nxt, 0)]
            result[entered] = nxt[entered]
            active &= ~entered & (nxt >= 0)
            state = np.where(active, nxt, state)
        hits.append(result)
    entries = np.concatenate(hits) if hits else np.zeros(0, dtype=np.int64)
    PATHS_SIMULATED.labels(engine="discrete").inc(n_paths)
    landed = entries[entries >= 0]
    ids, counts = np.unique(landed, return_counts=True)
    probs = counts / n_paths
    measure = FiniteMeasure({int(i): float(p) for i, p in zip(ids, probs)})
    se = {int(i): float(math.sqrt(p * (1 - p) / n_paths)) for i, p in zip(ids, probs)}
    return SampledMeasure(measure, se, n_paths, float((entries < 0).mean()) if len(entries) else 0.0)

# ============================================================================
# 🌲 FREE-GROUP TREE SPECIFICS
# ============================================================================


def branch_hitting(first: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """P[walk converges into the branch of words starting with 'a'].

    1 − (3/4)·3^−k inside the branch at depth k, (1/4)·3^−k outside,
    1/4 at the root. ``first`` holds 0 for 'a', −1 at the root.
    """
    first = np.asarray(first)
    depth = np.asarray(depth, dtype=float)
    scale = np.power(3.0, -depth)
    return np.where(first == 0, 1.0 - 0.75 * scale, 0.25 * scale)


def branch_hitting_word(word: str) -> float:
    first = 0 if word.startswith("a") else (-1 if not word else 1)
    return float(branch_hitting(np.array(first), np.array(len(word))))


@dataclass(frozen=True)
class TreePaths:
    """Tree walk sample: first letter (0..3 for a, A, b, B; −1 at the root), depth and exponent sum."""
    first: np.ndarray
    depth: np.ndarray
    sigma: np.ndarray


def sample_tree_paths(n_paths: int, horizon: int, streams: CounterStreams, start: str = "",
                      workers: int = 1) -> TreePaths:
    """Simple walk on the infinite 4-regular tree via a letter stack per path."""
    code = {"a": 0, "A": 1, "b": 2, "B": 3}
    start_letters = np.array([code[ch] for ch in free_reduce(start)], dtype=np.int8)
    sign = np.array([1, -1, 1, -1], dtype=np.int64)

    def block(b):
        _, _, count = streams.blocks(n_paths)[b]
        gen = streams.generator(Purpose.DISCRETE, b)
        depth_cap = len(start_letters) + horizon + 1
        stack = np.zeros((count, depth_cap), dtype=np.int8)
        stack[:, :len(start_letters)] = start_letters
        depth = np.full(count, len(start_letters), dtype=np.int64)
        sigma = np.full(count, int(sign[start_letters].sum()) if len(start_letters) else 0, dtype=np.int64)
        first = np.zeros((count, horizon + 1), dtype=np.int8)
        depths = np.zeros((count, horizon + 1), dtype=np.int64)
        sigmas = np.zeros((count, horizon + 1), dtype=np.int64)
        rows = np.arange(count)

        def record(t):
            first[:, t] = np.where(depth > 0, stack[:, 0], -1)
            depths[:, t] = depth
            sigmas[:, t] = sigma

        record(0)
        for t in range(horizon):
            letter = gen.integers(0, 4, size=count).astype(np.int8)
            top = np.where(depth > 0, stack[rows, np.maximum(depth - 1, 0)], -1)
            pop = (depth > 0) & (top == (letter ^ 1))
            push = ~pop
            stack[rows[push], depth[push]] = letter[push]
            depth = depth + np.where(pop, -1, 1)
            sigma = sigma + sign[letter]
            record(t + 1)
        return first, depths, sigmas

    parts = run_blocks(block, len(streams.blocks(n_paths)), workers)
    PATHS_SIMULATED.labels(engine="tree").inc(n_paths)
    return TreePaths(np.vstack([p[0] for p in parts]), np.vstack([p[1] for p in parts]),
                     np.vstack([p[2] for p in parts]))
