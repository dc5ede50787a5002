"""
🧱 Core substrate: state registries, truncations, group actions and sparse
finite measures, shared by the discrete and the continuous engines.

All types here are immutable after construction. Truncations carry a
private memo dict for solver factorizations; it is filled lazily under a
lock and never changes a computed value.
"""

import re
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import (Any, Callable, Dict, Hashable, Iterable, Iterator, List, Mapping,
                    Optional, Sequence, Tuple, Union)

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .debug_utils import (MissingValuesError, StateOutsideWindowError,
                          UnknownGeneratorError, debug_assert, get_logger)
from .settings import settings

logger = get_logger(__name__)

State = Hashable

# ============================================================================
# 📦 FINITE MEASURES
# ============================================================================


def _sort_key(item):
    return item[0]


class FiniteMeasure:
    """Sparse nonnegative weights over hashable states.

    Weights at or below the prune threshold (1e-15 by default) are dropped.
    The total is a compensated sum, so it does not depend on insertion order.
    """

    __slots__ = ("_weights", "_total")

    def __init__(self, weights: Optional[Mapping[State, float]] = None, prune: Optional[float] = None):
        threshold = settings.PRUNE_THRESHOLD if prune is None else prune
        cleaned: Dict[State, float] = {}
        for state, weight in (weights or {}).items():
            weight = float(weight)
            debug_assert(math.isfinite(weight) and weight >= -max(threshold, 1e-12),
                         "FiniteMeasure weights must be finite and nonnegative",
                         {"state": state, "weight": weight})
            if weight > threshold:
                cleaned[state] = weight
        try:
            items = sorted(cleaned.items(), key=_sort_key)
        except TypeError:
            items = list(cleaned.items())
        self._weights = dict(items)
        self._total = math.fsum(self._weights.values())

    @classmethod
    def dirac(cls, state: State, mass: float = 1.0) -> 'FiniteMeasure':
        return cls({state: mass})

    @classmethod
    def mixture(cls, terms: Iterable[Tuple[float, 'FiniteMeasure']]) -> 'FiniteMeasure':
        """Σ c_i m_i with per-state compensated summation."""
        parts: Dict[State, List[float]] = {}
        for coef, measure in terms:
            for state, weight in measure.items():
                parts.setdefault(state, []).append(coef * weight)
        return cls({state: math.fsum(values) for state, values in parts.items()})

    @classmethod
    def from_vector(cls, vector: np.ndarray, states: Sequence[State]) -> 'FiniteMeasure':
        nz = np.flatnonzero(vector)
        return cls({states[i]: float(vector[i]) for i in nz})

    @property
    def total(self) -> float:
        return self._total

    @property
    def support(self) -> Tuple[State, ...]:
        return tuple(self._weights)

    def items(self):
        return self._weights.items()

    def to_dict(self) -> Dict[State, float]:
        return dict(self._weights)

    def __getitem__(self, state: State) -> float:
        return self._weights.get(state, 0.0)

    def __contains__(self, state: State) -> bool:
        return state in self._weights

    def __iter__(self) -> Iterator[State]:
        return iter(self._weights)

    def __len__(self) -> int:
        return len(self._weights)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FiniteMeasure):
            return NotImplemented
        return self._weights == other._weights

    def __hash__(self):
        return hash(tuple(self._weights.items()))

    def __repr__(self) -> str:
        head = ", ".join(f"{s!r}: {w:.6g}" for s, w in list(self._weights.items())[:6])
        more = ", ..." if len(self._weights) > 6 else ""
        return f"FiniteMeasure({{{head}{more}}}, total={self._total:.12g})"

    def __add__(self, other: 'FiniteMeasure') -> 'FiniteMeasure':
        return FiniteMeasure.mixture([(1.0, self), (1.0, other)])

    def scale(self, factor: float) -> 'FiniteMeasure':
        return FiniteMeasure({s: factor * w for s, w in self._weights.items()})

    def normalized(self) -> 'FiniteMeasure':
        if self._total <= 0:
            return FiniteMeasure()
        return self.scale(1.0 / self._total)

    def restrict(self, keep: Callable[[State], bool]) -> 'FiniteMeasure':
        return FiniteMeasure({s: w for s, w in self._weights.items() if keep(s)})

    def map_states(self, fn: Callable[[State], State]) -> 'FiniteMeasure':
        moved: Dict[State, List[float]] = {}
        for s, w in self._weights.items():
            moved.setdefault(fn(s), []).append(w)
        return FiniteMeasure({s: math.fsum(ws) for s, ws in moved.items()})

    def integrate(self, h: Union[Mapping[State, float], Callable[[State], float]]) -> float:
        """Σ m(s) h(s); a mapping must cover the whole support."""
        if callable(h) and not isinstance(h, Mapping):
            return math.fsum(w * float(h(s)) for s, w in self._weights.items())
        missing = [s for s in self._weights if s not in h]
        if missing:
            raise MissingValuesError(f"h has no value at {len(missing)} support states, e.g. {missing[0]!r}",
                                     {"missing": [repr(s) for s in missing[:10]]})
        return math.fsum(w * float(h[s]) for s, w in self._weights.items())

    def is_probability(self, tol: float = 1e-9) -> bool:
        return abs(self._total - 1.0) <= tol


def tv_distance(m1: FiniteMeasure, m2: FiniteMeasure) -> float:
    """Total variation ½ Σ |m1 − m2| over the union of supports."""
    states = set(m1.support) | set(m2.support)
    return 0.5 * math.fsum(abs(m1[s] - m2[s]) for s in states)

# ============================================================================
# 🗂️ STATE REGISTRY, SPACE AND TRUNCATION
# ============================================================================


class StateRegistry:
    """Dense integer ids for the coordinates of one window."""

    def __init__(self, coords: Iterable[State]):
        self._coords: Tuple[State, ...] = tuple(coords)
        self._index: Dict[State, int] = {}
        for i, c in enumerate(self._coords):
            if c in self._index:
                raise ValueError(f"Duplicate state {c!r} in registry")
            self._index[c] = i

    def __len__(self) -> int:
        return len(self._coords)

    def __contains__(self, coord: State) -> bool:
        return coord in self._index

    @property
    def coords(self) -> Tuple[State, ...]:
        return self._coords

    def id_of(self, coord: State) -> int:
        try:
            return self._index[coord]
        except KeyError:
            raise StateOutsideWindowError(f"State {coord!r} lies outside the loaded window",
                                          {"state": repr(coord), "window_size": len(self._coords)})

    def get(self, coord: State, default: Optional[int] = None) -> Optional[int]:
        return self._index.get(coord, default)

    def coord_of(self, state_id: int) -> State:
        return self._coords[state_id]


@dataclass(frozen=True, eq=False)
class StateSpace:
    """A window of states with adjacency and a metric on coordinates."""
    registry: StateRegistry
    adjacency: sparse.csr_matrix
    metric: Callable[[State, State], float]

    @property
    def n(self) -> int:
        return len(self.registry)

    def neighbors(self, state_id: int) -> np.ndarray:
        row = self.adjacency
        return row.indices[row.indptr[state_id]:row.indptr[state_id + 1]]

    def distance(self, i: int, j: int) -> float:
        return float(self.metric(self.registry.coord_of(i), self.registry.coord_of(j)))

    def is_symmetric(self) -> bool:
        diff = (self.adjacency != self.adjacency.T)
        return diff.nnz == 0


@dataclass(frozen=True, eq=False)
class Truncation:
    """Finite window with absorbing (killing) boundary.

    ``transition`` is the killed kernel: boundary rows are zero, and steps
    that would leave the window are dropped.
    """
    space: StateSpace
    radius: int
    boundary: np.ndarray
    transition: sparse.csr_matrix
    _cache: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)
    _lock: Any = field(default_factory=threading.RLock, compare=False, repr=False)

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def registry(self) -> StateRegistry:
        return self.space.registry

    @property
    def boundary_ids(self) -> np.ndarray:
        return np.flatnonzero(self.boundary)

    @property
    def interior_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    def id_of(self, coord: State) -> int:
        return self.registry.id_of(coord)

    def coord_of(self, state_id: int) -> State:
        return self.registry.coord_of(state_id)

    def row(self, state_id: int) -> FiniteMeasure:
        p = self.transition
        lo, hi = p.indptr[state_id], p.indptr[state_id + 1]
        return FiniteMeasure(dict(zip(p.indices[lo:hi].tolist(), p.data[lo:hi].tolist())))

    def one_step_leak(self) -> np.ndarray:
        """1 − row sum for every state (1 on the boundary)."""
        return 1.0 - np.asarray(self.transition.sum(axis=1)).ravel()

    def is_connected(self) -> bool:
        n_components, _ = csgraph.connected_components(self.space.adjacency, directed=True, connection="weak")
        return n_components == 1

    def memo(self, key: str, build: Callable[[], Any]) -> Any:
        with self._lock:
            if key not in self._cache:
                self._cache[key] = build()
            return self._cache[key]

# ============================================================================
# 🔤 WORDS AND GROUP ACTIONS
# ============================================================================

_TOKEN = re.compile(r"([A-Za-z])(?:\^(-?\d+)|(⁻¹))?")
_IDENTITY_WORDS = {"", "e", "1", "id"}


def parse_word(word: str) -> Tuple[Tuple[str, int], ...]:
    """Parse ``"ab a⁻¹"``, ``"abA"`` or ``"a^2 b^-1"`` into (letter, power) pairs.

    Lowercase letters are generators, uppercase letters their inverses, and
    ``e`` is the identity.
    """
    text = word.replace(" ", "").replace("*", "")
    if text in _IDENTITY_WORDS:
        return ()
    tokens: List[Tuple[str, int]] = []
    pos = 0
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None:
            raise UnknownGeneratorError(f"Cannot parse word {word!r} at position {pos}", {"word": word})
        letter, power, superscript = match.groups()
        exponent = int(power) if power is not None else (-1 if superscript else 1)
        if letter == "e":
            exponent = 0
        elif letter.isupper():
            letter, exponent = letter.lower(), -exponent
        if exponent:
            tokens.append((letter, exponent))
        pos = match.end()
    return tuple(tokens)


class GroupAction:
    """A group acting on coordinates through a fixed alphabet of generators.

    Elements are canonical hashable values, so equality of elements is
    equality of their representations.
    """

    label = "group"
    alphabet = ""

    @property
    def identity(self) -> Any:
        raise NotImplementedError

    @property
    def generators(self) -> Tuple[Any, ...]:
        raise NotImplementedError

    def letter(self, letter: str) -> Any:
        raise NotImplementedError

    def compose(self, g: Any, h: Any) -> Any:
        raise NotImplementedError

    def inverse(self, g: Any) -> Any:
        raise NotImplementedError

    def apply(self, g: Any, coord: State) -> State:
        raise NotImplementedError

    def native(self, g: Any) -> Any:
        raise UnknownGeneratorError(f"{self.label} cannot interpret {g!r}", {"element": repr(g)})

    def element(self, word: Any) -> Any:
        """Canonical element from a word string or a native element."""
        if not isinstance(word, str):
            return self.native(word)
        result = self.identity
        for letter, power in parse_word(word):
            if letter not in self.alphabet:
                raise UnknownGeneratorError(f"Unknown generator '{letter}' for {self.label}",
                                            {"word": word, "alphabet": self.alphabet})
            base = self.letter(letter)
            if power < 0:
                base, power = self.inverse(base), -power
            for _ in range(power):
                result = self.compose(result, base)
        return result

    def power(self, g: Any, k: int) -> Any:
        result = self.identity
        base = g if k >= 0 else self.inverse(g)
        for _ in range(abs(k)):
            result = self.compose(result, base)
        return result

    def isotropy(self, coord: State) -> Tuple[Any, ...]:
        return (self.identity,)

    def transporter(self, src: State, dst: State) -> Optional[Any]:
        """Some g with g·src = dst, or None when dst is not in the orbit of src."""
        raise NotImplementedError

    def contains(self, g: Any) -> bool:
        return True

    def is_central(self, g: Any) -> bool:
        return g == self.identity


class LatticeAction(GroupAction):
    """Translations by scale·ℤ^d on integer vectors."""

    def __init__(self, d: int, scale: int = 1):
        self.d = d
        self.scale = scale
        self.alphabet = "abc"[:d]
        self.label = f"{scale}Z^{d}" if scale != 1 else f"Z^{d}"

    @property
    def identity(self):
        return (0,) * self.d

    @property
    def generators(self):
        return tuple(self.letter(ch) for ch in self.alphabet)

    def letter(self, letter):
        i = self.alphabet.index(letter)
        return tuple(self.scale if j == i else 0 for j in range(self.d))

    def native(self, g):
        vec = tuple(int(v) for v in np.atleast_1d(g))
        if len(vec) != self.d:
            raise UnknownGeneratorError(f"Translation {g!r} is not a vector in Z^{self.d}", {"element": repr(g)})
        if any(v % self.scale for v in vec):
            raise UnknownGeneratorError(f"Translation {vec} is not in {self.label}", {"element": repr(vec)})
        return vec

    def compose(self, g, h):
        return tuple(a + b for a, b in zip(g, h))

    def inverse(self, g):
        return tuple(-a for a in g)

    def apply(self, g, coord):
        if self.d == 1 and not isinstance(coord, tuple):
            return coord + g[0]
        return tuple(a + b for a, b in zip(g, coord))

    def transporter(self, src, dst):
        src_vec = (src,) if not isinstance(src, tuple) else src
        dst_vec = (dst,) if not isinstance(dst, tuple) else dst
        diff = tuple(b - a for a, b in zip(src_vec, dst_vec))
        if any(v % self.scale for v in diff):
            return None
        return diff

    def contains(self, g):
        return all(v % self.scale == 0 for v in g)

    def is_central(self, g):
        return True


class CyclicAction(GroupAction):
    """Rotations of ℤ/n."""

    alphabet = "a"

    def __init__(self, n: int):
        self.n = n
        self.label = f"Z/{n}"

    @property
    def identity(self):
        return 0

    @property
    def generators(self):
        return (1,)

    def letter(self, letter):
        return 1 % self.n

    def native(self, g):
        return int(np.atleast_1d(g)[0]) % self.n

    def compose(self, g, h):
        return (g + h) % self.n

    def inverse(self, g):
        return (-g) % self.n

    def apply(self, g, coord):
        return (coord + g) % self.n

    def transporter(self, src, dst):
        return (dst - src) % self.n

    def is_central(self, g):
        return True


_INVERSE_LETTER = str.maketrans("aAbB", "AaBb")


def free_reduce(word: str) -> str:
    """Freely reduce a word over a, A, b, B."""
    stack: List[str] = []
    for ch in word:
        if stack and stack[-1] == ch.translate(_INVERSE_LETTER):
            stack.pop()
        else:
            stack.append(ch)
    return "".join(stack)


def exponent_sum(word: str) -> int:
    return sum(1 if ch.islower() else -1 for ch in word)


class FreeGroupAction(GroupAction):
    """Rank-2 free group acting on its Cayley tree by left multiplication.

    The declared group Γ is the kernel of the exponent sum modulo ``modulus``
    (all of F2 when modulus is 1); its orbit of the root is the set of
    words whose exponent sum is divisible by ``modulus``.
    """

    alphabet = "ab"

    def __init__(self, modulus: int = 1):
        self.modulus = modulus
        self.label = "F2" if modulus == 1 else f"ker(F2 -> Z/{modulus})"

    @property
    def identity(self):
        return ""

    @property
    def generators(self):
        if self.modulus == 1:
            return ("a", "b")
        return ("aB", "bA", "a" * self.modulus)

    def letter(self, letter):
        return letter

    def native(self, g):
        if isinstance(g, str):
            return free_reduce(g)
        return super().native(g)

    def element(self, word):
        if isinstance(word, str) and set(word) <= set("aAbB"):
            return free_reduce(word)
        return super().element(word)

    def compose(self, g, h):
        return free_reduce(g + h)

    def inverse(self, g):
        return g[::-1].translate(_INVERSE_LETTER)

    def apply(self, g, coord):
        return free_reduce(g + coord)

    def contains(self, g):
        return exponent_sum(g) % self.modulus == 0

    def transporter(self, src, dst):
        g = free_reduce(dst + self.inverse(src))
        return g if self.contains(g) else None


class DihedralLineAction(GroupAction):
    """The infinite dihedral group on ℤ: (t, s)·n = s·n + t.

    Every point has isotropy of order two, {(0, 1), (2n, −1)}.
    """

    alphabet = "ar"
    label = "D_inf"

    @property
    def identity(self):
        return (0, 1)

    @property
    def generators(self):
        return ((1, 1), (0, -1))

    def letter(self, letter):
        return (1, 1) if letter == "a" else (0, -1)

    def native(self, g):
        t, s = g
        if s not in (1, -1):
            raise UnknownGeneratorError(f"{g!r} is not a dihedral element", {"element": repr(g)})
        return (int(t), int(s))

    def compose(self, g, h):
        return (g[0] + g[1] * h[0], g[1] * h[1])

    def inverse(self, g):
        return (-g[1] * g[0], g[1])

    def apply(self, g, coord):
        return g[1] * coord + g[0]

    def isotropy(self, coord):
        return ((0, 1), (2 * coord, -1))

    def transporter(self, src, dst):
        return (dst - src, 1)


class TrivialAction(GroupAction):
    """Only the identity; used by explicit transition tables."""

    alphabet = ""
    label = "trivial"

    @property
    def identity(self):
        return ()

    @property
    def generators(self):
        return ()

    def compose(self, g, h):
        return ()

    def inverse(self, g):
        return ()

    def apply(self, g, coord):
        return coord

    def transporter(self, src, dst):
        return () if src == dst else None


def act(word: Any, s: State, action: GroupAction, space: Optional[StateSpace] = None) -> State:
    """Image of state ``s`` under the group element named by ``word``.

    With a ``space``, ``s`` and the result are window ids; without one they
    are coordinates.
    """
    g = action.element(word)
    if space is None:
        return action.apply(g, s)
    coord = space.registry.coord_of(s)
    return space.registry.id_of(action.apply(g, coord))


def pushforward(word: Any, m: FiniteMeasure, action: GroupAction,
                space: Optional[StateSpace] = None) -> FiniteMeasure:
    """(g·m)(g·A) = m(A); total mass is carried over unchanged."""
    g = action.element(word)
    moved: Dict[State, float] = {}
    for s, w in m.items():
        if space is None:
            image = action.apply(g, s)
        else:
            coord = space.registry.coord_of(s)
            image_coord = action.apply(g, coord)
            if image_coord not in space.registry:
                raise StateOutsideWindowError(
                    f"Pushforward moves {coord!r} to {image_coord!r}, outside the loaded window",
                    {"state": repr(coord), "image": repr(image_coord)})
            image = space.registry.id_of(image_coord)
        moved[image] = w
    return FiniteMeasure(moved)

# ============================================================================
# 🎲 COUNTER-BASED RANDOM STREAMS
# ============================================================================


class Purpose(IntEnum):
    PATHS = 1
    ALPHA = 2
    SWEEP = 3
    EXIT_KERNEL = 4
    BALAYAGE = 5
    SOJOURN = 6
    TORUS = 7
    DISCRETE = 8
    CALIBRATION = 9
    PERMUTATION = 10
    START = 11


_U64 = (1 << 64) - 1
_BLOCK_BITS = 48


class CounterStreams:
    """Philox streams keyed by (seed, purpose, block).

    A block always holds the same path indices, so results do not depend on
    how blocks are scheduled across workers.
    """

    def __init__(self, seed: int, block_size: Optional[int] = None):
        self.seed = int(seed) & _U64
        self.block_size = int(block_size or settings.BLOCK_SIZE)

    def generator(self, purpose: Union[Purpose, int], block: int = 0) -> np.random.Generator:
        debug_assert(0 <= block < (1 << _BLOCK_BITS), "block index out of range", {"block": block})
        key = np.array([self.seed, (int(purpose) << _BLOCK_BITS) | int(block)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def blocks(self, n_items: int) -> List[Tuple[int, int, int]]:
        """(block index, first item, item count) covering ``n_items``."""
        return [(b, start, min(self.block_size, n_items - start))
                for b, start in enumerate(range(0, n_items, self.block_size))]

    def derive(self, salt: int) -> 'CounterStreams':
        """Independent lineage, e.g. one per check in a suite."""
        mixed = np.random.SeedSequence([self.seed, int(salt)]).generate_state(2, dtype=np.uint64)
        return CounterStreams(int(mixed[0]), self.block_size)


def run_blocks(fn: Callable[[int], Any], n_blocks: int, workers: int = 1) -> List[Any]:
    """Evaluate ``fn`` on block indices; results come back in block order."""
    if workers <= 1 or n_blocks <= 1:
        return [fn(b) for b in range(n_blocks)]
    with ThreadPoolExecutor(max_workers=min(workers, n_blocks)) as executor:
        return list(executor.map(fn, range(n_blocks)))
