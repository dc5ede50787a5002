# 🧭 ls-discretize - Discrete Walk Tests
# Exact identities on small windows: hitting measures, Green functions, harmonic extension

import math

import numpy as np
import pytest

from ls_discretize import discrete_walk
from ls_discretize.core import CounterStreams, FiniteMeasure, tv_distance
from ls_discretize.debug_utils import (DominationError, LeakageError, MissingValuesError, NotCentralError,
                                       PreconditionError)
from ls_discretize.discrete_walk import (BiasedLineWalk, CycleWalk, DihedralLineWalk, DominationResult, ExplicitWalk,
                                         FreeGroupTree, HarmonicFunction, HittingFamily, LatticeWalk, balayage,
                                         branch_hitting_word, build_walk_model, center_ratio_bound,
                                         cesaro_projection, dichotomy_certificate, domination_constant,
                                         extend_harmonic, green, harmonic_residual, hitting_measure,
                                         hitting_recursion_residual, is_irreducible, isotropy_average,
                                         kernel_power, martin_kernel, mu_green, sample_hitting_measure,
                                         sample_tree_paths, solve_dirichlet, symmetric_mu_defect, x_subsequence)
from ls_discretize.settings import ModelSpec

from . import TEST_CONFIG

EXACT = TEST_CONFIG["exact_tolerance"]
R = TEST_CONFIG["lattice_radius"]


def coords(trunc, measure):
    """Measure over ids -> measure over coordinates"""
    return measure.map_states(trunc.coord_of)


@pytest.fixture
def line():
    model = LatticeWalk(1)
    return model, model.truncate(R)


@pytest.fixture
def even_line():
    model = LatticeWalk(1, scale=2)
    return model, model.truncate(R)

# ============================================================================
# MODELS AND WINDOWS
# ============================================================================


@pytest.mark.unit
class TestWalkModels:
    """Model families and their truncations"""

    def test_truncations_are_cached(self):
        """The same radius returns the same window object"""
        model = LatticeWalk(2)
        assert model.truncate(3) is model.truncate(3)

    def test_shifted_window_keeps_state_order(self):
        """Translated windows list states in base order"""
        model = LatticeWalk(1)
        base, moved = model.truncate(4), model.truncate(4, shift="a")
        assert all(moved.coord_of(i) == (base.coord_of(i)[0] + 1,) for i in range(base.n))

    def test_killed_rows(self):
        """Boundary rows are empty; interior rows of the simple walk sum to one"""
        trunc = LatticeWalk(2).truncate(3)
        leak = trunc.one_step_leak()
        assert np.all(leak[trunc.boundary_ids] == 1.0)
        assert leak[trunc.id_of((0, 0))] == pytest.approx(0.0, abs=EXACT)

    def test_cycle_window_is_whole_cycle(self):
        """Finite models have no boundary"""
        trunc = CycleWalk(6).truncate(1)
        assert trunc.n == 6
        assert not trunc.boundary.any()

    def test_tree_window_size(self):
        """A word-length ball of radius r in the 4-regular tree has 2·3^r − 1 words"""
        trunc = FreeGroupTree(2).truncate(3)
        assert trunc.n == 2 * 3 ** 3 - 1

    def test_explicit_walk_rejects_bad_rows(self):
        """Rows of an explicit table must be probability vectors"""
        with pytest.raises(ValueError):
            ExplicitWalk([[0.5, 0.4], [0.0, 1.0]])

    def test_build_walk_model_from_spec(self):
        """Config entries map onto model classes"""
        assert isinstance(build_walk_model(ModelSpec(family="zd-lattice", d=2)), LatticeWalk)
        assert build_walk_model(ModelSpec(family="sublattice-orbit", d=1, modulus=3)).scale == 3
        assert isinstance(build_walk_model(ModelSpec(family="free-group-tree")), FreeGroupTree)
        assert isinstance(build_walk_model(ModelSpec(family="dihedral-line")), DihedralLineWalk)
        with pytest.raises(ValueError):
            build_walk_model(ModelSpec(family="torus-cover-d1"))

    def test_kernel_powers(self, line):
        """ν² from the origin is the binomial law on {−2, 0, 2}"""
        model, trunc = line
        origin = trunc.id_of((0,))
        assert kernel_power(model, 0, origin, trunc).measure == FiniteMeasure.dirac(origin)
        two = coords(trunc, kernel_power(model, 2, origin, trunc).measure)
        assert two[(-2,)] == pytest.approx(0.25)
        assert two[(0,)] == pytest.approx(0.5)
        assert two[(2,)] == pytest.approx(0.25)

    def test_irreducibility(self):
        """Connected windows are irreducible; absorbing pairs give a witness"""
        model = LatticeWalk(2)
        assert is_irreducible(model, model.truncate(3), kmax=20).irreducible
        frozen = ExplicitWalk([[1.0, 0.0], [0.0, 1.0]])
        result = is_irreducible(frozen, frozen.truncate(0), kmax=5)
        assert not result.irreducible
        assert result.witness is not None

# ============================================================================
# HITTING MEASURES
# ============================================================================


@pytest.mark.unit
class TestHittingMeasures:
    """First-entry distributions on X"""

    def test_full_orbit_gives_one_step_law(self, line):
        """With X = Z every next step is an entry, so μ_y = ν_y"""
        model, trunc = line
        mu = coords(trunc, hitting_measure(model, trunc.id_of((0,)), trunc))
        assert mu[(-1,)] == pytest.approx(0.5, abs=EXACT)
        assert mu[(1,)] == pytest.approx(0.5, abs=EXACT)

    def test_even_sublattice_from_orbit_point(self, even_line):
        """On 2Z the return law from 0 is 1/4, 1/2, 1/4 on −2, 0, 2"""
        model, trunc = even_line
        mu = coords(trunc, hitting_measure(model, trunc.id_of((0,)), trunc))
        assert mu[(-2,)] == pytest.approx(0.25, abs=EXACT)
        assert mu[(0,)] == pytest.approx(0.5, abs=EXACT)
        assert mu[(2,)] == pytest.approx(0.25, abs=EXACT)
        assert mu.total == pytest.approx(1.0, abs=EXACT)

    def test_even_sublattice_from_odd_point(self, even_line):
        """From an odd point the walk enters 2Z at the next step"""
        model, trunc = even_line
        mu = coords(trunc, hitting_measure(model, trunc.id_of((3,)), trunc))
        assert mu.support == ((2,), (4,))
        assert mu[(2,)] == pytest.approx(0.5, abs=EXACT)
        assert mu[(4,)] == pytest.approx(0.5, abs=EXACT)

    def test_recursion_and_symmetry(self):
        """μ satisfies its first-step recursion and is symmetric for a symmetric walk"""
        model = LatticeWalk(2, scale=2)
        family = HittingFamily(model, model.truncate(6))
        for coord in [(0, 0), (1, 0), (1, 1), (2, -2)]:
            assert hitting_recursion_residual(family, family.trunc.id_of(coord)) < EXACT
        assert symmetric_mu_defect(family) < EXACT

    def test_one_step_orbit_skips_the_solve(self):
        """On the tree every non-orbit state steps straight into X; both routes agree"""
        model = FreeGroupTree(2)
        trunc = model.truncate(4)
        fast = HittingFamily(model, trunc)
        slow = HittingFamily(model, trunc)
        slow._one_step = False
        assert fast._one_step
        for y in np.flatnonzero(~trunc.boundary):
            assert tv_distance(fast.measure(y), slow.measure(y)) < EXACT
        assert not HittingFamily(LatticeWalk(2, scale=2), LatticeWalk(2, scale=2).truncate(4))._one_step

    def test_leak_near_the_boundary(self, line):
        """States next to the boundary lose mass and are refused"""
        model, trunc = line
        with pytest.raises(LeakageError, match="radius"):
            hitting_measure(model, trunc.id_of((R - 1,)), trunc)

    def test_orbit_must_meet_interior(self):
        """An empty orbit is a precondition failure"""
        model = ExplicitWalk([[0.5, 0.5], [0.5, 0.5]], orbit=[])
        with pytest.raises(PreconditionError):
            HittingFamily(model, model.truncate(0))

    def test_interior_excludes_leaky_states(self, even_line):
        """Only X states whose entry law stays in the window are interior"""
        model, trunc = even_line
        family = HittingFamily.of(model, trunc)
        interior = {trunc.coord_of(int(x)) for x in family.interior()}
        assert (0,) in interior
        assert (R - 2,) not in interior

    def test_balayage_gamblers_ruin(self):
        """Sweeping δ_0 onto {−2, 3} gives ruin probabilities 3/5 and 2/5"""
        model = LatticeWalk(1)
        trunc = model.truncate(R)
        target = [trunc.id_of((-2,)), trunc.id_of((3,))]
        swept = coords(trunc, balayage(model, trunc.id_of((0,)), trunc, target))
        assert swept[(-2,)] == pytest.approx(0.6, abs=EXACT)
        assert swept[(3,)] == pytest.approx(0.4, abs=EXACT)
        assert balayage(model, target[0], trunc, target) == FiniteMeasure.dirac(target[0])

    def test_sampled_measure_matches_exact(self, even_line):
        """Monte Carlo entries agree with the solved law within 4 standard errors"""
        model, trunc = even_line
        y = trunc.id_of((0,))
        exact = hitting_measure(model, y, trunc)
        sampled = sample_hitting_measure(model, y, trunc, TEST_CONFIG["small_paths"], CounterStreams(3))
        assert sampled.n == TEST_CONFIG["small_paths"]
        for x, p in exact.items():
            se = math.sqrt(p * (1 - p) / sampled.n)
            assert abs(sampled.measure[x] - p) <= 4 * se
        assert tv_distance(sampled.measure, exact) < 0.05

# ============================================================================
# GREEN FUNCTIONS AND DIRICHLET PROBLEMS
# ============================================================================


@pytest.mark.unit
class TestGreenFunctions:
    """Expected visits on the killed chain"""

    def test_green_at_center_of_interval(self, line):
        """The walk on [−R, R] killed at ±R visits 0 on average R times"""
        model, trunc = line
        origin = trunc.id_of((0,))
        assert green(model, origin, origin, trunc) == pytest.approx(R, rel=1e-9)

    def test_mu_chain_green_equals_walk_green_on_full_orbit(self, line):
        """With X = Y the μ-chain is the walk itself"""
        model, trunc = line
        family = HittingFamily.of(model, trunc)
        origin, one = trunc.id_of((0,)), trunc.id_of((1,))
        assert mu_green(family, origin, one) == pytest.approx(green(model, origin, one, trunc), rel=1e-9)

    def test_mu_green_needs_orbit_target(self, even_line):
        """x must lie in X"""
        model, trunc = even_line
        family = HittingFamily.of(model, trunc)
        with pytest.raises(PreconditionError):
            mu_green(family, trunc.id_of((0,)), trunc.id_of((1,)))

    def test_martin_kernel_normalization(self, line):
        """K(x0, x) = 1"""
        model, trunc = line
        x0, x = trunc.id_of((0,)), trunc.id_of((2,))
        assert martin_kernel(model, x0, x0, x, trunc) == pytest.approx(1.0)

    def test_dirichlet_linear_profile(self, line):
        """Boundary data 0 at −R and 1 at R extends linearly"""
        model, trunc = line
        data = {trunc.id_of((-R,)): 0.0, trunc.id_of((R,)): 1.0}
        u = solve_dirichlet(model, trunc, data)
        for n in (-3, 0, 5):
            assert u[trunc.id_of((n,))] == pytest.approx((n + R) / (2 * R), abs=1e-9)

# ============================================================================
# HARMONIC FUNCTIONS
# ============================================================================


@pytest.mark.unit
class TestHarmonicFunctions:
    """Residuals, extension and the structural certificates"""

    def test_saddle_is_harmonic_on_the_plane(self):
        """x² − y² is ν-harmonic for the simple walk on Z²"""
        model = LatticeWalk(2)
        trunc = model.truncate(5)
        h = HarmonicFunction.from_coords(trunc, lambda c: c[0] ** 2 - c[1] ** 2)
        assert harmonic_residual(model, h, trunc) < EXACT

    def test_residual_needs_values_on_interior(self):
        """A partial function is reported, not silently integrated"""
        model = LatticeWalk(1)
        trunc = model.truncate(4)
        with pytest.raises(MissingValuesError):
            harmonic_residual(model, {trunc.id_of((0,)): 1.0}, trunc)

    def test_branch_probability_is_tree_harmonic(self):
        """The probability of ending in the a-branch is harmonic on the tree"""
        model = FreeGroupTree(2)
        trunc = model.truncate(5)
        h = HarmonicFunction.from_coords(trunc, branch_hitting_word)
        assert harmonic_residual(model, h, trunc) < EXACT
        assert branch_hitting_word("") == pytest.approx(0.25)
        assert branch_hitting_word("a") == pytest.approx(0.75)
        assert branch_hitting_word("b") == pytest.approx(1 / 12)

    def test_extension_from_even_sublattice(self, even_line):
        """Extending h(n) = n from 2Z gives the identity at odd points"""
        model, trunc = even_line
        family = HittingFamily.of(model, trunc)
        h = HarmonicFunction.from_coords(trunc, lambda c: float(c[0]), ids=family.x_ids, domain="X")
        extended = extend_harmonic(h, family)
        assert extended.domain == "Y"
        assert extended[trunc.id_of((3,))] == pytest.approx(3.0, abs=EXACT)
        assert extended[trunc.id_of((R,))] == 0.0
        assert harmonic_residual(family, h) < EXACT

    def test_unbounded_extension_respects_domination(self, even_line):
        """Extended values stay under c·μ_{y0}(|h|); a bound that is too small is refused"""
        model, trunc = even_line
        family = HittingFamily.of(model, trunc)
        h = HarmonicFunction.from_coords(trunc, lambda c: float(c[0]) ** 2 + 10.0, ids=family.x_ids, domain="X")
        extended = extend_harmonic(h, family, bounded=False)
        y = trunc.id_of((3,))
        dom = domination_constant(model, y, trunc)
        assert abs(extended[y]) <= dom.c * family.measure(dom.y0).integrate(lambda s: abs(h.values[s]))
        assert extended[y] == pytest.approx(0.5 * (4.0 + 16.0) + 10.0, abs=EXACT)

    def test_extension_past_its_bound_is_refused(self, even_line, monkeypatch):
        """A domination constant that cannot cover the value raises DominationError"""
        model, trunc = even_line
        family = HittingFamily.of(model, trunc)
        origin = trunc.id_of((0,))
        monkeypatch.setattr(discrete_walk, "domination_constant",
                            lambda *args, **kwargs: DominationResult(origin, 1e-6, (origin,), 0.0))
        h = HarmonicFunction.from_coords(trunc, lambda c: float(c[0]) + 10.0, ids=family.x_ids, domain="X")
        with pytest.raises(DominationError, match="domination bound"):
            extend_harmonic(h, family, bounded=False)
        assert extend_harmonic(h, family)[trunc.id_of((3,))] == pytest.approx(13.0, abs=EXACT)

    def test_domination_on_even_sublattice(self, even_line):
        """μ_1 ≤ 2·μ_{y0} from the one-step path into 1"""
        model, trunc = even_line
        result = domination_constant(model, trunc.id_of((1,)), trunc)
        assert result.c == pytest.approx(2.0, rel=1e-9)
        assert result.max_violation <= EXACT

    def test_constant_function_certificate(self, line):
        """Constants give a zero dichotomy sum"""
        model, trunc = line
        family = HittingFamily.of(model, trunc)
        h = {int(x): 1.0 for x in family.x_ids}
        report = dichotomy_certificate(model, h, trunc.id_of((0,)), trunc)
        assert report.verdict == "constant"
        assert report.total == pytest.approx(0.0, abs=EXACT)

    def test_exponential_function_on_biased_line(self):
        """e^{bn} is harmonic for the biased walk and is flagged exponential"""
        model = BiasedLineWalk(1.0)
        trunc = model.truncate(R)
        family = HittingFamily.of(model, trunc)
        h = {int(x): math.exp(trunc.coord_of(int(x))[0]) for x in family.x_ids}
        assert harmonic_residual(family, h) < 1e-9 * max(h.values())
        report = dichotomy_certificate(model, h, trunc.id_of((0,)), trunc)
        assert report.verdict == "exponential"
        assert not report.symmetric
        bound = center_ratio_bound(model, h, "a", trunc)
        assert bound.verified
        assert bound.max_ratio == pytest.approx(math.e, rel=1e-9)

    def test_center_bound_needs_central_element(self):
        """Translations are not central in the dihedral group"""
        model = DihedralLineWalk()
        trunc = model.truncate(5)
        with pytest.raises(NotCentralError):
            center_ratio_bound(model, {}, (1, 1), trunc)

    def test_cesaro_average_of_constant(self):
        """Averages of a constant on the cycle converge at once"""
        model = CycleWalk(5)
        family = HittingFamily(model, model.truncate(0))
        report = cesaro_projection(family, {int(x): 2.0 for x in family.x_ids}, horizon=4)
        assert report.converged
        assert all(v == pytest.approx(2.0) for v in report.limit.values())

    def test_isotropy_average_on_dihedral_line(self):
        """Averaging over the reflection fixing 0 kills the sign"""
        model = DihedralLineWalk()
        out = isotropy_average(lambda g: float(g[1]), model.action, [0], [0, 3, -2])
        assert all(v == 0.0 for v in out.values())
        shifts = isotropy_average(lambda g: float(g[0]), model.action, [0], [3])
        assert shifts[3] == pytest.approx(3.0)

    def test_x_subsequence(self):
        """The start is kept and then only X members"""
        assert x_subsequence([1, 2, 3, 4], {2, 4}).states == (1, 2, 4)
        empty = x_subsequence([1, 3], {0})
        assert empty.states == (1,)
        assert not empty.reached_x

# ============================================================================
# TREE SAMPLER
# ============================================================================


@pytest.mark.unit
class TestTreeSampler:
    """Letter-stack walks on the infinite tree"""

    def test_depth_and_exponent_parity(self):
        """Depth and exponent sum change by one each step"""
        paths = sample_tree_paths(300, 12, CounterStreams(9, block_size=128))
        t = np.arange(13)
        assert paths.depth.shape == (300, 13)
        assert np.all(paths.depth[:, 0] == 0)
        assert np.all(paths.first[:, 0] == -1)
        assert np.all(paths.depth[:, 1] == 1)
        assert np.all(np.abs(np.diff(paths.depth, axis=1)) == 1)
        assert np.all((paths.sigma - t) % 2 == 0)

    def test_start_word_sets_initial_state(self):
        """Paths from ab start at depth two in the a-branch"""
        paths = sample_tree_paths(50, 3, CounterStreams(9), start="ab")
        assert np.all(paths.depth[:, 0] == 2)
        assert np.all(paths.first[:, 0] == 0)
        assert np.all(paths.sigma[:, 0] == 2)
