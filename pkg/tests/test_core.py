# 🧭 ls-discretize - Core Tests
# Finite measures, group actions on windows and counter-based streams

import math

import numpy as np
import pytest
from hypothesis import given, settings as hypothesis_settings
from hypothesis import strategies as st

from ls_discretize.core import (CounterStreams, CyclicAction, DihedralLineAction, FiniteMeasure, FreeGroupAction,
                                LatticeAction, Purpose, StateRegistry, TrivialAction, act, exponent_sum,
                                free_reduce, parse_word, pushforward, run_blocks, tv_distance)
from ls_discretize.debug_utils import MissingValuesError, StateOutsideWindowError, UnknownGeneratorError
from ls_discretize.discrete_walk import LatticeWalk

weights = st.dictionaries(st.integers(-20, 20), st.floats(0.0, 10.0, allow_nan=False), max_size=12)

# ============================================================================
# FINITE MEASURES
# ============================================================================


@pytest.mark.unit
class TestFiniteMeasure:
    """Sparse measures over hashable states"""

    def test_missing_state_has_zero_mass(self):
        """Lookups outside the support return 0"""
        m = FiniteMeasure({(0, 1): 0.25, (1, 0): 0.75})
        assert m[(5, 5)] == 0.0
        assert m.total == 1.0
        assert m.is_probability()

    def test_pruning_drops_negligible_weights(self):
        """Weights at or below the prune threshold disappear from the support"""
        m = FiniteMeasure({0: 1e-20, 1: 0.5})
        assert m.support == (1,)

    def test_negative_weight_is_rejected(self):
        """A clearly negative weight trips the nonnegativity assertion"""
        with pytest.raises(AssertionError):
            FiniteMeasure({0: -0.5})

    def test_mixture_and_addition(self):
        """Mixtures sum per state; + is the unit mixture"""
        a = FiniteMeasure.dirac("a")
        b = FiniteMeasure({"a": 0.5, "b": 0.5})
        mix = FiniteMeasure.mixture([(0.5, a), (0.5, b)])
        assert mix["a"] == pytest.approx(0.75)
        assert mix["b"] == pytest.approx(0.25)
        assert (a + b).total == pytest.approx(2.0)

    def test_map_states_merges_images(self):
        """Mapping two states onto one adds their masses"""
        m = FiniteMeasure({1: 0.2, -1: 0.3, 2: 0.5})
        folded = m.map_states(abs)
        assert folded[1] == pytest.approx(0.5)
        assert folded[2] == pytest.approx(0.5)

    def test_integrate_mapping_needs_full_support(self):
        """Integrating a partial mapping raises MissingValuesError"""
        m = FiniteMeasure({0: 0.5, 1: 0.5})
        assert m.integrate({0: 2.0, 1: 4.0}) == pytest.approx(3.0)
        assert m.integrate(lambda s: s + 1) == pytest.approx(1.5)
        with pytest.raises(MissingValuesError):
            m.integrate({0: 1.0})

    def test_from_vector_and_restrict(self):
        """Vectors map to measures over the given states"""
        m = FiniteMeasure.from_vector(np.array([0.0, 0.3, 0.7]), ["x", "y", "z"])
        assert m.support == ("y", "z")
        assert m.restrict(lambda s: s == "z").total == pytest.approx(0.7)

    def test_normalized_empty_measure(self):
        """Normalizing the zero measure gives the zero measure"""
        assert FiniteMeasure().normalized().total == 0.0

    @given(weights)
    @hypothesis_settings(max_examples=60, deadline=None)
    def test_total_independent_of_insertion_order(self, raw):
        """The compensated total does not depend on the order of the weights"""
        forward = FiniteMeasure(raw)
        backward = FiniteMeasure(dict(reversed(list(raw.items()))))
        assert forward.total == backward.total
        assert forward == backward

    @given(weights, weights)
    @hypothesis_settings(max_examples=60, deadline=None)
    def test_tv_distance_is_a_metric_on_pairs(self, a, b):
        """TV is symmetric, nonnegative and zero on equal measures"""
        m1, m2 = FiniteMeasure(a), FiniteMeasure(b)
        assert tv_distance(m1, m2) == pytest.approx(tv_distance(m2, m1))
        assert tv_distance(m1, m2) >= 0.0
        assert tv_distance(m1, m1) == 0.0

    @given(weights, st.floats(0.0, 5.0, allow_nan=False))
    @hypothesis_settings(max_examples=60, deadline=None)
    def test_scale_multiplies_total(self, raw, factor):
        """scale(c) multiplies the total by c"""
        m = FiniteMeasure(raw)
        assert m.scale(factor).total == pytest.approx(factor * m.total, rel=1e-9, abs=1e-12)

# ============================================================================
# WORDS AND ACTIONS
# ============================================================================


@pytest.mark.unit
class TestWords:
    """Word parsing and free reduction"""

    def test_inverse_notations_agree(self):
        """A, a^-1 and a⁻¹ all denote the inverse of a"""
        assert parse_word("A") == parse_word("a^-1") == parse_word("a⁻¹") == (("a", -1),)

    def test_identity_words(self):
        """e and the empty word parse to the identity"""
        assert parse_word("") == ()
        assert parse_word("e") == ()

    def test_unparseable_word(self):
        """Symbols outside the grammar raise UnknownGeneratorError"""
        with pytest.raises(UnknownGeneratorError):
            parse_word("a#b")

    def test_free_reduction(self):
        """Adjacent inverse letters cancel"""
        assert free_reduce("abBA") == ""
        assert free_reduce("aabA") == "aabA"
        assert exponent_sum("abA") == 1

    def test_word_applied_to_root(self):
        """ab a⁻¹ applied to the root is the reduced word abA"""
        action = FreeGroupAction()
        assert act("ab a⁻¹", "", action) == "abA"


@pytest.mark.unit
class TestGroupActions:
    """Group actions on coordinates and on window ids"""

    def test_lattice_translation(self):
        """Translations add vectors; unknown letters are rejected"""
        action = LatticeAction(2)
        assert act("a b b", (0, 0), action) == (1, 2)
        assert act("A", (0, 0), action) == (-1, 0)
        with pytest.raises(UnknownGeneratorError):
            act("c", (0, 0), action)

    def test_sublattice_rejects_odd_translation(self):
        """Only multiples of the scale belong to the sublattice group"""
        action = LatticeAction(2, scale=2)
        assert action.element((2, 0)) == (2, 0)
        with pytest.raises(UnknownGeneratorError):
            action.element((1, 0))

    def test_cyclic_wraps(self):
        """Rotations of Z/n wrap around"""
        action = CyclicAction(5)
        assert act("a^3", 4, action) == 2
        assert action.inverse(2) == 3

    def test_dihedral_isotropy(self):
        """Every point of the line is fixed by one reflection"""
        action = DihedralLineAction()
        for n in (-2, 0, 3):
            for g in action.isotropy(n):
                assert action.apply(g, n) == n
        assert action.compose((1, 1), action.inverse((1, 1))) == action.identity

    def test_free_group_kernel_generators(self):
        """Kernel generators preserve the exponent sum modulo the modulus"""
        action = FreeGroupAction(2)
        assert all(action.contains(g) for g in action.generators)
        assert not action.contains("a")

    def test_trivial_action(self):
        """The trivial action has no generators and fixes every state"""
        action = TrivialAction()
        assert action.generators == ()
        assert action.apply(action.identity, 3) == 3

    def test_power_and_inverse(self):
        """g^k composed with g^-k is the identity"""
        action = LatticeAction(3)
        g = (1, -2, 0)
        assert action.compose(action.power(g, 4), action.power(g, -4)) == action.identity

    def test_pushforward_moves_mass(self):
        """Pushforward translates the support and keeps the total"""
        m = FiniteMeasure({(0, 0): 0.4, (1, 0): 0.6})
        moved = pushforward("b", m, LatticeAction(2))
        assert moved[(0, 1)] == pytest.approx(0.4)
        assert moved[(1, 1)] == pytest.approx(0.6)
        assert moved.total == m.total

    def test_pushforward_leaving_window(self):
        """Moving mass outside the loaded window names the escaping state"""
        trunc = LatticeWalk(1).truncate(3)
        edge = trunc.id_of((3,))
        with pytest.raises(StateOutsideWindowError, match=r"\(3,\)"):
            pushforward("a", FiniteMeasure.dirac(edge), LatticeAction(1), trunc.space)

    def test_act_on_window_ids(self):
        """With a space, act maps ids to ids"""
        trunc = LatticeWalk(2).truncate(4)
        start = trunc.id_of((0, 0))
        assert trunc.coord_of(act("ab", start, LatticeAction(2), trunc.space)) == (1, 1)


@pytest.mark.unit
class TestStateRegistry:
    """Dense ids for window coordinates"""

    def test_round_trip_and_duplicates(self):
        """Ids are positions; duplicates are rejected"""
        reg = StateRegistry([(0,), (1,), (-1,)])
        assert reg.id_of((-1,)) == 2
        assert reg.coord_of(1) == (1,)
        assert (5,) not in reg
        with pytest.raises(ValueError):
            StateRegistry([(0,), (0,)])

# ============================================================================
# RANDOM STREAMS
# ============================================================================


@pytest.mark.unit
class TestCounterStreams:
    """Philox streams keyed by seed, purpose and block"""

    def test_same_key_same_draws(self):
        """A (seed, purpose, block) key always gives the same numbers"""
        a = CounterStreams(7).generator(Purpose.PATHS, 3).random(5)
        b = CounterStreams(7).generator(Purpose.PATHS, 3).random(5)
        assert np.array_equal(a, b)

    def test_purposes_and_blocks_differ(self):
        """Different purposes or blocks give different draws"""
        s = CounterStreams(7)
        base = s.generator(Purpose.PATHS, 0).random(4)
        assert not np.array_equal(base, s.generator(Purpose.ALPHA, 0).random(4))
        assert not np.array_equal(base, s.generator(Purpose.PATHS, 1).random(4))

    def test_blocks_cover_items(self):
        """Blocks partition the item range in order"""
        blocks = CounterStreams(0, block_size=100).blocks(250)
        assert blocks == [(0, 0, 100), (1, 100, 100), (2, 200, 50)]
        assert CounterStreams(0).blocks(0) == []

    def test_derive_is_deterministic(self):
        """Derived lineages depend only on seed and salt"""
        a = CounterStreams(11).derive(3)
        assert a.seed == CounterStreams(11).derive(3).seed
        assert a.seed != CounterStreams(11).derive(4).seed

    def test_run_blocks_order_independent_of_workers(self):
        """Thread-pool results come back in block order"""
        fn = lambda b: CounterStreams(5).generator(Purpose.PATHS, b).integers(0, 1000, 3).tolist()
        assert run_blocks(fn, 9, workers=1) == run_blocks(fn, 9, workers=4)

    def test_seed_wraps_to_u64(self):
        """Seeds are reduced to unsigned 64 bits"""
        assert CounterStreams(2 ** 64 + 5).seed == 5
        assert math.isfinite(CounterStreams(2 ** 63).generator(Purpose.START).random())
