# 🧭 ls-discretize - Diffusion Tests
# Deck points, regions, stopping times and LS path ensembles on torus covers

import math

import numpy as np
import pytest

from ls_discretize.core import CounterStreams, Purpose
from ls_discretize.debug_utils import PreconditionError, RegionError
from ls_discretize.diffusion import (EVENT_TAGS, BoundaryBinning, DeckPoint, DriftModel, RegionSpec, SiteLattice,
                                     allocate_paths, energy_permutation_test, exit_measure_estimate, hit_time,
                                     lift_path, poisson_kernel, projection_law_check, read_events, simulate_ls_paths,
                                     site_index, sojourn_green_estimate, step, torus_path)
from ls_discretize.settings import ModelSpec

COARSE_DT = 1e-3


@pytest.fixture
def brownian_line():
    return DriftModel(1, (), COARSE_DT)


@pytest.fixture
def line_regions():
    lattice = SiteLattice.build(1)
    return RegionSpec("orbit-balls", lattice, 0.1), RegionSpec("orbit-balls", lattice, 0.3)

# ============================================================================
# DRIFT MODELS AND DECK POINTS
# ============================================================================


@pytest.mark.unit
class TestDriftModel:
    """ln φ as a cosine series and its gradient"""

    def test_flat_model_has_zero_drift(self):
        """φ ≡ 1 is Brownian motion"""
        model = DriftModel(2)
        assert model.is_brownian
        assert np.all(model.drift(np.array([[0.3, 0.7]])) == 0.0)

    def test_invalid_models(self):
        """Dimension and wave vectors are checked"""
        with pytest.raises(ValueError):
            DriftModel(4)
        with pytest.raises(ValueError):
            DriftModel(2, (((1,), 0.5),))

    def test_drift_is_gradient_of_log_phi(self):
        """Central differences of ln φ match the drift"""
        model = DriftModel.from_spec(ModelSpec(family="torus-cover-d2", phi=[[1, 0, 0.5], [1, 1, -0.3]]))
        x = np.array([[0.13, 0.71]])
        h = 1e-6
        numeric = [(model.log_phi(x + h * e) - model.log_phi(x - h * e))[0] / (2 * h) for e in np.eye(2)]
        assert np.allclose(model.drift(x)[0], numeric, atol=1e-6)

    def test_drift_is_periodic(self):
        """The drift is invariant under integer translations"""
        model = DriftModel(1, (((1,), 0.8),))
        x = np.array([[0.37]])
        assert np.allclose(model.drift(x), model.drift(x + 3.0))


@pytest.mark.unit
class TestDeckPoints:
    """Integer cells plus offsets in [0,1)^d"""

    def test_negative_coordinates(self):
        """−0.25 lives in cell −1 at offset 0.75"""
        p = DeckPoint.from_real([-0.25, 1.5])
        assert p.cell.tolist() == [[-1, 1]]
        assert np.allclose(p.offset, [[0.75, 0.5]])
        assert np.allclose(p.real(), [[-0.25, 1.5]])

    def test_translation_moves_only_the_cell(self):
        """Deck translations keep offsets bit-identical"""
        p = DeckPoint.from_real([0.3, 0.6])
        q = p.translate([2, -1])
        assert np.array_equal(q.offset, p.offset)
        assert q.cell.tolist() == [[2, -1]]

    def test_repeat_and_index(self):
        """repeat copies the first point; indexing keeps 2-D arrays"""
        batch = DeckPoint.from_real([0.2]).repeat(4)
        assert len(batch) == 4
        assert batch[2].cell.shape == (1, 1)
        assert batch.same_as(DeckPoint.from_real([[0.2]] * 4))

    def test_step_without_noise_or_drift(self):
        """A flat model with zero noise stays put"""
        p = DeckPoint.from_real([0.4, 0.9])
        q = step(DriftModel(2), p, noise=np.zeros((1, 2)))
        assert q.same_as(p)


@pytest.mark.unit
class TestSitesAndRegions:
    """Site lattices and region geometry"""

    def test_nearest_site_on_spaced_lattice(self):
        """3.1 on 2Z is closest to site index 2 with displacement −0.9"""
        lattice = SiteLattice.build(1, spacing=2)
        p = DeckPoint.from_real([3.1])
        site, local = lattice.nearest(p.cell, p.offset)
        assert site.tolist() == [[2]]
        assert local[0, 0] == pytest.approx(-0.9)
        assert np.allclose(lattice.point_at(site, local).real(), [[3.1]])

    def test_region_validation(self):
        """Unknown kinds, empty radii and bad profiles are region errors"""
        lattice = SiteLattice.build(2)
        with pytest.raises(RegionError):
            RegionSpec("cube", lattice, 0.2)
        with pytest.raises(RegionError):
            RegionSpec("ball", lattice, 0.0)
        with pytest.raises(RegionError):
            RegionSpec("radial-profile", SiteLattice.build(3), 0.2, profile=(0.1,))
        with pytest.raises(RegionError):
            SiteLattice.build(2, spacing=0)

    def test_radial_profile_interpolation(self):
        """Radii interpolate linearly between profile angles"""
        region = RegionSpec("radial-profile", SiteLattice.build(2), 0.4, profile=(0.2, 0.4))
        radii = region.radius_toward(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert radii == pytest.approx([0.2, 0.3])
        assert region.max_radius == 0.4
        assert not region.is_ball

    def test_orbit_balls_contain_translates(self):
        """Orbit balls contain points near every site"""
        region = RegionSpec("orbit-balls", SiteLattice.build(2), 0.2)
        inside = region.contains(DeckPoint.from_real([[3.05, -2.1], [0.5, 0.5]]))
        assert inside.tolist() == [True, False]

    def test_site_packing_is_injective(self):
        """Packed site ids differ for different sites"""
        ids = site_index(np.array([[0, 0], [1, 0], [0, 1], [-1, 0]]))
        assert len(set(ids.tolist())) == 4
        assert ids[0] == (1 << 20) + ((1 << 20) << 21)

# ============================================================================
# BOUNDARY BINS
# ============================================================================


@pytest.mark.unit
class TestBoundaryBinning:
    """Sphere partitions and Poisson-kernel probabilities"""

    def test_poisson_kernel_at_center(self):
        """The exit density from the center is uniform"""
        z = np.array([[0.0, 0.5], [0.5, 0.0]])
        assert poisson_kernel(np.zeros((1, 2)), z, 0.5) == pytest.approx([1.0, 1.0])

    def test_line_probabilities(self):
        """Gambler's ruin on the interval"""
        binning = BoundaryBinning(1)
        assert binning.probabilities([[0.1]], 0.3)[0] == pytest.approx([1 / 3, 2 / 3])

    def test_plane_probabilities_sum_to_one(self):
        """Quadrature of the Poisson kernel is a probability vector"""
        binning = BoundaryBinning(2, 16)
        probs = binning.probabilities([[0.0, 0.0], [0.1, -0.05]], 0.3)
        assert probs.sum(axis=1) == pytest.approx([1.0, 1.0], abs=1e-6)
        assert probs[0] == pytest.approx(binning.weights, abs=1e-10)

    def test_icosahedral_bins(self):
        """Requests round up to the next icosahedral count"""
        binning = BoundaryBinning(3, 40)
        assert binning.n_bins == 42
        assert binning.weights.sum() == pytest.approx(1.0)
        assert np.array_equal(binning.bin_of(binning.reps), np.arange(42))

# ============================================================================
# STOPPING TIMES AND ESTIMATORS
# ============================================================================


@pytest.mark.statistical
class TestStoppingTimes:
    """Hitting and exit times of Brownian motion on the line"""

    def test_hit_time_mean_and_snap(self, line_regions):
        """From 0.5 the walk hits 0.1 or 0.9 after (0.4)² on average, snapped to ∂F"""
        F, _ = line_regions
        start = DeckPoint.from_real([0.5]).repeat(800)
        res = hit_time(DriftModel(1, (), 1e-4), start, F, CounterStreams(1).generator(Purpose.PATHS))
        assert not res.timed_out.any()
        assert np.abs(res.local[:, 0]) == pytest.approx(np.full(800, 0.1))
        assert set(res.site[:, 0].tolist()) <= {0, 1}
        se = res.time.std(ddof=1) / math.sqrt(800)
        assert abs(res.time.mean() - 0.16) < 4 * se + 0.01

    def test_start_inside_stops_at_once(self, brownian_line, line_regions):
        """Starts in F stop at t0"""
        F, _ = line_regions
        res = hit_time(brownian_line, DeckPoint.from_real([2.05]), F, CounterStreams(1).generator(1), t0=1.5)
        assert res.time[0] == 1.5
        assert res.site[0, 0] == 2

    def test_timeout_without_extension(self, brownian_line, line_regions):
        """With a tiny horizon and no extension every path times out"""
        F, _ = line_regions
        res = hit_time(brownian_line, DeckPoint.from_real([0.5]).repeat(10), F,
                       CounterStreams(1).generator(1), t_max=5 * COARSE_DT, extend=False)
        assert res.timed_out.all()

    def test_exit_measure_on_interval(self):
        """From 0.1 in (−0.3, 0.3) the right end is hit with probability 2/3"""
        model = DriftModel(1, (), 1e-4)
        V = RegionSpec("ball", SiteLattice.build(1), 0.3)
        est = exit_measure_estimate(model, V, [0.1], 2000, BoundaryBinning(1), CounterStreams(4))
        assert est.total == pytest.approx(1.0)
        assert abs(est.probabilities[1] - 2 / 3) < 4 * est.se[1] + 0.01
        assert est.timeout_mass == 0.0

    def test_exit_measure_needs_interior_start(self, brownian_line):
        """Starts outside V are rejected"""
        V = RegionSpec("ball", SiteLattice.build(1), 0.3)
        with pytest.raises(RegionError):
            exit_measure_estimate(brownian_line, V, [0.5], 10, BoundaryBinning(1), CounterStreams(4))


@pytest.mark.unit
class TestEstimatorHelpers:
    """Path allocation, lifts and preconditions"""

    def test_systematic_allocation(self):
        """Weights 1:3 over eight paths give two and six starts"""
        a, b = DeckPoint.from_real([0.0]), DeckPoint.from_real([5.0])
        starts, weight = allocate_paths([(a, 1.0), (b, 3.0)], 8, np.random.default_rng(0))
        assert weight == pytest.approx(0.5)
        assert int((starts.cell[:, 0] == 0).sum()) == 2
        assert int((starts.cell[:, 0] == 5).sum()) == 6
        with pytest.raises(ValueError):
            allocate_paths([(a, 0.0)], 8, np.random.default_rng(0))

    def test_sojourn_preconditions(self):
        """Sojourn estimates need d = 3 and a start outside the probe ball"""
        streams = CounterStreams(0)
        with pytest.raises(PreconditionError):
            sojourn_green_estimate(DriftModel(2), [0, 0], [1, 1], 0.1, 10, streams)
        with pytest.raises(PreconditionError):
            sojourn_green_estimate(DriftModel(3), [0, 0, 0], [0.05, 0, 0], 0.1, 10, streams)

    def test_lift_projects_to_torus_path(self):
        """The lift is the cumulative sum and projects onto the torus path"""
        inc = np.random.default_rng(2).normal(scale=0.4, size=(30, 2))
        start = DeckPoint.from_real([0.25, 0.75])
        lifted = lift_path(inc, start)
        assert np.allclose(lifted.real()[-1], start.real()[0] + inc.sum(axis=0))
        assert np.allclose(lifted.project(), torus_path(inc, start.offset[0]))

    def test_energy_test_detects_shift(self):
        """Well-separated samples give the smallest attainable p-value"""
        rng = np.random.default_rng(5)
        a = rng.uniform(0.0, 0.2, size=(60, 1))
        b = rng.uniform(0.5, 0.7, size=(60, 1))
        _, p = energy_permutation_test(a, b, rng, n_perm=49)
        assert p == pytest.approx(1 / 50)


@pytest.mark.statistical
class TestProjectionLaw:
    """Cover paths project to torus paths"""

    def test_cover_and_torus_marginals_agree(self):
        """Bonferroni-adjusted p-value stays away from zero under the null"""
        model = DriftModel(1, (((1,), 0.6),), COARSE_DT)
        report = projection_law_check(model, [0.3], 0.05, 400, CounterStreams(8, block_size=200),
                                      n_energy=120, n_perm=49)
        assert report.n_tests == 2
        assert report.adjusted_p > 1e-3
        assert 0.0 <= report.coarse_tv <= 1.0

# ============================================================================
# LS PATH ENSEMBLES
# ============================================================================


@pytest.mark.statistical
class TestLSPaths:
    """Alternating F-entries and V-exits"""

    def test_always_accept_stops_after_first_entry(self, brownian_line, line_regions, tmp_path):
        """κ ≡ 1 accepts the first entry of every path"""
        F, V = line_regions
        ens = simulate_ls_paths(brownian_line, F, V, DeckPoint.from_real([0.0]), 120, CounterStreams(6, 64),
                                kappa_fn=lambda sites, y, z: np.ones(len(sites)))
        sites, ok = ens.first_accepted()
        assert ok.all()
        assert len(ens.entries) == 120
        assert np.array_equal(sites, ens.entries.site)
        assert np.all(ens.start_exit_time > 0)
        assert np.abs(ens.entries.enter_local[:, 0]) == pytest.approx(np.full(120, 0.1))
        assert np.abs(ens.entries.exit_local[:, 0]) == pytest.approx(np.full(120, 0.3))

        out = tmp_path / "events.bin"
        ens.write_events(out)
        events = read_events(out, 1)
        first_path = events[events["path"] == 0]
        assert first_path["tag"].tolist() == [EVENT_TAGS[t] for t in ("start", "exit", "enter", "exit", "accept")]
        assert np.all(np.diff(first_path["time"]) >= 0)

    def test_without_kappa_paths_exhaust_their_entries(self, brownian_line, line_regions):
        """With no acceptance each path records max_entries ordered entries"""
        F, V = line_regions
        ens = simulate_ls_paths(brownian_line, F, V, DeckPoint.from_real([0.5]), 60, CounterStreams(6, 64),
                                max_entries=3)
        assert ens.exhausted.all()
        assert not ens.first_accepted()[1].any()
        assert len(ens.entries) == 180
        assert np.all(ens.start_exit_time == 0)
        assert np.all(ens.entries.enter_time <= ens.entries.exit_time)
        per_site = sum(ens.entry_counts(s) for s in np.unique(ens.entries.site, axis=0))
        assert per_site.tolist() == [3] * 60

    def test_replay_is_bit_identical(self, brownian_line, line_regions):
        """The same seed gives the same ensemble for any worker count"""
        F, V = line_regions
        args = (brownian_line, F, V, DeckPoint.from_real([0.0]), 40)
        a = simulate_ls_paths(*args, CounterStreams(3, 16), max_entries=2, workers=1)
        b = simulate_ls_paths(*args, CounterStreams(3, 16), max_entries=2, workers=3)
        assert np.array_equal(a.entries.exit_time, b.entries.exit_time)
        assert np.array_equal(a.entries.site, b.entries.site)
