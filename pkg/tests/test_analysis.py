import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import SphericalVoronoi
from scipy.spatial.transform import Rotation
from scipy.stats import vonmises_fisher

from comptonimager import physics, sphere
from comptonimager.analysis import (BackProjector, DegenerateSeparationError, RunSummary, SphereGrid,
                                    UndefinedMeanError, aligned_errors, back_project, box_stats, bp_modes,
                                    credible_coverage, credible_radius, deentangle, evaluate, spherical_mean,
                                    write_bp_csv)
from comptonimager.forward import events_to_array
from comptonimager.geometry import SphereModel
from comptonimager.simulate import SimConfig, SourceSpec, generate_events

E0 = 0.6617
SM = SphereModel(300.0)
ALPHAS = np.round(np.linspace(0.1, 0.9, 9), 10)


@pytest.fixture(scope="module")
def grid():
    return SphereGrid()


@pytest.fixture(scope="module")
def clean_events(array, table):
    cfg = SimConfig([SourceSpec.from_lonlat(0, 0)], 10, seed=0, add_noise=False)
    return generate_events(array, table, cfg)


def wcss(x1, x2):
    return np.sum((x1 - x1.mean(axis=0)) ** 2) + np.sum((x2 - x2.mean(axis=0)) ** 2)


@pytest.fixture(scope="module")
def cell_areas(grid):
    # nearest-pixel cells are the Voronoi cells of the lattice
    return SphericalVoronoi(grid.pixels).calculate_areas()


class TestSphereGrid:
    def test_bulk_cell_areas_within_two_percent(self, grid, cell_areas):
        assert cell_areas.sum() == pytest.approx(4 * np.pi, rel=1e-9)
        dev = np.abs(cell_areas / grid.pixel_area - 1)
        assert np.mean(dev <= 0.02) >= 0.995
        assert dev.max() <= 0.07

    @pytest.mark.xfail(strict=True, reason="a few polar Fibonacci cells deviate by up to 6%; see notes")
    def test_every_cell_area_within_two_percent(self, grid, cell_areas):
        np.testing.assert_allclose(cell_areas, grid.pixel_area, rtol=0.02)

    def test_nearest_pixel(self, grid):
        assert grid.nearest(grid.pixels[123] * 1.0001)[0] == 123


class TestBackProject:
    def test_single_event_ridge_passes_through_source(self, grid, clean_events):
        truth = sphere.lonlat_to_unit(0, 0)
        for ev in clean_events[:5]:
            img = back_project([ev], E0, SM, grid).image
            # one event's image is exp(-r^2/2s^2); a residual of two pixel spacings bounds it below
            assert img[grid.nearest(truth)[0]] >= np.exp(-0.5 * (2 * grid.spacing / 0.05) ** 2)
            assert img.max() > 0.99

    def test_clean_events_locate_source(self, grid, clean_events):
        img = back_project(clean_events, E0, SM, grid).image
        peak = bp_modes(img, 1, grid)[0]
        assert np.degrees(sphere.angle_between(peak, sphere.lonlat_to_unit(0, 0))) <= 3.0

    def test_zero_events(self, grid):
        bp = back_project(np.zeros((0, 8)), E0, SM, grid)
        assert np.all(bp.image == 0) and bp.n_skipped == 0

    def test_order_invariant_exactly(self, grid, array, table):
        evs = generate_events(array, table, SimConfig([SourceSpec.from_lonlat(40, 10)], 15, seed=9))
        X = events_to_array(evs)
        a = back_project(X, E0, SM, grid).image
        b = back_project(X[np.random.default_rng(1).permutation(15)], E0, SM, grid).image
        assert np.array_equal(a, b)

    def test_deposits_past_the_edge_are_skipped(self, grid, clean_events):
        X = events_to_array(clean_events)
        X[:3, 3] = float(physics.max_deposit(E0)) + 0.01
        bp = back_project(X, E0, SM, grid)
        assert bp.n_skipped == 3
        np.testing.assert_array_equal(bp.image, back_project(X[3:], E0, SM, grid).image)

    def test_csv_dump(self, grid, clean_events, tmp_path):
        bp = back_project(clean_events, E0, SM, grid)
        p = tmp_path / "bp.csv"
        write_bp_csv(p, bp)
        lines = p.read_text().splitlines()
        assert lines[0] == "pixel_index,ux,uy,uz,intensity"
        assert len(lines) == grid.n_pixels + 1
        assert float(lines[1].split(",")[4]) == bp.image[0]

    def test_transformer(self, clean_events):
        X = events_to_array(clean_events)
        bp = BackProjector(n_pixels=2562)
        img = bp.fit(X).transform(X)
        assert img.shape == (2562,) and bp.n_skipped_ == 0
        assert bp.modes(X, K=2).shape == (2, 3)


class TestBpModes:
    def test_single_peak(self, grid):
        img = np.exp(5 * (grid.pixels @ grid.pixels[77]))
        np.testing.assert_array_equal(bp_modes(img, 1, grid), grid.pixels[[77]])

    def test_two_antipodal_peaks(self, grid):
        p = grid.pixels[500]
        q = grid.nearest(-p)[0]
        img = np.exp(20 * (grid.pixels @ p)) + np.exp(20 * (grid.pixels @ grid.pixels[q]))
        modes = bp_modes(img, 2, grid)
        got = {int(grid.nearest(m)[0]) for m in modes}
        assert got == {500, int(q)}

    def test_single_maximum_falls_back_to_farthest_point(self, grid):
        img = np.exp(5 * (grid.pixels @ grid.pixels[77]))
        modes = bp_modes(img, 2, grid)
        sep = np.degrees(sphere.angle_between(modes[0], modes[1]))
        assert sep > 10.0
        assert sphere.angle_between(modes[0], grid.pixels[77]) == 0

    def test_needs_positive_k(self, grid):
        with pytest.raises(ValueError):
            bp_modes(grid.empty_image(), 0, grid)

    @pytest.mark.xfail(strict=True, reason="two-source BP at N = 20 resolves both sources in ~1/10 seeds; see notes")
    def test_two_source_modes_within_15_degrees(self, grid, array, table):
        truths = [sphere.lonlat_to_unit(0, 0), sphere.lonlat_to_unit(120, 0)]
        srcs = [SourceSpec.from_lonlat(0, 0, intensity=0.5), SourceSpec.from_lonlat(120, 0, intensity=0.5)]
        good = 0
        for seed in range(10):
            evs = generate_events(array, table, SimConfig(srcs, 20, seed=seed))
            modes = bp_modes(back_project(evs, E0, SM, grid).image, 2, grid)
            err = aligned_errors(modes, truths, 1.0)
            good += bool(np.all(np.degrees(err) <= 15.0))
        assert good >= 6


class TestSphericalMean:
    def test_identical_samples(self):
        u = sphere.lonlat_to_unit(33, -12)
        np.testing.assert_allclose(spherical_mean(np.tile(u, (5, 1)), SM), 300 * u)

    def test_bisector(self):
        a, b = sphere.lonlat_to_unit(-20, 0), sphere.lonlat_to_unit(20, 0)
        np.testing.assert_allclose(spherical_mean([a, b]), [1, 0, 0], atol=1e-15)

    def test_vmf_cloud(self):
        mu = sphere.lonlat_to_unit(70, 25)
        x = vonmises_fisher(mu, 100).rvs(8000, random_state=np.random.default_rng(4))
        assert np.degrees(sphere.angle_between(spherical_mean(x), mu)) < 0.5

    def test_zero_resultant(self):
        with pytest.raises(UndefinedMeanError):
            spherical_mean([[1, 0, 0], [-1, 0, 0]])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_rotation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        x = vonmises_fisher(sphere.sample_uniform_sphere(1, rng)[0], 5).rvs(30, random_state=rng)
        R = Rotation.random(random_state=rng).as_matrix()
        np.testing.assert_allclose(spherical_mean(x @ R.T), R @ spherical_mean(x), atol=1e-12)


class TestBoxStats:
    def test_constant(self):
        b = box_stats([4.2] * 7)
        assert b.q0 == b.q1 == b.median == b.q3 == b.q4 == 4.2

    def test_one_to_hundred(self):
        b = box_stats(np.arange(1, 101))
        assert (b.q1, b.q3, b.iqr, b.q0, b.q4) == (25.75, 75.25, 49.5, 1.0, 100.0)

    def test_outlier_capped(self):
        d = list(range(1, 21)) + [1000.0]
        b = box_stats(d)
        assert b.q4 == pytest.approx(b.q3 + 1.5 * b.iqr)

    def test_needs_four_values(self):
        with pytest.raises(ValueError):
            box_stats([1, 2, 3])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 1e4), min_size=4, max_size=60), st.randoms(use_true_random=False))
    def test_ordered_and_permutation_invariant(self, d, rnd):
        b = box_stats(d)
        assert b.q0 <= b.q1 <= b.median <= b.q3 <= b.q4
        shuffled = list(d)
        rnd.shuffle(shuffled)
        assert box_stats(shuffled) == b

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=4, max_size=40))
    def test_quartiles_follow_monotone_maps(self, d):
        # an affine increasing map commutes exactly with interpolated quantiles
        b, t = box_stats(d), box_stats(3 * np.asarray(d) + 7)
        np.testing.assert_allclose([t.q1, t.median, t.q3], [3 * b.q1 + 7, 3 * b.median + 7, 3 * b.q3 + 7],
                                   rtol=1e-12, atol=1e-9)
        # a nonlinear increasing map still keeps the order of the summaries
        s = box_stats(np.exp(np.asarray(d) / 50))
        assert s.q1 <= s.median <= s.q3


def calibrated_repeats(n_repeats, kappa, n_samples, rng):
    """Truth from a uniform prior, a vMF observation around it, and exact posterior draws."""
    truths, chains = [], []
    for _ in range(n_repeats):
        theta = sphere.sample_uniform_sphere(1, rng)[0]
        y = vonmises_fisher(theta, kappa).rvs(1, random_state=rng)[0]
        chains.append(vonmises_fisher(y, kappa).rvs(n_samples, random_state=rng))
        truths.append(theta)
    return chains, np.array(truths)


class TestCredibleCoverage:
    def test_extreme_levels(self, rng):
        chains, truths = calibrated_repeats(12, 50, 200, rng)
        assert credible_coverage(chains, truths, [0.0, 1.0]).tolist() == [1.0, 0.0]

    def test_calibrated_oracle(self, rng):
        chains, truths = calibrated_repeats(100, 80, 2000, rng)
        cov = credible_coverage(chains, truths, ALPHAS)
        nominal = 1 - ALPHAS
        assert np.all(np.abs(cov - nominal) <= 3 * np.sqrt(nominal * (1 - nominal) / 100))

    def test_monotone_in_alpha(self, rng):
        chains, truths = calibrated_repeats(30, 20, 300, rng)
        cov = credible_coverage(chains, truths, np.linspace(0, 1, 21))
        assert np.all(np.diff(cov) <= 0)

    def test_needs_ten_repeats(self, rng):
        chains, truths = calibrated_repeats(9, 20, 50, rng)
        with pytest.raises(ValueError):
            credible_coverage(chains, truths, ALPHAS)

    def test_radius(self, rng):
        x = vonmises_fisher([0, 0, 1], 100).rvs(4000, random_state=rng)
        assert credible_radius(x, 0.0) == np.pi and credible_radius(x, 1.0) == -1.0
        # vMF polar angle: P(theta <= r) = (1 - exp(-k(1 - cos r))) / (1 - exp(-2k))
        r = credible_radius(x, 0.5)
        assert 1 - np.exp(-100 * (1 - np.cos(r))) == pytest.approx(0.5, abs=0.03)


class TestDeentangle:
    def test_separated_chains_kept(self, rng):
        a = vonmises_fisher(sphere.lonlat_to_unit(0, 0), 200).rvs(300, random_state=rng)
        b = vonmises_fisher(sphere.lonlat_to_unit(120, 0), 200).rvs(300, random_state=rng)
        x1, x2 = deentangle(a, b)
        assert (np.array_equal(x1, a) and np.array_equal(x2, b)) or (np.array_equal(x1, b) and np.array_equal(x2, a))

    def test_swapped_halves_recovered(self, rng):
        m1, m2 = sphere.lonlat_to_unit(0, 0), sphere.lonlat_to_unit(120, 0)
        a = vonmises_fisher(m1, 200).rvs(400, random_state=rng)
        b = vonmises_fisher(m2, 200).rvs(400, random_state=rng)
        c1 = np.concatenate([a[:200], b[200:]])
        c2 = np.concatenate([b[:200], a[200:]])
        x1, x2 = deentangle(c1, c2)
        means = np.array([spherical_mean(x1), spherical_mean(x2)])
        err = aligned_errors(means, [m1, m2], 1.0)
        assert np.all(np.degrees(err) < 1.0)
        assert {frozenset(map(tuple, x1)), frozenset(map(tuple, x2))} == {frozenset(map(tuple, a)),
                                                                          frozenset(map(tuple, b))}

    def test_identical_chains(self):
        u = np.tile(sphere.lonlat_to_unit(10, 10), (20, 1))
        with pytest.raises(DegenerateSeparationError):
            deentangle(u, u)

    def test_unequal_lengths(self):
        with pytest.raises(ValueError):
            deentangle(np.eye(3), np.eye(3)[:2])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1, 200))
    def test_within_cluster_spread_never_grows(self, seed, kappa):
        rng = np.random.default_rng(seed)
        a = vonmises_fisher(sphere.sample_uniform_sphere(1, rng)[0], kappa).rvs(50, random_state=rng)
        b = vonmises_fisher(sphere.sample_uniform_sphere(1, rng)[0], kappa).rvs(50, random_state=rng)
        x1, x2 = deentangle(a, b)
        assert wcss(x1, x2) <= wcss(a, b) + 1e-9
        assert x1.shape == a.shape and x2.shape == b.shape


class TestReports:
    def test_aligned_errors_ignore_labels(self):
        t = [sphere.lonlat_to_unit(0, 0), sphere.lonlat_to_unit(120, 0)]
        np.testing.assert_allclose(aligned_errors(t[::-1], t, 300.0), [0, 0], atol=1e-12)

    def test_aligned_errors_arc_length(self):
        e = aligned_errors([sphere.lonlat_to_unit(10, 0)], [sphere.lonlat_to_unit(0, 0)], 300.0)
        assert e[0] == pytest.approx(300 * np.radians(10))

    def test_aligned_errors_mismatch(self):
        with pytest.raises(ValueError, match="mismatched truth count"):
            aligned_errors(np.eye(3)[:2], np.eye(3), 300.0)

    def test_truth_at_mean_gives_zero(self):
        s = RunSummary(np.array([[0.0, 0.0, 1.0]]), 300.0, np.array([[0.0, 0.0, 1.0]]))
        rep = evaluate([s])
        assert rep["per_source"][0]["errors_mm"] == [0.0]

    def test_fifty_repeats(self, rng):
        truth = sphere.lonlat_to_unit(0, 0)
        sums = []
        for _ in range(50):
            m = vonmises_fisher(truth, 300).rvs(1, random_state=rng)
            sums.append(RunSummary(m, 300.0, truth[None], bp_modes=vonmises_fisher(truth, 30).rvs(1, random_state=rng)))
        rep = evaluate([json.loads(json.dumps(s.to_json())) for s in sums])
        entry = rep["per_source"][0]
        assert rep["n_runs"] == 50 and len(entry["errors_mm"]) == 50
        b = entry["box"]
        assert b["Q0"] <= b["Q1"] <= b["median"] <= b["Q3"] <= b["Q4"]
        assert entry["comparison"]["gibbs_median_mm"] < entry["comparison"]["bp_median_mm"]

    def test_coverage_in_report(self, rng):
        chains, truths = calibrated_repeats(12, 50, 200, rng)
        sums = [RunSummary(spherical_mean(c)[None], 1.0, t[None]) for c, t in zip(chains, truths)]
        rep = evaluate(sums, alphas=ALPHAS, chains=chains)
        assert rep["coverage"]["observed"] == credible_coverage(chains, truths, ALPHAS).tolist()

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate([])

    def test_mismatched_truth_count(self):
        with pytest.raises(ValueError, match="mismatched truth count"):
            evaluate([{"radius": 300.0, "means": [[1, 0, 0], [0, 1, 0]], "truths": [[1, 0, 0]]}])
