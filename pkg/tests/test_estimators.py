import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mslunmix.core import DepthSupport, GridDims, ImpulseResponseSet, PhotonCube
from mslunmix.estimators import (
    LOG_INTENSITY_FLOOR,
    EstimateBundle,
    anomaly_log_intensity,
    depth_histogram,
    fill_nearest,
    label_f1,
    ml_depth_baseline,
    mmap_depth_and_confidence,
    mmap_depth_rao_blackwell,
    mmap_labels,
    mmse_abundances,
    mmse_anomaly_values,
    mode_and_mass,
    plugin_depth,
    recall,
    rmse,
)
from mslunmix.likelihood import build_suff_stats
from mslunmix.sampler import AbundanceTarget, update_abundances, update_depths
from mslunmix.scene import SceneSpec, default_irf, make_endmember_library, make_scene, simulate_cube

DIMS = GridDims(1, 1, 1, 3000)


class TestAbundanceMmse:
    def test_mean(self):
        assert mmse_abundances([[0.2], [0.4], [0.6]])[0] == pytest.approx(0.4)

    def test_constant_chain(self):
        np.testing.assert_array_equal(mmse_abundances(np.full((7, 2, 3), 0.3)), np.full((2, 3), 0.3))

    def test_empty_chain(self):
        with pytest.raises(ValueError):
            mmse_abundances(np.zeros((0, 2)))

    def test_permutation_invariance(self):
        s = np.random.default_rng(0).random((50, 3, 2))
        np.testing.assert_allclose(mmse_abundances(s), mmse_abundances(s[::-1]))

    def test_one_pixel_posterior_mean(self):
        y = np.array([4.0, 1.0, 2.0])
        g = np.array([2.0, 1.5, 1.0])
        m = np.array([[0.9, 0.2], [0.3, 0.5], [0.4, 0.8]])
        abar, c = np.array([0.8, 0.5]), np.array([2.0, 3.0])
        n = 2000
        target = AbundanceTarget(np.tile(y, (n, 1)), np.tile(g, (n, 1)), np.zeros((n, 3)), np.tile(abar, (n, 1)), c, m)
        a = np.full((n, 2), 0.5)
        log_step = np.full(n, np.log(0.15))
        for u in range(1, 151):
            a, _ = update_abundances(a, target, log_step, 10, 11, u)
        logf = oracles.abundance_log_density_2d(y, g, m, np.zeros(3), abar, c)
        grid, cdf1, cdf2 = oracles.marginal_cdfs_2d(logf, 6.0, n=601)
        pdf1, pdf2 = np.diff(cdf1, prepend=0.0), np.diff(cdf2, prepend=0.0)
        mean = np.array([(grid * pdf1).sum(), (grid * pdf2).sum()])
        sd = np.sqrt(np.array([(grid**2 * pdf1).sum(), (grid**2 * pdf2).sum()]) - mean**2)
        est = mmse_abundances(a)
        assert np.all(np.abs(est - mean) < 3 * sd / np.sqrt(n))


class TestLabelMmap:
    def test_majority(self):
        z = np.array([[1, 0]] * 9 + [[0, 1]])
        assert mmap_labels(z).tolist() == [1, 0]

    def test_tie_goes_to_zero(self):
        assert mmap_labels(np.array([[1], [0]]))[0] == 0


class TestAnomalyValues:
    def test_masked_site(self):
        r = mmse_anomaly_values([[0.5], [0.7]], [[1], [1]], [0])
        assert r[0] == 0.0

    def test_conditional_mean(self):
        r = mmse_anomaly_values([[0.1], [0.9], [0.3]], [[1], [0], [1]], [1])
        assert r[0] == pytest.approx(0.2)

    def test_log_intensity_floor(self):
        out = anomaly_log_intensity(np.array([[0.0, 0.0], [0.2, 0.0]]))
        assert out[0] == LOG_INTENSITY_FLOOR
        assert out[1] == pytest.approx(np.log(0.02))


class TestDepthMmap:
    def test_mode_and_frequency(self):
        t, p = mmap_depth_and_confidence(np.array([5, 5, 5, 7]).reshape(4, 1))
        assert t[0] == 5 and p[0] == pytest.approx(0.75)

    def test_tie_goes_to_smallest_bin(self):
        t, p = mmap_depth_and_confidence(np.array([7, 5, 7, 5]).reshape(4, 1))
        assert t[0] == 5 and p[0] == 0.5

    def test_flat_posterior(self):
        bins = np.arange(301, 309)
        samples = np.tile(bins, 50).reshape(-1, 1)
        _, p = mmap_depth_and_confidence(samples, bins)
        assert p[0] == pytest.approx(1 / 8)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(10, 15), min_size=1, max_size=40))
    def test_histogram_normalises_and_mass_bounds(self, draws):
        bins = np.arange(10, 16)
        s = np.array(draws).reshape(-1, 1)
        hist = depth_histogram(s, bins)
        assert hist.sum() == len(draws)
        _, p = mmap_depth_and_confidence(s, bins)
        assert 1 / bins.size <= p[0] <= 1.0

    def test_sample_outside_support(self):
        with pytest.raises(ValueError):
            depth_histogram(np.array([[3]]), np.arange(4, 8))

    def test_modal_bin_matches_exact_marginal(self):
        rng = np.random.default_rng(2)
        y = rng.poisson(0.5, (1, 16))
        lags = np.arange(-16, 17)
        irf = ImpulseResponseSet([(-16, 0.05 + np.exp(-(lags**2) / 8.0))])
        support = np.arange(4, 12)
        exact = oracles.depth_posterior_pixel(y, irf.value, [0.9], support)
        stats = build_suff_stats(PhotonCube.from_dense(y.reshape(1, 1, 1, 16)), irf, DepthSupport(4, 11))
        n = 20000
        table = np.broadcast_to(stats.log_g_dot_y_sum - 0.9 * stats.g_tilde[0, 0], (1, n, 8))
        t, pmf = update_depths(np.full((1, n), 4), table, support, 0.0, False, 3, 1)
        t_hat, _ = mmap_depth_and_confidence(t.reshape(n, 1), support)
        assert t_hat[0] == support[np.argmax(exact)]
        rb, _ = mmap_depth_rao_blackwell(pmf.sum(axis=1), support)
        assert rb[0] == support[np.argmax(exact)]

    def test_mode_and_mass_clips(self):
        t, p = mode_and_mass(np.array([[0.0, 2.0, 2.0]]), np.array([1, 2, 3]))
        assert t[0] == 2 and p[0] == 0.5


class TestMlBaseline:
    def test_noise_free_matched_filter(self):
        kernel = np.array([0.2, 0.6, 1.0, 0.6, 0.2])
        irf = ImpulseResponseSet([(-2, kernel)])
        shift = 9
        y = np.zeros((1, 1, 1, 24), dtype=int)
        y[0, 0, 0, shift - 3 : shift + 2] = (10 * kernel).astype(int)
        stats = build_suff_stats(PhotonCube.from_dense(y), irf, DepthSupport(4, 20))
        assert ml_depth_baseline(stats, mode=0)[0, 0] == shift

    def test_empty_pixel_takes_nearest_neighbour(self):
        irf = ImpulseResponseSet([(0, [1.0])])
        y = np.zeros((3, 3, 1, 10), dtype=int)
        y[:, :, 0, 4] = 1
        y[1, 1] = 0
        y[0, 1, 0] = 0
        y[0, 1, 0, 6] = 2
        stats = build_suff_stats(PhotonCube.from_dense(y), irf, DepthSupport(1, 10))
        t = ml_depth_baseline(stats)
        assert t[1, 1] in (5, 7)
        assert t[0, 0] == 5 and t[0, 1] == 7

    def test_fill_nearest(self):
        v = np.array([[1, 0, 0, 4]])
        np.testing.assert_array_equal(fill_nearest(v, v > 0), [[1, 1, 4, 4]])

    def test_empty_image(self):
        stats = build_suff_stats(PhotonCube.empty(GridDims(2, 2, 1, 10)), ImpulseResponseSet([(0, [1.0])]), DepthSupport(1, 10))
        with pytest.raises(ValueError, match="no photons"):
            ml_depth_baseline(stats)

    def test_joint_mode_invariant_to_band_rescaling(self):
        rng = np.random.default_rng(4)
        y = rng.poisson(0.4, (4, 4, 2, 30))
        k1, k2 = rng.random(7) + 0.1, rng.random(7) + 0.1
        a = build_suff_stats(PhotonCube.from_dense(y), ImpulseResponseSet([(-3, k1), (-3, k2)]), DepthSupport(5, 25))
        b = build_suff_stats(PhotonCube.from_dense(y), ImpulseResponseSet([(-3, 3.0 * k1), (-3, 0.2 * k2)]), DepthSupport(5, 25))
        np.testing.assert_array_equal(ml_depth_baseline(a), ml_depth_baseline(b))

    def test_joint_beats_single_band_median(self):
        spec = SceneSpec(n_row=32, n_col=32)
        irf = default_irf(spec)
        scene = make_scene(spec, irf)
        sim = simulate_cube(scene, make_endmember_library(spec.n_band, spec.n_endmember), irf, budget=10.0, seed=21)
        stats = build_suff_stats(sim.cube, sim.irf, scene.support)
        joint = rmse(ml_depth_baseline(stats), scene.depth, scene.dims)
        single = [rmse(ml_depth_baseline(stats, mode=b), scene.depth, scene.dims) for b in range(spec.n_band)]
        assert joint < np.median(single)

    def test_plugin_depth_reaches_point_mass(self):
        irf = ImpulseResponseSet([(0, [1.0])])
        y = np.zeros((2, 2, 1, 10), dtype=int)
        y[:, :, 0, 5] = 3
        stats = build_suff_stats(PhotonCube.from_dense(y), irf, DepthSupport(2, 9))
        t = plugin_depth(stats, np.ones((2, 2, 1)), np.full((2, 2), 2), epsilon=0.5)
        assert np.all(t == 6)


class TestMetrics:
    def test_rmse_zero(self):
        assert rmse(np.ones((3, 3)), np.ones((3, 3)), DIMS) == 0.0

    def test_rmse_one_bin(self):
        assert rmse(np.full((4, 4), 11), np.full((4, 4), 10), DIMS) == pytest.approx(0.29979, abs=5e-6)

    def test_rmse_shape_mismatch(self):
        with pytest.raises(ValueError):
            rmse(np.zeros((2, 2)), np.zeros((2, 3)), DIMS)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=4, max_size=4), st.lists(st.integers(0, 50), min_size=4, max_size=4))
    def test_rmse_symmetry(self, a, b):
        a, b = np.array(a).reshape(2, 2), np.array(b).reshape(2, 2)
        assert rmse(a, b, DIMS) == rmse(b, a, DIMS)
        assert (rmse(a, b, DIMS) == 0) == np.array_equal(a, b)

    def test_f1_and_recall(self):
        ref = np.array([1, 1, 0, 0])
        assert label_f1(np.array([1, 0, 1, 0]), ref) == pytest.approx(0.5)
        assert label_f1(np.zeros(4), np.zeros(4)) == 1.0
        assert recall(np.array([1, 0, 0, 0]), ref) == 0.5


class TestBundle:
    def test_rejects_confidence_outside_unit_interval(self):
        with pytest.raises(ValueError):
            EstimateBundle(np.ones((1, 1)), np.ones((1, 1)), np.full((1, 1), 1.2), np.ones((1, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))

    def test_rejects_negative_abundance(self):
        with pytest.raises(ValueError):
            EstimateBundle(np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)), -np.ones((1, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
