import numpy as np
import pytest

from mslunmix.chain import SamplerConfig
from mslunmix.core import DepthSupport, GaussianIrf, GridDims, HyperParams, ImpulseResponseSet, PhotonCube
from mslunmix.likelihood import build_suff_stats, log_lik_field
from mslunmix.pfa import (
    check_reduction_validity,
    integrate_cube,
    log_lik_difference_gap,
    pfa_unmix,
    reduced_log_lik,
    reduced_stats,
)

IRF = ImpulseResponseSet.from_gaussian([GaussianIrf(1.0, 0.0, 2.0), GaussianIrf(0.8, 0.0, 2.5, delay=1)])


def model_cube(t, seed=0, rate=0.6):
    """Photons drawn from the forward model at depths ``t``."""
    rng = np.random.default_rng(seed)
    bins = np.arange(1, 81)
    dense = np.zeros(t.shape + (2, 80), dtype=int)
    for (i, j), t0 in np.ndenumerate(t):
        for b in range(2):
            dense[i, j, b] = rng.poisson(rate * IRF.value(b, bins - t0))
    return PhotonCube.from_dense(dense)


def cube_and_stats(support=DepthSupport(20, 60), seed=0, shape=(3, 4)):
    t = np.random.default_rng(seed).integers(25, 56, shape)
    cube = model_cube(t, seed)
    return cube, build_suff_stats(cube, IRF, support), t


class TestIntegrate:
    def test_single_count(self):
        dense = np.zeros((1, 1, 2, 10), dtype=int)
        dense[0, 0, 1, 7] = 1
        red = integrate_cube(PhotonCube.from_dense(dense))
        np.testing.assert_array_equal(red.y, [[0], [1]])

    def test_empty_cube(self):
        red = integrate_cube(PhotonCube.empty(GridDims(2, 3, 4, 5)))
        assert red.y.shape == (4, 6) and not red.y.any()
        assert red.is_valid is None

    def test_column_sums_are_the_total_photon_image(self):
        cube, stats, _ = cube_and_stats()
        red = integrate_cube(cube, stats)
        np.testing.assert_array_equal(red.total_image(), cube.to_dense().sum(axis=(2, 3)))
        assert red.is_valid
        np.testing.assert_allclose(red.scaled_endmembers(np.ones((2, 3))), np.repeat(stats.g_tilde[0, :, :1], 3, axis=1))


class TestValidity:
    def test_interior_response_is_valid(self):
        _, stats, _ = cube_and_stats()
        valid, var = check_reduction_validity(stats)
        assert valid and var <= 1e-9

    def test_support_at_the_edge_is_invalid(self):
        _, stats, _ = cube_and_stats(DepthSupport(1, 60))
        valid, var = check_reduction_validity(stats)
        assert not valid

    def test_variation_matches_direct_recomputation(self):
        _, stats, _ = cube_and_stats(DepthSupport(1, 78))
        direct = 0.0
        for b in range(2):
            g = np.array([IRF.value(b, np.arange(1, 81) - t0).sum() for t0 in range(1, 79)])
            direct = max(direct, (g.max() - g.min()) / g.max())
        assert check_reduction_validity(stats)[1] == pytest.approx(direct, rel=1e-12)


class TestSufficiency:
    @pytest.mark.parametrize("seed", range(5))
    def test_difference_identity(self, seed):
        _, stats, t = cube_and_stats(seed=seed)
        rng = np.random.default_rng(100 + seed)
        gap = log_lik_difference_gap(stats, t, rng.random((3, 4, 2)) + 0.1, rng.random((3, 4, 2)) + 0.1)
        assert abs(gap) < 1e-9

    def test_full_minus_reduced_is_lambda_free(self):
        _, stats, t = cube_and_stats(seed=9)
        rng = np.random.default_rng(1)
        g = stats.g_tilde_at(t)
        offsets = []
        for _ in range(2):
            lam = rng.random((3, 4, 2)) + 0.05
            offsets.append(log_lik_field(stats, lam, t).sum() - reduced_log_lik(stats.y_tilde, g, lam))
        assert offsets[0] == pytest.approx(offsets[1], abs=1e-9)

    def test_reduced_stats_have_one_bin(self):
        _, stats, _ = cube_and_stats()
        red = reduced_stats(stats)
        assert red.support.size == 1
        np.testing.assert_array_equal(red.g_tilde[..., 0], stats.g_tilde[..., 0])


class TestPfaUnmix:
    def test_refuses_invalid_reduction(self):
        _, stats, _ = cube_and_stats(DepthSupport(1, 60))
        with pytest.raises(ValueError, match="reduction invalid"):
            pfa_unmix(stats, np.ones((2, 1)), HyperParams(c=[2.0]), SamplerConfig(n_mc=3, n_bi=1))

    def test_force_runs_anyway(self):
        _, stats, _ = cube_and_stats(DepthSupport(1, 60))
        out = pfa_unmix(stats, np.ones((2, 1)), HyperParams(c=[2.0]), SamplerConfig(n_mc=3, n_bi=1), force=True)
        assert out.n_post == 2

    def test_no_data_shrinks_toward_prior(self):
        stats = build_suff_stats(PhotonCube.empty(GridDims(6, 6, 2, 80)), IRF, DepthSupport(20, 60))
        m = np.array([[0.5], [0.4]])
        cfg = SamplerConfig(n_mc=400, n_bi=100, adapt_theta=False, seed=2)
        out = pfa_unmix(stats, m, HyperParams(c=[2.0]), cfg)
        a_hat = out.sum_a / out.n_post
        # without photons the likelihood only pulls abundances down through -lam * gtil
        assert a_hat.mean() < 0.5
