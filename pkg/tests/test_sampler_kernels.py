import numpy as np
import pytest
from scipy import stats as sps
from scipy.special import expit

from mslunmix.sampler import (
    AbundanceTarget,
    checkerboard,
    hamiltonian,
    label_log_lik_ratio,
    leapfrog,
    parallel_rows,
    parity3,
    sample_categorical,
    update_abundances,
    update_abundances_prior,
    update_anomaly_values,
    update_depths,
    update_gamma_aux,
    update_labels,
)
from mslunmix.core import ImpulseResponseSet
from mslunmix.rng import stream

import oracles

IRF7 = ImpulseResponseSet([(-3, [0.2, 0.5, 0.9, 1.0, 0.9, 0.5, 0.2])])
BINS8 = np.arange(5, 13)  # T' = 8 candidate depths inside T = 16 time bins


def pixel_log_lik_table(seed, lam=0.8):
    """Brute-force depth log-likelihood of one pixel with known spectrum."""
    rng = np.random.default_rng(seed)
    y = rng.poisson(lam * IRF7.value(0, np.arange(1, 17) - rng.integers(5, 13)))[None, :]
    return np.array([oracles.dense_pixel_log_lik(y, IRF7.value, [lam], t0) for t0 in BINS8])


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def toy_target(n=1, L=3, R=2, seed=0):
    rng = np.random.default_rng(seed)
    return AbundanceTarget(
        y_tilde=rng.poisson(3.0, (n, L)).astype(float),
        g_tilde=rng.random((n, L)) + 1.0,
        r=np.zeros((n, L)),
        abar=rng.random((n, R)) + 0.3,
        c=np.full(R, 2.5),
        m=rng.random((L, R)) + 0.1,
    )


class TestCategorical:
    def test_inverse_cdf(self):
        log_w = np.log(np.array([[0.2, 0.3, 0.5]] * 4))
        idx, p = sample_categorical(log_w, np.array([0.0, 0.19, 0.2, 0.999]))
        assert idx.tolist() == [0, 0, 1, 2]
        np.testing.assert_allclose(p[0], [0.2, 0.3, 0.5])

    def test_handles_minus_infinity(self):
        idx, p = sample_categorical(np.array([[-np.inf, 0.0, -np.inf]]), np.array([0.7]))
        assert idx[0] == 1 and p[0, 1] == 1.0


class TestMasks:
    def test_checkerboard_colours_partition_and_are_independent(self):
        a, b = checkerboard((5, 4), 0), checkerboard((5, 4), 1)
        assert np.all(a ^ b)
        assert not np.any(a[1:] & a[:-1]) and not np.any(a[:, 1:] & a[:, :-1])

    def test_parity3_has_no_edges_within_a_colour(self):
        a = parity3((3, 4, 5), 0)
        assert not np.any(a[1:] & a[:-1]) and not np.any(a[:, :, 1:] & a[:, :, :-1])

    def test_masks_are_read_only(self):
        with pytest.raises(ValueError):
            checkerboard((2, 2), 0)[0, 0] = False


class TestParallelRows:
    def test_chunking_does_not_change_results(self):
        x = np.arange(37.0)
        one = parallel_rows(lambda sl: (x[sl] * 2,), 37, 1)
        many = parallel_rows(lambda sl: (x[sl] * 2,), 37, 8)
        np.testing.assert_array_equal(one[0], many[0])


class TestDepthKernel:
    def test_point_mass_conditional(self):
        ll = np.full((2, 3, 5), -np.inf)
        ll[..., 2] = 0.0
        t, pmf = update_depths(np.full((2, 3), 10), ll, np.arange(10, 15), 0.7, True, 0, 1)
        assert np.all(t == 12)
        np.testing.assert_array_equal(pmf[..., 2], 1.0)

    def test_all_minus_infinity_raises(self):
        ll = np.zeros((1, 2, 3))
        ll[0, 1] = -np.inf
        with pytest.raises(ValueError, match=r"pixel \(0, 1\)"):
            update_depths(np.ones((1, 2), dtype=int), ll, np.arange(1, 4), 0.0, False, 0, 1)

    def test_prior_only_without_tv_is_uniform(self):
        t, pmf = update_depths(np.ones((20, 20), dtype=int), None, np.arange(1, 5), 1.0, False, 3, 1)
        np.testing.assert_allclose(pmf, 0.25)
        assert set(np.unique(t)) <= {1, 2, 3, 4}

    def test_same_seed_same_draws(self):
        ll = np.random.default_rng(1).normal(size=(4, 4, 6))
        a = update_depths(np.ones((4, 4), dtype=int), ll, np.arange(1, 7), 0.5, True, 9, 4)
        b = update_depths(np.ones((4, 4), dtype=int), ll, np.arange(1, 7), 0.5, True, 9, 4, workers=3)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestDepthStationarity:
    def test_one_pixel_known_spectrum(self):
        table = pixel_log_lik_table(5)
        n = 2000  # independent copies of the pixel, 50 exact draws each
        tables = np.broadcast_to(table, (1, n, table.size))
        t = np.full((1, n), BINS8[0])
        counts = np.zeros(table.size)
        for u in range(1, 51):
            t, _ = update_depths(t, tables, BINS8, 0.0, False, 7, u)
            counts += np.bincount(t[0] - BINS8[0], minlength=table.size)
        exact = np.exp(table - table.max())
        assert total_variation(counts / counts.sum(), exact / exact.sum()) < 0.01

    @pytest.mark.slow
    def test_two_pixels_with_tv_at_unit_weight(self):
        table = np.stack([pixel_log_lik_table(6), pixel_log_lik_table(8)])[None]
        t = np.full((1, 2), BINS8[0])
        counts = np.zeros((BINS8.size, BINS8.size))
        n_draws = 100_000
        for u in range(1, n_draws + 1):
            t, _ = update_depths(t, table, BINS8, 1.0, True, 8, u)
            counts[t[0, 0] - BINS8[0], t[0, 1] - BINS8[0]] += 1
        joint = oracles.two_site_tv_joint(table[0, 0], table[0, 1], BINS8, 1.0)
        assert total_variation(counts / n_draws, joint) < 0.02


class TestLabelKernel:
    def test_isolated_fair_site_with_no_counts(self):
        x, g = 0.4, 2.5
        ratio = label_log_lik_ratio(np.array([0.0]), np.array([0.3]), np.array([x]), np.array([g]))
        assert expit(ratio[0]) == pytest.approx(expit(-x * g))

    def test_zero_base_with_counts_forces_anomaly(self):
        ratio = label_log_lik_ratio(np.array([2.0]), np.array([0.0]), np.array([0.1]), np.array([1.0]))
        assert ratio[0] == np.inf
        z = update_labels(np.zeros((1, 1, 1), dtype=np.int8), ratio.reshape(1, 1, 1), 0.1, 0.1, 0.9, 0, 1)
        assert z[0, 0, 0] == 1

    def test_three_band_site_marginals(self):
        llr = np.array([[[0.8, -1.2, 0.1]]])
        beta_l, beta_0 = 0.6, 0.4
        configs, probs = oracles.label_joint_enumeration(llr, 0.0, beta_l, beta_0, (1, 1, 3))
        exact = (configs[:, 0, 0, :] * probs[:, None]).sum(axis=0)
        # one site has no spatial neighbours, so copies stacked along rows with
        # no spatial coupling are independent chains of the same target
        n = 2000
        z = np.zeros((n, 1, 3), dtype=np.int8)
        ones = np.zeros(3)
        for u in range(1, 101):
            z = update_labels(z, np.broadcast_to(llr, (n, 1, 3)), 0.0, beta_l, beta_0, 9, u)
            if u > 50:
                ones += z[:, 0, :].sum(axis=0)
        empirical = ones / (50 * n)
        for band in range(3):
            assert total_variation([empirical[band], 1 - empirical[band]], [exact[band], 1 - exact[band]]) < 0.02

    def test_strong_evidence_sets_labels(self):
        z = update_labels(np.zeros((3, 3, 2), dtype=np.int8), np.full((3, 3, 2), 50.0), 0.1, 0.1, 0.9, 0, 1)
        assert np.all(z == 1)
        z = update_labels(z, np.full((3, 3, 2), -50.0), 0.1, 0.1, 0.9, 0, 2)
        assert np.all(z == 0)


class TestAbundanceKernel:
    def test_zero_leapfrog_steps_is_identity(self):
        tgt = toy_target(n=5)
        a = np.full((5, 2), 0.7)
        a1, acc = update_abundances(a, tgt, np.full(5, np.log(0.1)), 0, 0, 1)
        np.testing.assert_array_equal(a1, a)
        np.testing.assert_array_equal(acc, 1.0)

    def test_energy_conservation_at_small_step(self):
        rng = np.random.default_rng(2)
        for seed in range(20):
            tgt = toy_target(seed=seed)
            a = rng.random((1, 2)) + 0.3
            p = rng.standard_normal((1, 2))
            a1, p1 = leapfrog(tgt, a, p, np.array([[1e-4]]), 10)
            assert abs(hamiltonian(tgt, a1, p1)[0] - hamiltonian(tgt, a, p)[0]) < 1e-6

    def test_reflection_keeps_abundances_nonnegative(self):
        tgt = toy_target(n=200)
        a = np.full((200, 2), 0.01)
        p = -np.abs(np.random.default_rng(3).standard_normal((200, 2))) * 5
        a1, _ = leapfrog(tgt, a, p, np.full((200, 1), 0.05), 10)
        assert np.all(a1 >= 0)

    def test_gradient_matches_potential(self):
        tgt = toy_target(seed=4)
        a = np.array([[0.6, 0.9]])
        h = 1e-6
        fd = [(tgt.potential(a + h * e)[0] - tgt.potential(a - h * e)[0]) / (2 * h) for e in np.eye(2)[:, None, :]]
        np.testing.assert_allclose(tgt.grad_potential(a)[0], fd, rtol=1e-6)

    def test_rows_are_independent_of_chunking(self):
        tgt = toy_target(n=40)
        a = np.full((40, 2), 0.5)
        ls = np.full(40, np.log(0.05))
        one = update_abundances(a, tgt, ls, 10, 5, 3, workers=1)
        many = update_abundances(a, tgt, ls, 10, 5, 3, workers=8)
        np.testing.assert_array_equal(one[0], many[0])
        np.testing.assert_array_equal(one[1], many[1])


class TestAnomalyKernel:
    def test_inactive_sites_always_accept(self):
        x = np.full((50, 3), 0.2)
        y = np.random.default_rng(5).poisson(2.0, (50, 3)).astype(float)
        x1, acc = update_anomaly_values(x, np.zeros((50, 3)), y, np.ones((50, 3)), np.ones((50, 3)), 1.0, 0.05, 0, 1)
        np.testing.assert_array_equal(acc, 1.0)
        assert np.all(x1 != x)

    def test_acceptance_ratio_without_counts(self):
        x = np.full((20, 2), 0.1)
        g = np.full((20, 2), 3.0)
        _, acc = update_anomaly_values(x, np.ones((20, 2)), np.zeros((20, 2)), np.full((20, 2), 0.5), g, 1.0, 0.05, 7, 2)
        prop = stream(7, 2, "anomaly").gamma(1.0, 0.05, size=x.shape)
        np.testing.assert_allclose(acc, np.minimum(1.0, np.exp(-(prop - x) * g)))


class TestAuxiliaries:
    def test_inverse_gamma_mean_and_reciprocal(self):
        a = np.ones((318, 318, 1))
        gamma = update_gamma_aux(a, np.array([2.0]), 0, 1)[0, 1:-1, 1:-1].ravel()
        assert gamma.size >= 1e5
        assert gamma.mean() == pytest.approx(2.0, rel=0.02)
        assert sps.kstest(1.0 / gamma, sps.gamma(2.0, scale=1.0 / 2.0).cdf).pvalue > 0.001

    def test_prior_abundance_draws_are_gamma(self):
        gamma = np.full((1, 301, 301), 0.8)
        a = update_abundances_prior(gamma, np.array([3.0]), 0, 1)[..., 0].ravel()
        assert sps.kstest(a, sps.gamma(3.0, scale=0.8 / 3.0).cdf).pvalue > 0.001


class TestAnomalyConditional:
    def test_gradient_matches_finite_difference(self):
        from mslunmix.sampler import anomaly_log_conditional, grad_anomaly_log_conditional

        x = np.array([0.3, 1.2])
        args = (np.array([2.0, 0.0]), np.array([0.4, 0.1]), np.array([1.5, 2.0]), 2.0, 0.5)
        h = 1e-6
        fd = (anomaly_log_conditional(x + h, *args) - anomaly_log_conditional(x - h, *args)) / (2 * h)
        np.testing.assert_allclose(grad_anomaly_log_conditional(x, *args), fd, rtol=1e-6)
