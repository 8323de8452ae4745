import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from sgnn.oracle import (
    AttributionDistribution,
    DegenerateBandwidthError,
    ReferenceLibrary,
    discrete_posterior,
    discrete_posterior_weights,
    gaussian_kernel_weights,
    kernel_bayes_estimate,
    kernel_bayes_estimates,
    loocv_bandwidth,
    median_sq_bandwidth,
    sq_distances,
)
from sgnn.simcore import RngStream, SIR_PRIOR, compartmental_batch

finite = st.floats(-5, 5, allow_nan=False)


def _lib(M, p=3, k=2, seed=0, noiseless=True):
    rng = RngStream(seed, 0)
    th = rng.uniform((M, k))
    x = rng.normal((M, p))
    return ReferenceLibrary(th, x, x.copy() if noiseless else None)


class TestBandwidth:
    def test_single_pair(self):
        assert median_sq_bandwidth([[0.0, 0.0], [2.0, 0.0]]) == 4.0

    def test_three_collinear(self):
        assert median_sq_bandwidth([[0.0], [1.0], [2.0]]) == 1.0

    def test_plain_distance_variant(self):
        assert median_sq_bandwidth([[0.0], [1.0], [3.0]], squared=False) == 2.0

    @given(st.lists(st.tuples(finite, finite), min_size=2, max_size=12, unique=True))
    def test_duplicates_do_not_matter(self, pts):
        X = np.array(pts)
        if np.all(sq_distances(X, X) == 0):
            return
        d = median_sq_bandwidth(X)
        # duplicating every point adds zero pairs (dropped) and repeats every nonzero pair
        # four times, so the median of the nonzero set is unchanged
        assert median_sq_bandwidth(np.repeat(X, 2, axis=0)) == pytest.approx(d, rel=1e-12)

    def test_all_identical(self):
        with pytest.raises(DegenerateBandwidthError):
            median_sq_bandwidth(np.ones((5, 2)))

    def test_too_few(self):
        with pytest.raises(ValueError):
            median_sq_bandwidth(np.ones((1, 2)))

    def test_sampled_matches_exact(self):
        X = RngStream(0, 0).normal((3000, 4))
        exact = median_sq_bandwidth(X, max_pairs=10**7)
        sampled = median_sq_bandwidth(X, max_pairs=200_000, seed=1)
        assert sampled == pytest.approx(exact, rel=0.02)


class TestLoocvBandwidth:
    GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)

    def test_noiseless_identity_prefers_narrow(self):
        th = RngStream(0, 0).uniform((400, 1))
        lib = ReferenceLibrary(th, th.copy())
        assert loocv_bandwidth(lib, self.GRID) == 1e-4

    def test_uninformative_inputs_prefer_wide(self):
        rng = RngStream(1, 0)
        lib = ReferenceLibrary(rng.uniform((400, 1)), rng.normal((400, 1)))
        assert loocv_bandwidth(lib, self.GRID) >= 1.0

    def test_noisy_toy_lands_near_noise_scale(self):
        rng = RngStream(2, 0)
        th = rng.uniform((2000, 1))
        lib = ReferenceLibrary(th, th + rng.normal((2000, 1), scale=0.1))
        h = loocv_bandwidth(lib, n_holdout=500)
        assert 1e-4 <= h <= 1e-1

    def test_own_atom_excluded(self):
        # with itself included, every atom would be predicted perfectly at the narrowest width
        rng = RngStream(3, 0)
        lib = ReferenceLibrary(rng.uniform((300, 1)), rng.normal((300, 1)))
        assert loocv_bandwidth(lib, self.GRID) > 1e-4

    def test_result_in_grid_and_subsample_deterministic(self):
        lib = _lib(300)
        a = loocv_bandwidth(lib, self.GRID, n_holdout=50, seed=4)
        assert a in self.GRID and a == loocv_bandwidth(lib, self.GRID, n_holdout=50, seed=4)

    def test_rejects(self):
        with pytest.raises(ValueError):
            loocv_bandwidth(_lib(1))
        with pytest.raises(ValueError):
            loocv_bandwidth(_lib(10), grid=(0.0, 1.0))


class TestKernelEstimate:
    def test_single_atom(self):
        lib = _lib(1)
        for q, s2 in ((np.zeros(3), 0.01), (np.full(3, 50.0), 1e3)):
            est = kernel_bayes_estimate(q, lib, s2)
            assert np.allclose(est.theta, lib.thetas[0])

    def test_equidistant_atoms(self):
        lib = ReferenceLibrary([[1.0], [3.0]], [[1.0, 0.0], [-1.0, 0.0]])
        est = kernel_bayes_estimate([0.0, 0.0], lib, 0.3)
        assert est.theta[0] == pytest.approx(2.0)

    @pytest.mark.parametrize("h_sq", [0.01, 0.04])
    def test_truncated_gaussian_posterior(self, h_sq):
        # theta ~ U(0, 1), x = theta + N(0, s^2). Smoothing noisy atoms with a Gaussian
        # kernel of variance h^2 targets the posterior under noise variance s^2 + h^2,
        # i.e. N(q, s^2 + h^2) truncated to [0, 1].
        s = 0.2
        rng = RngStream(11, 0)
        th = rng.uniform((10_000, 1))
        x = th + rng.normal((10_000, 1), scale=s)
        lib = ReferenceLibrary(th, x)
        scale = math.sqrt(s * s + h_sq)
        for q in (0.1, 0.5, 0.85):
            exact = stats.truncnorm.mean(-q / scale, (1 - q) / scale, loc=q, scale=scale)
            assert abs(kernel_bayes_estimate([q], lib, h_sq).theta[0] - exact) < 0.05

    @given(st.permutations(list(range(20))))
    def test_reorder_invariance(self, perm):
        lib = _lib(20)
        q = RngStream(9, 9).normal((4, 3))
        a, _ = kernel_bayes_estimates(q, lib, 2.0)
        b, _ = kernel_bayes_estimates(q, ReferenceLibrary(lib.thetas[perm], lib.inputs[perm]), 2.0)
        assert np.allclose(a, b, atol=1e-14)

    def test_wide_bandwidth_gives_mean(self):
        lib = _lib(50)
        scale = float(np.mean(lib.inputs**2))
        est = kernel_bayes_estimate(np.full(3, 0.7), lib, 1e6 * scale)
        assert np.allclose(est.theta, lib.thetas.mean(axis=0), atol=1e-6)

    def test_underflow_falls_back_to_nearest(self):
        lib = ReferenceLibrary([[1.0], [2.0]], [[0.0], [10.0]])
        est = kernel_bayes_estimate([1e6], lib, 1e-300)
        assert est.fallback and est.theta[0] == 2.0

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            kernel_bayes_estimate([0.0, 0.0, 0.0], _lib(3), 0.0)


class TestWeights:
    @given(st.integers(0, 10_000), st.floats(1e-4, 1e4))
    def test_probability_vectors(self, seed, scale):
        rng = RngStream(seed, 0)
        w, _ = gaussian_kernel_weights(rng.normal((5, 3)), rng.normal((9, 3)), scale)
        assert np.all(w >= 0)
        assert np.allclose(w.sum(axis=1), 1, atol=1e-12)

    def test_distribution_validation(self):
        with pytest.raises(ValueError):
            AttributionDistribution([0, 1], [0.7, 0.7])
        with pytest.raises(ValueError):
            AttributionDistribution([0, 1], [1.0])
        assert np.array_equal(AttributionDistribution([2], [1.0]).dense(3), [0, 0, 1])

    def test_library_validation(self):
        with pytest.raises(ValueError):
            ReferenceLibrary(np.zeros((2, 1)), np.zeros((3, 1)))
        with pytest.raises(ValueError):
            ReferenceLibrary(np.zeros((2, 1)), np.zeros((2, 3)), np.zeros((2, 2)))


class TestDiscretePosterior:
    def test_concentrates_on_matching_atom(self):
        lib = _lib(10)
        d = discrete_posterior(lib.noiseless[4], lib, 1e-3)
        assert d.weights[4] == pytest.approx(1.0)

    def test_shared_observation_uniform(self):
        lib = ReferenceLibrary(np.arange(6.0)[:, None], np.zeros((6, 2)), np.zeros((6, 2)))
        d = discrete_posterior([0.3, -0.1], lib, 0.5)
        assert np.allclose(d.weights, 1 / 6)

    def test_two_atom_ratio(self):
        lib = ReferenceLibrary([[0.0], [1.0]], [[0.0], [0.0]], [[1.0], [2.5]])
        s = 0.7
        d = discrete_posterior([0.2], lib, s)
        d1, d2 = 0.8, 2.3
        assert d.weights[0] / d.weights[1] == pytest.approx(math.exp((d2**2 - d1**2) / (2 * s * s)), rel=1e-12)

    def test_recovers_generating_atom(self):
        rng = RngStream(3, 0)
        th = SIR_PRIOR.bounds[:, 0] + rng.uniform((500, 2)) * np.ptp(SIR_PRIOR.bounds, axis=1)
        clean = compartmental_batch("SIR", th, 39)[:, :, 1]
        lib = ReferenceLibrary(th, clean, clean)
        picks = rng.permutation(500)[:200]
        w, _ = discrete_posterior_weights(clean[picks], lib, 0.01)
        assert np.mean(np.argmax(w, axis=1) == picks) >= 0.95

    def test_atom_subset(self):
        lib = _lib(8)
        w, _ = discrete_posterior_weights(lib.noiseless[:2], lib, 0.5, atoms=np.array([1, 5]))
        assert w.shape == (2, 2)

    def test_requires_noiseless(self):
        with pytest.raises(ValueError):
            discrete_posterior(np.zeros(3), _lib(3, noiseless=False), 0.1)
        with pytest.raises(ValueError):
            discrete_posterior(np.zeros(3), _lib(3), 0.0)
