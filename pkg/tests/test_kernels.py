import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdrf.kernels import (
    DegenerateSample,
    DimensionMismatch,
    KernelSpec,
    UnnormalizedInput,
    WeightedDistribution,
    ZeroDim,
    kernel_eval,
    median_heuristic,
    mmd2_exact,
    mmd2_rff,
    rff_feature_matrix,
    rff_features,
)


def brute_force_median(pts):
    dists = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            dists.append(np.linalg.norm(pts[i] - pts[j]))
    return float(np.median(dists))


def naive_mmd2(P, Q, spec):
    total = 0.0
    for wi, yi in zip(P.weights, P.points):
        for wj, yj in zip(P.weights, P.points):
            total += wi * wj * kernel_eval(yi, yj, spec)
    for wi, yi in zip(Q.weights, Q.points):
        for wj, yj in zip(Q.weights, Q.points):
            total += wi * wj * kernel_eval(yi, yj, spec)
    for wi, yi in zip(P.weights, P.points):
        for wj, yj in zip(Q.weights, Q.points):
            total -= 2.0 * wi * wj * kernel_eval(yi, yj, spec)
    return max(total, 0.0)


def random_distribution(rng, n, d=2):
    pts = rng.normal(size=(n, d))
    w = rng.uniform(0.1, 1.0, size=n)
    return WeightedDistribution(pts, w / w.sum())


class TestMedianHeuristic:
    def test_single_pair(self):
        assert median_heuristic([[0.0], [2.0]]) == pytest.approx(2.0)

    def test_three_points(self):
        # distances {1, 2, 3}, median 2
        assert median_heuristic([[0.0], [1.0], [3.0]]) == pytest.approx(2.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(500, 2))
        assert median_heuristic(pts) == pytest.approx(brute_force_median(pts), abs=1e-12)

    def test_subsample_deterministic(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(2500, 2))
        assert median_heuristic(pts) == median_heuristic(pts)

    def test_degenerate(self):
        with pytest.raises(DegenerateSample):
            median_heuristic(np.zeros((5, 2)))
        with pytest.raises(DegenerateSample):
            median_heuristic(np.zeros((1, 2)))


class TestKernelEval:
    def test_zero_distance(self):
        spec = KernelSpec(bandwidth=1.3)
        assert kernel_eval([1.0, 2.0], [1.0, 2.0], spec) == pytest.approx(1.0)

    def test_half_height(self):
        sigma = 0.7
        spec = KernelSpec(bandwidth=sigma)
        y = np.array([0.0])
        y2 = np.array([sigma * np.sqrt(2.0 * np.log(2.0))])
        assert kernel_eval(y, y2, spec) == pytest.approx(0.5)

    def test_hand_evaluated(self):
        # ||(0,0)-(3,4)||^2 = 25, sigma = 5 -> exp(-1/2)
        spec = KernelSpec(bandwidth=5.0)
        assert kernel_eval([0.0, 0.0], [3.0, 4.0], spec) == pytest.approx(
            0.6065306597126334, abs=1e-12
        )

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            kernel_eval([0.0], [0.0, 1.0], KernelSpec(bandwidth=1.0))


class TestWeightedDistribution:
    def test_rejects_unnormalized(self):
        with pytest.raises(UnnormalizedInput):
            WeightedDistribution(np.zeros((2, 1)), np.array([0.5, 0.6]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            WeightedDistribution(np.zeros((2, 1)), np.array([1.5, -0.5]))

    def test_from_unnormalized(self):
        dist = WeightedDistribution.from_unnormalized(np.zeros((3, 1)), [2.0, 1.0, 1.0])
        assert dist.weights.sum() == pytest.approx(1.0, abs=1e-15)

    @given(st.lists(st.floats(0.01, 100.0), min_size=1, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_normalization_property(self, raw):
        pts = np.arange(len(raw), dtype=float)[:, None]
        dist = WeightedDistribution.from_unnormalized(pts, raw)
        assert abs(dist.weights.sum() - 1.0) <= 1e-12
        assert np.all(dist.weights >= 0)


class TestMmd2Exact:
    def test_identity(self):
        rng = np.random.default_rng(2)
        P = random_distribution(rng, 7)
        spec = KernelSpec(bandwidth=1.0)
        assert mmd2_exact(P, P, spec) <= 1e-12

    def test_two_diracs_closed_form(self):
        # sigma = sqrt(2), distance 2: 2 (1 - e^{-1})
        P = WeightedDistribution(np.array([[0.0]]), np.array([1.0]))
        Q = WeightedDistribution(np.array([[2.0]]), np.array([1.0]))
        spec = KernelSpec(bandwidth=np.sqrt(2.0))
        assert mmd2_exact(P, Q, spec) == pytest.approx(1.2642411176571153, abs=1e-12)

    def test_matches_naive_double_sum(self):
        rng = np.random.default_rng(3)
        spec = KernelSpec(bandwidth=0.8)
        for _ in range(5):
            P = random_distribution(rng, 5)
            Q = random_distribution(rng, 5)
            assert mmd2_exact(P, Q, spec) == pytest.approx(naive_mmd2(P, Q, spec), abs=1e-12)

    def test_symmetry_and_permutation(self):
        rng = np.random.default_rng(4)
        P = random_distribution(rng, 6)
        Q = random_distribution(rng, 8)
        spec = KernelSpec(bandwidth=1.1)
        assert mmd2_exact(P, Q, spec) == pytest.approx(mmd2_exact(Q, P, spec), abs=1e-14)
        perm = rng.permutation(6)
        P2 = WeightedDistribution(P.points[perm], P.weights[perm])
        assert mmd2_exact(P2, Q, spec) == pytest.approx(mmd2_exact(P, Q, spec), abs=1e-13)

    def test_merge_identical_points(self):
        spec = KernelSpec(bandwidth=0.9)
        pts = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
        P = WeightedDistribution(pts, np.array([0.2, 0.3, 0.5]))
        P_merged = WeightedDistribution(pts[1:], np.array([0.5, 0.5]))
        Q = WeightedDistribution(np.array([[0.5, 0.5]]), np.array([1.0]))
        assert mmd2_exact(P, Q, spec) == pytest.approx(mmd2_exact(P_merged, Q, spec), abs=1e-12)

    def test_bandwidth_limits(self):
        # sigma -> inf: kernel constant, MMD -> 0; sigma -> 0: indicator kernel
        P = WeightedDistribution(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
        Q = WeightedDistribution(np.array([[0.0], [2.0]]), np.array([0.25, 0.75]))
        assert mmd2_exact(P, Q, KernelSpec(bandwidth=1e6)) <= 1e-9
        # indicator limit: sum p^2 + sum q^2 - 2 sum_{shared} p q
        expected = (0.25 + 0.25) + (0.0625 + 0.5625) - 2 * (0.5 * 0.25)
        assert mmd2_exact(P, Q, KernelSpec(bandwidth=1e-6)) == pytest.approx(expected, abs=1e-12)

    def test_diracs_at_tiny_bandwidth(self):
        # distinct Diracs: 2 (1 - overlap mass) with zero overlap
        P = WeightedDistribution(np.array([[0.0]]), np.array([1.0]))
        Q = WeightedDistribution(np.array([[1.0]]), np.array([1.0]))
        assert mmd2_exact(P, Q, KernelSpec(bandwidth=1e-6)) == pytest.approx(2.0, abs=1e-12)
        assert mmd2_exact(P, P, KernelSpec(bandwidth=1e-6)) == pytest.approx(0.0, abs=1e-12)

    def test_dimension_mismatch(self):
        P = WeightedDistribution(np.zeros((2, 1)), np.array([0.5, 0.5]))
        Q = WeightedDistribution(np.zeros((2, 2)), np.array([0.5, 0.5]))
        with pytest.raises(DimensionMismatch):
            mmd2_exact(P, Q, KernelSpec(bandwidth=1.0))


class TestRandomFeatures:
    def test_zero_point_pattern(self):
        spec = KernelSpec(bandwidth=1.0, rff_dim=16, rff_seed=3)
        z = rff_features(np.zeros(2), spec)
        half = 8
        assert np.allclose(z[:half], np.sqrt(2.0 / 16))
        assert np.allclose(z[half:], 0.0)

    def test_norm_bounded(self):
        spec = KernelSpec(bandwidth=1.0, rff_dim=64, rff_seed=5)
        rng = np.random.default_rng(6)
        Z = rff_feature_matrix(rng.normal(size=(20, 3)), spec)
        norms = np.linalg.norm(Z, axis=1)
        assert np.all(norms <= np.sqrt(2.0) + 1e-9)

    def test_deterministic(self):
        spec = KernelSpec(bandwidth=1.2, rff_dim=32, rff_seed=11)
        y = np.array([0.3, -0.7])
        assert np.array_equal(rff_features(y, spec), rff_features(y, spec))
        fresh = KernelSpec(bandwidth=1.2, rff_dim=32, rff_seed=11)
        assert np.array_equal(rff_features(y, spec), rff_features(y, fresh))

    def test_inner_products_approximate_kernel(self):
        spec = KernelSpec(bandwidth=1.0, rff_dim=4096, rff_seed=7)
        rng = np.random.default_rng(8)
        A = rng.normal(size=(100, 2))
        B = rng.normal(size=(100, 2))
        ZA = rff_feature_matrix(A, spec)
        ZB = rff_feature_matrix(B, spec)
        errs = [
            abs(float(ZA[i] @ ZB[i]) - kernel_eval(A[i], B[i], spec)) for i in range(100)
        ]
        assert np.mean(errs) <= 0.02

    def test_zero_dim_raises(self):
        spec = KernelSpec(bandwidth=1.0, rff_dim=0)
        with pytest.raises(ZeroDim):
            rff_features(np.zeros(2), spec)

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            KernelSpec(bandwidth=1.0, rff_dim=7)


class TestMmd2Rff:
    def test_identical_inputs_exact_zero(self):
        rng = np.random.default_rng(9)
        P = random_distribution(rng, 10)
        spec = KernelSpec(bandwidth=1.0, rff_dim=128, rff_seed=1)
        assert mmd2_rff(P, P, spec) == 0.0

    def test_identical_diracs(self):
        P = WeightedDistribution(np.array([[1.0, 2.0]]), np.array([1.0]))
        Q = WeightedDistribution(np.array([[1.0, 2.0]]), np.array([1.0]))
        spec = KernelSpec(bandwidth=2.0, rff_dim=64, rff_seed=2)
        assert mmd2_rff(P, Q, spec) == 0.0

    def test_close_to_exact(self):
        rng = np.random.default_rng(10)
        for trial in range(50):
            P = random_distribution(rng, 100)
            Q = WeightedDistribution(
                rng.normal(loc=0.5, size=(100, 2)), np.full(100, 0.01)
            )
            bw = median_heuristic(np.vstack([P.points, Q.points]))
            exact = mmd2_exact(P, Q, KernelSpec(bandwidth=bw))
            approx = mmd2_rff(P, Q, KernelSpec(bandwidth=bw, rff_dim=4096, rff_seed=trial))
            assert abs(approx - exact) <= 0.05

    def test_error_shrinks_with_dimension(self):
        rng = np.random.default_rng(11)
        err_small, err_large = [], []
        for trial in range(20):
            P = random_distribution(rng, 40)
            Q = random_distribution(rng, 40)
            exact = mmd2_exact(P, Q, KernelSpec(bandwidth=1.0))
            small = mmd2_rff(P, Q, KernelSpec(bandwidth=1.0, rff_dim=512, rff_seed=trial))
            large = mmd2_rff(P, Q, KernelSpec(bandwidth=1.0, rff_dim=8192, rff_seed=trial))
            err_small.append(abs(small - exact))
            err_large.append(abs(large - exact))
        assert np.mean(err_large) <= np.mean(err_small)
