import math

import numpy as np
import pytest

from noise_forge.dataio import SyntheticSpec, make_synthetic
from noise_forge.model import MlpSpec, glorot_init, per_sample_grad_matrix
from noise_forge.noiselab import (
    MAX_DENSE_PARAMS,
    CapabilityError,
    effective_batch,
    enhancement_factor,
    enumerate_ne_noise_covariance_from_grads,
    enumerate_noise_covariance,
    enumerate_noise_covariance_from_grads,
    exact_noise_covariance,
    exact_noise_trace,
    excess_kurtosis,
    gradient_diversity,
    gradient_diversity_from_matrix,
    measure_stats,
    noise_covariance_from_grads,
    probe_noise,
    sample_ne_noise,
    sample_sgd_noise,
)
from noise_forge.rng import named_stream

# per-sample scalar "gradients" with known exact noise variance:
# N=4, B=2, eta=1 gives (1/2) * (2/3) * var([1,2,3,6]) = (1/2)(2/3)(3.5) = 7/6
HAND_GRADS = np.array([[1.0], [2.0], [3.0], [6.0]])
HAND_VAR = 7.0 / 6.0


def blob_dataset(seed=0, n_per_class=6, classes=2, dim=3):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(classes, dim))
    return make_synthetic(SyntheticSpec(centers, n_per_class, 0.3, seed))


def rel_fro(a, b):
    denom = np.linalg.norm(b)
    if denom == 0.0:
        return np.linalg.norm(a - b)
    return np.linalg.norm(a - b) / denom


class TestEnhancementFactor:
    @pytest.mark.parametrize(
        "alpha,expected",
        [(1.0, 1.0), (1.5, 2.5), (2.0, 5.0), (3.0, 13.0), (0.0, 1.0), (0.5, 0.5), (-1.0, 5.0)],
    )
    def test_hand_values(self, alpha, expected):
        assert enhancement_factor(alpha) == pytest.approx(expected, rel=1e-15)

    def test_symmetric_about_one_half(self):
        for alpha in (0.2, 0.7, 1.3, 4.0):
            assert enhancement_factor(alpha) == pytest.approx(
                enhancement_factor(1.0 - alpha), rel=1e-15
            )

    def test_at_least_one_outside_unit_interval(self):
        # inside (0, 1) the combination averages and the factor drops below 1
        for alpha in (-2.0, 0.0, 1.0, 1.01, 5.0, 11.0):
            assert enhancement_factor(alpha) >= 1.0
        assert enhancement_factor(0.5) == 0.5

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            enhancement_factor(float("inf"))


class TestEffectiveBatch:
    def test_hand_values(self):
        assert effective_batch(5000, 3.0) == pytest.approx(5000 / 13.0, rel=1e-15)
        assert effective_batch(2000, 1.5) == pytest.approx(800.0, rel=1e-15)
        assert effective_batch(900, 1.0) == 900.0

    def test_decreasing_in_alpha_above_one(self):
        values = [effective_batch(1000, a) for a in (1.0, 1.5, 2.0, 3.0, 5.0)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_bad_batch_rejected(self):
        with pytest.raises(ValueError):
            effective_batch(0, 2.0)


class TestExactCovariance:
    def test_hand_scalar_value(self):
        cov = noise_covariance_from_grads(HAND_GRADS, eta=1.0, batch_size=2)
        assert cov.shape == (1, 1)
        assert cov[0, 0] == pytest.approx(HAND_VAR, rel=1e-15)

    def test_learning_rate_enters_squared(self):
        cov = noise_covariance_from_grads(HAND_GRADS, eta=0.5, batch_size=2)
        assert cov[0, 0] == pytest.approx(0.25 * HAND_VAR, rel=1e-15)

    def test_full_batch_noise_is_zero(self):
        cov = noise_covariance_from_grads(HAND_GRADS, eta=1.0, batch_size=4)
        np.testing.assert_array_equal(cov, np.zeros((1, 1)))

    def test_large_n_approx_drops_population_factor(self):
        exact = noise_covariance_from_grads(HAND_GRADS, eta=1.0, batch_size=2)
        approx = noise_covariance_from_grads(
            HAND_GRADS, eta=1.0, batch_size=2, large_n_approx=True
        )
        np.testing.assert_allclose(approx, exact * 3.0 / 2.0, rtol=1e-15)

    def test_single_sample_dataset_has_zero_noise(self):
        cov = noise_covariance_from_grads(np.array([[3.0, -1.0]]), eta=1.0, batch_size=1)
        np.testing.assert_array_equal(cov, np.zeros((2, 2)))

    def test_matrix_is_symmetric_psd(self):
        g = np.random.default_rng(3).standard_normal((12, 5))
        cov = noise_covariance_from_grads(g, eta=0.1, batch_size=3)
        np.testing.assert_allclose(cov, cov.T, atol=1e-15)
        assert np.linalg.eigvalsh(cov).min() > -1e-12

    def test_too_many_params_rejected(self):
        with pytest.raises(CapabilityError):
            noise_covariance_from_grads(
                np.zeros((3, MAX_DENSE_PARAMS + 1)), eta=1.0, batch_size=2
            )


class TestEnumerationOracle:
    def test_hand_scalar_value(self):
        cov = enumerate_noise_covariance_from_grads(HAND_GRADS, eta=1.0, batch_size=2)
        assert cov[0, 0] == pytest.approx(HAND_VAR, rel=1e-14)

    def test_matches_closed_form_on_random_grads(self):
        g = np.random.default_rng(7).standard_normal((9, 4))
        for b in (1, 3, 9):
            exact = noise_covariance_from_grads(g, eta=0.2, batch_size=b)
            enum = enumerate_noise_covariance_from_grads(g, eta=0.2, batch_size=b)
            assert rel_fro(enum, exact) < 1e-12

    def test_chunking_does_not_change_result(self):
        g = np.random.default_rng(9).standard_normal((8, 3))
        a = enumerate_noise_covariance_from_grads(g, eta=1.0, batch_size=3, chunk_size=5)
        b = enumerate_noise_covariance_from_grads(g, eta=1.0, batch_size=3, chunk_size=4096)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_subset_budget_enforced(self):
        with pytest.raises(CapabilityError):
            enumerate_noise_covariance_from_grads(np.zeros((40, 1)), eta=1.0, batch_size=10)

    def test_pair_enumeration_hand_value(self):
        cov = enumerate_ne_noise_covariance_from_grads(
            HAND_GRADS, eta=1.0, batch_size=2, alpha=2.0
        )
        assert cov[0, 0] == pytest.approx(5.0 * HAND_VAR, rel=1e-13)

    def test_pair_enumeration_equals_scaled_vanilla(self):
        g = np.random.default_rng(11).standard_normal((7, 3))
        vanilla = enumerate_noise_covariance_from_grads(g, eta=0.3, batch_size=2)
        for alpha in (1.0, 1.5, 2.0, 3.0):
            enhanced = enumerate_ne_noise_covariance_from_grads(
                g, eta=0.3, batch_size=2, alpha=alpha
            )
            assert rel_fro(enhanced, enhancement_factor(alpha) * vanilla) < 1e-12

    def test_pair_budget_enforced(self):
        with pytest.raises(CapabilityError):
            enumerate_ne_noise_covariance_from_grads(
                np.zeros((15, 1)), eta=1.0, batch_size=7, alpha=2.0
            )


class TestModelLevelWrappers:
    def setup_method(self):
        self.ds = blob_dataset(seed=5, n_per_class=4, classes=2, dim=3)  # N = 8
        self.w = glorot_init(MlpSpec(3, (4,), 2, seed=5))

    def test_enumeration_matches_closed_form_at_the_model(self):
        for b in (1, 2, 8):
            exact = exact_noise_covariance(self.w, self.ds, eta=0.1, batch_size=b)
            enum = enumerate_noise_covariance(self.w, self.ds, eta=0.1, batch_size=b)
            assert rel_fro(enum, exact) < 1e-10

    def test_trace_shortcut_matches_dense_trace(self):
        for b in (1, 3, 8):
            dense = exact_noise_covariance(self.w, self.ds, eta=0.1, batch_size=b)
            streamed = exact_noise_trace(self.w, self.ds, eta=0.1, batch_size=b)
            assert streamed == pytest.approx(np.trace(dense), rel=1e-12, abs=1e-18)

    def test_trace_supports_large_n_approx(self):
        exact = exact_noise_trace(self.w, self.ds, eta=0.1, batch_size=2)
        approx = exact_noise_trace(
            self.w, self.ds, eta=0.1, batch_size=2, large_n_approx=True
        )
        assert approx == pytest.approx(exact * 7.0 / 6.0, rel=1e-12)


class TestNoiseSamplers:
    def setup_method(self):
        self.ds = blob_dataset(seed=8, n_per_class=6, classes=2, dim=3)  # N = 12
        self.w = glorot_init(MlpSpec(3, (4,), 2, seed=8))

    def test_shapes_and_determinism(self):
        a = sample_sgd_noise(self.w, self.ds, 0.1, 3, 40, seed=5)
        b = sample_sgd_noise(self.w, self.ds, 0.1, 3, 40, seed=5)
        assert a.shape == (40, len(self.w))
        np.testing.assert_array_equal(a, b)
        c = sample_sgd_noise(self.w, self.ds, 0.1, 3, 40, seed=6)
        assert not np.array_equal(a, c)

    def test_stream_index_gives_fresh_draws(self):
        a = sample_sgd_noise(self.w, self.ds, 0.1, 3, 40, seed=5, stream_index=0)
        b = sample_sgd_noise(self.w, self.ds, 0.1, 3, 40, seed=5, stream_index=1)
        assert not np.array_equal(a, b)

    def test_alpha_one_reproduces_vanilla_bitwise(self):
        vanilla = sample_sgd_noise(self.w, self.ds, 0.1, 3, 50, seed=7)
        enhanced = sample_ne_noise(self.w, self.ds, 0.1, 3, 1.0, 50, seed=7)
        assert np.array_equal(vanilla, enhanced)

    def test_chunk_size_is_transparent(self):
        a = sample_ne_noise(self.w, self.ds, 0.1, 3, 2.0, 30, seed=9, chunk_size=7)
        b = sample_ne_noise(self.w, self.ds, 0.1, 3, 2.0, 30, seed=9, chunk_size=512)
        np.testing.assert_array_equal(a, b)

    def test_full_batch_noise_is_exactly_zero(self):
        xi = sample_sgd_noise(self.w, self.ds, 0.1, self.ds.n_samples, 5, seed=1)
        np.testing.assert_allclose(xi, np.zeros_like(xi), atol=1e-16)

    def test_sample_budget_enforced(self):
        with pytest.raises(CapabilityError):
            sample_sgd_noise(self.w, self.ds, 0.1, 3, 30_000_000, seed=0)

    def test_bad_arguments_rejected(self):
        with pytest.raises(ValueError):
            sample_sgd_noise(self.w, self.ds, 0.1, 0, 10, seed=0)
        with pytest.raises(ValueError):
            sample_sgd_noise(self.w, self.ds, 0.1, 100, 10, seed=0)
        with pytest.raises(ValueError):
            sample_ne_noise(self.w, self.ds, 0.1, 3, float("nan"), 10, seed=0)

    def test_sample_covariance_approaches_prediction(self):
        # Monte Carlo check of the enhancement ratio at alpha = 2 (factor 5)
        eta, b, alpha, n = 0.1, 3, 2.0, 20_000
        samples = sample_ne_noise(self.w, self.ds, eta, b, alpha, n, seed=13)
        baseline = exact_noise_trace(self.w, self.ds, eta, b)
        stats = measure_stats(samples, baseline_trace=baseline)
        assert stats.enhancement_ratio == pytest.approx(5.0, rel=0.10)


class TestKurtosis:
    def test_gaussian_is_near_zero(self):
        x = named_stream(44, "projection").standard_normal((100_000, 2))
        np.testing.assert_allclose(excess_kurtosis(x), [0.0, 0.0], atol=0.1)

    def test_symmetric_two_point_is_minus_two(self):
        x = np.array([1.0, -1.0] * 500)[:, None]
        assert excess_kurtosis(x)[0] == pytest.approx(-2.0, abs=1e-12)

    def test_constant_column_is_nan(self):
        x = np.column_stack([np.full(10, 3.0), np.arange(10.0)])
        kurt = excess_kurtosis(x)
        assert math.isnan(kurt[0])
        assert math.isfinite(kurt[1])


class TestGradientDiversity:
    def test_orthogonal_rows_give_one(self):
        assert gradient_diversity_from_matrix(np.eye(4)) == pytest.approx(1.0)

    def test_identical_rows_give_inverse_count(self):
        g = np.tile(np.array([1.0, 2.0]), (5, 1))
        assert gradient_diversity_from_matrix(g) == pytest.approx(0.2, rel=1e-15)

    def test_hand_value(self):
        # rows (1,1) and (2,0): num = 2 + 4 = 6, den = |(3,1)|^2 = 10
        g = np.array([[1.0, 1.0], [2.0, 0.0]])
        assert gradient_diversity_from_matrix(g) == pytest.approx(0.6, rel=1e-15)

    def test_zero_sum_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            gradient_diversity_from_matrix(np.array([[1.0, 0.0], [-1.0, 0.0]]))

    def test_streamed_matches_matrix_form(self):
        ds = blob_dataset(seed=3, n_per_class=5, classes=3, dim=4)
        w = glorot_init(MlpSpec(4, (6,), 3, seed=3))
        mat = per_sample_grad_matrix(w, ds)
        assert gradient_diversity(w, ds) == pytest.approx(
            gradient_diversity_from_matrix(mat), rel=1e-12
        )


class TestMeasureStats:
    def test_hand_variance_uses_sample_convention(self):
        stats = measure_stats(np.array([[0.0], [2.0]]))
        assert stats.trace_cov == pytest.approx(2.0, rel=1e-15)
        assert stats.n_samples == 2
        np.testing.assert_allclose(stats.mean, [1.0])

    def test_identical_samples_have_zero_trace(self):
        stats = measure_stats(np.tile(np.array([1.0, -2.0]), (6, 1)))
        assert stats.trace_cov == 0.0
        assert np.isnan(stats.excess_kurtosis).all()

    def test_optional_fields_default_to_none(self):
        stats = measure_stats(np.random.default_rng(0).random((5, 2)))
        assert stats.enhancement_ratio is None
        assert stats.b_eff is None
        assert stats.grad_diversity is None
        assert stats.projection_kurtosis is None

    def test_ratio_and_b_eff_filled_in(self):
        stats = measure_stats(
            np.array([[0.0], [2.0]]), baseline_trace=4.0, batch_size=10, alpha=3.0
        )
        assert stats.enhancement_ratio == pytest.approx(0.5, rel=1e-15)
        assert stats.b_eff == pytest.approx(10 / 13.0, rel=1e-15)

    def test_diversity_filled_in(self):
        stats = measure_stats(
            np.random.default_rng(1).random((5, 2)),
            per_sample_grads=np.array([[1.0, 1.0], [2.0, 0.0]]),
        )
        assert stats.grad_diversity == pytest.approx(0.6, rel=1e-15)

    def test_projection_kurtosis_deterministic(self):
        x = np.random.default_rng(2).standard_normal((200, 4))
        a = measure_stats(x, n_projections=3, projection_seed=5)
        b = measure_stats(x, n_projections=3, projection_seed=5)
        assert a.projection_kurtosis.shape == (3,)
        np.testing.assert_array_equal(a.projection_kurtosis, b.projection_kurtosis)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError, match="2"):
            measure_stats(np.zeros((1, 3)))

    def test_bad_baseline_rejected(self):
        with pytest.raises(ValueError, match="baseline"):
            measure_stats(np.zeros((4, 2)), baseline_trace=0.0)


class TestProbe:
    def setup_method(self):
        self.ds = blob_dataset(seed=6, n_per_class=6, classes=2, dim=3)  # N = 12
        self.w = glorot_init(MlpSpec(3, (5,), 2, seed=6))

    def test_matches_dense_sampling_path(self):
        # same seed, same index streams: the streamed probe must agree with
        # explicit sample matrices up to accumulation roundoff
        eta, b, alpha, n, seed = 0.1, 3, 2.0, 50, 15
        row = probe_noise(self.w, self.ds, eta, b, alpha, n, seed=seed)
        samples = sample_ne_noise(self.w, self.ds, eta, b, alpha, n, seed=seed)
        baseline = exact_noise_trace(self.w, self.ds, eta, b)
        stats = measure_stats(samples, baseline_trace=baseline)
        assert row.trace_cov == pytest.approx(stats.trace_cov, rel=1e-9)
        assert row.enhancement_ratio == pytest.approx(stats.enhancement_ratio, rel=1e-9)
        expected_kurt = float(np.nanmedian(excess_kurtosis(samples)))
        assert row.median_excess_kurtosis == pytest.approx(expected_kurt, abs=1e-6)
        assert row.grad_diversity == pytest.approx(gradient_diversity(self.w, self.ds), rel=1e-12)

    def test_reports_predictions_alongside_measurements(self):
        row = probe_noise(self.w, self.ds, 0.1, 3, 3.0, 20, seed=2, step=7)
        assert row.step == 7
        assert row.alpha == 3.0
        assert row.batch_size == 3
        assert row.predicted_factor == pytest.approx(13.0)
        assert row.b_eff == pytest.approx(3 / 13.0)

    def test_alpha_one_ratio_is_near_one(self):
        row = probe_noise(self.w, self.ds, 0.1, 3, 1.0, 400, seed=3)
        assert row.enhancement_ratio == pytest.approx(1.0, rel=0.35)

    def test_bad_arguments_rejected(self):
        with pytest.raises(ValueError):
            probe_noise(self.w, self.ds, 0.1, 3, 2.0, 1, seed=0)
        with pytest.raises(ValueError):
            probe_noise(self.w, self.ds, 0.1, 0, 2.0, 10, seed=0)
        with pytest.raises(ValueError):
            probe_noise(self.w, self.ds, 0.1, 3, float("inf"), 10, seed=0)
