import numpy as np
import pytest
from scipy.special import gamma as gamma_fn

from pq_multilabel.data_io import SampleSet, synthetic_dataset
from pq_multilabel.errors import (
    DegenerateInputError,
    InsufficientDataError,
    SingularMatrixError,
    ValidationError,
)
from pq_multilabel.quality import (
    NUM_FEATURES,
    ReferenceModel,
    brisque_features,
    extract_corpus_features,
    fit_aggd,
    fit_ggd,
    fit_reference_model,
    gaussian_window,
    mscn,
    pairwise_products,
    quality_score,
    quality_scores,
    rank_by_quality,
    ranking_from_scores,
    read_scores_csv,
    score_corpus,
    to_luminance,
    write_scores_csv,
)
from pq_multilabel.shifts import corrupt


def reflect(i, n):
    while i < 0 or i >= n:
        i = -i - 1 if i < 0 else 2 * n - i - 1
    return i


def naive_mscn(plane):
    h, w = plane.shape
    window = gaussian_window()
    r = window.shape[0] // 2
    out = np.zeros_like(plane)
    for i in range(h):
        for j in range(w):
            patch = np.array(
                [
                    [
                        plane[reflect(i + di, h), reflect(j + dj, w)]
                        for dj in range(-r, r + 1)
                    ]
                    for di in range(-r, r + 1)
                ]
            )
            mu = np.sum(window * patch)
            sigma = np.sqrt(np.sum(window * (patch - mu) ** 2))
            out[i, j] = (plane[i, j] - mu) / (sigma + 1.0 / 255.0)
    return out


def aggd_sampler(rng, nu, sigma_l, sigma_r, n):
    """Pick a side by its mass, then draw a generalized gamma magnitude."""
    ratio = np.sqrt(gamma_fn(1.0 / nu) / gamma_fn(3.0 / nu))
    beta_l, beta_r = sigma_l * ratio, sigma_r * ratio
    left = rng.random(n) < beta_l / (beta_l + beta_r)
    magnitude = rng.gamma(1.0 / nu, 1.0, size=n) ** (1.0 / nu)
    return np.where(left, -beta_l * magnitude, beta_r * magnitude)


class TestLuminance:
    def test_black(self):
        assert np.all(to_luminance(np.zeros((3, 4, 4), np.uint8)) == 0.0)

    def test_white(self):
        np.testing.assert_allclose(to_luminance(np.full((3, 4, 4), 255, np.uint8)), 1.0)

    def test_red_pixel(self):
        image = np.zeros((3, 1, 1), np.uint8)
        image[0] = 255
        assert to_luminance(image)[0, 0] == pytest.approx(0.299)


class TestMscn:
    @pytest.mark.parametrize("value", [0.0, 0.37, 1.0])
    def test_constant_plane_is_zero(self, value):
        assert np.all(mscn(np.full((12, 12), value)) == 0.0)

    def test_matches_nested_loop(self, rng):
        plane = rng.random((9, 9))
        np.testing.assert_allclose(mscn(plane), naive_mscn(plane), rtol=0, atol=1e-12)

    def test_roughly_unit_spread(self, rng):
        out = mscn(mscn(rng.random((64, 64))))
        assert abs(out.std() - 1.0) < 0.5

    def test_too_small(self):
        with pytest.raises(ValidationError):
            mscn(np.zeros((5, 5)))


class TestPairwiseProducts:
    def test_ones(self):
        for product in pairwise_products(np.ones((4, 4))):
            assert np.all(product == 1.0)

    def test_checkerboard(self):
        board = np.where(np.add.outer(np.arange(6), np.arange(6)) % 2 == 0, 1.0, -1.0)
        h, v, d1, d2 = pairwise_products(board)
        assert np.all(h == -1) and np.all(v == -1)
        assert np.all(d1 == 1) and np.all(d2 == 1)

    def test_matches_loops(self, rng):
        x = rng.normal(size=(5, 5))
        h, v, d1, d2 = pairwise_products(x)
        for i in range(5):
            for j in range(4):
                assert h[i, j] == x[i, j] * x[i, j + 1]
                assert v[j, i] == x[j, i] * x[j + 1, i]
        for i in range(4):
            for j in range(4):
                assert d1[i, j] == x[i, j] * x[i + 1, j + 1]
                assert d2[i, j] == x[i, j + 1] * x[i + 1, j]
        assert h.shape == (5, 4) and v.shape == (4, 5)
        assert d1.shape == d2.shape == (4, 4)


class TestGgdFit:
    def test_gaussian(self, rng):
        fit = fit_ggd(rng.normal(size=100_000))
        assert 1.9 <= fit.alpha <= 2.1
        assert not fit.clamped

    def test_laplacian(self, rng):
        fit = fit_ggd(rng.laplace(size=100_000))
        assert 0.9 <= fit.alpha <= 1.1

    def test_binary_data_clamps_high(self, rng):
        fit = fit_ggd(rng.choice([-1.0, 1.0], size=1000))
        assert fit.alpha == 10.0
        assert fit.clamped

    def test_all_zero(self):
        with pytest.raises(DegenerateInputError):
            fit_ggd(np.zeros(200))

    def test_too_few_samples(self, rng):
        with pytest.raises(InsufficientDataError):
            fit_ggd(rng.normal(size=50))


class TestAggdFit:
    def test_symmetric_normal(self, rng):
        fit = fit_aggd(rng.normal(size=100_000))
        sigma_l, sigma_r = np.sqrt(fit.sigma_l2), np.sqrt(fit.sigma_r2)
        assert abs(sigma_l - sigma_r) / sigma_r < 0.05
        assert abs(fit.eta) < 0.05 * sigma_r

    @pytest.mark.slow
    def test_recovers_sampler_parameters(self, rng):
        x = aggd_sampler(rng, nu=1.5, sigma_l=1.0, sigma_r=2.0, n=1_000_000)
        fit = fit_aggd(x)
        assert abs(fit.nu - 1.5) <= 0.1
        assert fit.sigma_l2 == pytest.approx(1.0, rel=0.05)
        assert fit.sigma_r2 == pytest.approx(4.0, rel=0.05)

    def test_sign_flip(self, rng):
        x = rng.normal(size=5000) + 0.3 * rng.laplace(size=5000)
        fit, flipped = fit_aggd(x), fit_aggd(-x)
        assert flipped.nu == fit.nu
        assert flipped.eta == -fit.eta
        assert flipped.sigma_l2 == fit.sigma_r2
        assert flipped.sigma_r2 == fit.sigma_l2

    def test_one_sided(self, rng):
        with pytest.raises(DegenerateInputError):
            fit_aggd(np.abs(rng.normal(size=500)))


class TestBrisqueFeatures:
    def test_constant_image(self):
        with pytest.raises(DegenerateInputError, match="scale 1"):
            brisque_features(np.full((32, 32), 0.5))

    def test_shape_and_finiteness(self, gratings):
        features = brisque_features(to_luminance(gratings.images[0]))
        assert features.shape == (NUM_FEATURES,)
        assert np.all(np.isfinite(features))

    def test_noise_moves_alpha(self):
        pristine = synthetic_dataset(seed=5, n=10, num_classes=10, noise_sigma=0.0)
        image = pristine.images[0]
        noisy = corrupt(image, "gaussian_noise", 5, seed=0)
        a = brisque_features(to_luminance(image))[0]
        b = brisque_features(to_luminance(noisy))[0]
        assert abs(a - b) > 0.2

    def test_minimum_side(self):
        with pytest.raises(ValidationError):
            brisque_features(np.zeros((15, 32)))


class TestReferenceModel:
    def test_identical_vectors(self):
        corpus = np.tile(np.arange(4.0), (10, 1))
        ref = fit_reference_model(corpus)
        np.testing.assert_array_equal(ref.covariance, 0.0)
        assert quality_score(np.arange(4.0), ref) == 0.0

    def test_matches_two_pass(self, rng):
        corpus = rng.normal(size=(1000, 6)) @ rng.normal(size=(6, 6))
        ref = fit_reference_model(corpus)
        mean = corpus.sum(axis=0) / len(corpus)
        centered = corpus - mean
        cov = centered.T @ centered / (len(corpus) - 1)
        np.testing.assert_allclose(ref.mean, mean, atol=1e-10)
        np.testing.assert_allclose(ref.covariance, cov, atol=1e-10)

    def test_rank_deficient_without_ridge(self, rng):
        base = rng.normal(size=(50, 2))
        corpus = np.column_stack([base, base[:, 0] + base[:, 1]])
        with pytest.raises(SingularMatrixError):
            fit_reference_model(corpus, ridge=0.0)

    def test_single_vector(self):
        with pytest.raises(InsufficientDataError):
            fit_reference_model(np.zeros((1, 3)))


class TestQualityScore:
    def test_at_mean(self, rng):
        ref = fit_reference_model(rng.normal(size=(100, 3)))
        assert quality_score(ref.mean, ref) == 0.0

    def test_unit_step(self):
        ref = ReferenceModel(np.zeros(3), np.eye(3), ridge=0.0)
        assert quality_score(np.array([1.0, 0.0, 0.0]), ref) == pytest.approx(1.0)

    def test_matches_dense_solve(self, rng):
        a = rng.normal(size=(5, 5))
        sigma = a @ a.T + 5 * np.eye(5)
        mean = rng.normal(size=5)
        ref = ReferenceModel(mean, sigma, ridge=1e-6)
        f = rng.normal(size=(20, 5))
        diff = f - mean
        solved = np.linalg.solve(sigma + 1e-6 * np.eye(5), diff.T).T
        expected = np.sqrt(np.sum(diff * solved, axis=1))
        np.testing.assert_allclose(quality_scores(f, ref), expected, rtol=1e-8)

    def test_non_finite(self):
        ref = ReferenceModel(np.zeros(2), np.eye(2))
        with pytest.raises(ValidationError):
            quality_score(np.array([np.nan, 0.0]), ref)


class TestRanking:
    def test_ties_by_id(self):
        assert ranking_from_scores(np.ones(5)).tolist() == [0, 1, 2, 3, 4]

    def test_descending(self):
        assert ranking_from_scores(np.array([1.0, 3.0, 2.0])).tolist() == [1, 2, 0]

    def test_noisy_half_ranks_high(self):
        samples = synthetic_dataset(seed=11, n=500, num_classes=10)
        noisy_ids = np.arange(0, 500, 2)
        images = samples.images.copy()
        for i in noisy_ids:
            images[i] = corrupt(
                images[i], "gaussian_noise", 4, seed=0, sample_id=int(i)
            )
        shifted = samples.with_images(images)
        table = score_corpus(shifted)
        top_half = set(table.ranking[:250].tolist())
        hits = sum(int(i) in top_half for i in noisy_ids)
        assert hits >= 0.75 * len(noisy_ids)

    def test_rank_by_quality_agrees_with_table(self, gratings):
        table = score_corpus(gratings)
        np.testing.assert_array_equal(
            rank_by_quality(gratings, table.reference), table.ranking
        )


class TestScoreCorpus:
    def test_degenerate_images_rank_first(self, gratings):
        images = gratings.images.copy()
        images[7] = 128
        table = score_corpus(SampleSet(images, 10, gratings.labels))
        assert table.degenerate[7]
        assert table.ranking[0] == 7
        others = np.delete(table.scores, 7)
        assert table.scores[7] == pytest.approx(np.max(others) + 1.0)

    def test_parallel_matches_serial(self, gratings):
        subset = SampleSet(gratings.images[:40], 10)
        np.testing.assert_array_equal(
            extract_corpus_features(subset, n_jobs=1),
            extract_corpus_features(subset, n_jobs=2),
        )

    def test_csv_reproduces_ranking(self, gratings, tmp_path):
        table = score_corpus(gratings)
        path = tmp_path / "scores.csv"
        write_scores_csv(path, table, {"config_digest": "x"})
        restored = read_scores_csv(path)
        np.testing.assert_array_equal(restored.scores, table.scores)
        np.testing.assert_array_equal(restored.ranking, table.ranking)
