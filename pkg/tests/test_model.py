import mpmath
import msgspec
import numpy as np
import pytest
import torch
from torch.func import functional_call

from pq_multilabel import model as model_module
from pq_multilabel.config import ClassifierConfig, DuqConfig, TrainHyper
from pq_multilabel.data_io import read_csv, save_checkpoint, synthetic_dataset
from pq_multilabel.errors import ConfigurationError, TrainingError, ValidationError
from pq_multilabel.model import (
    _stochastic_passes,
    build_classifier,
    duq_kernels,
    duq_predict,
    entropy,
    forward,
    mc_dropout_predict,
    predict,
    softmax,
    train,
    write_training_log,
)
from pq_multilabel.pool import TrainPair


def tiny_images(rng, n=6):
    return rng.integers(0, 256, size=(n, 3, 8, 8), dtype=np.uint8)


@pytest.fixture
def two_class():
    """Horizontal against vertical gratings at 16x16."""
    train_set = synthetic_dataset(seed=0, n=400, num_classes=2, side=16)
    test_set = synthetic_dataset(seed=1, n=100, num_classes=2, side=16)
    cfg = ClassifierConfig(
        input_shape=(3, 16, 16), conv_channels=(8, 16), dense_width=32, num_classes=2
    )
    return train_set, test_set, cfg


def clean_pairs(samples):
    return [TrainPair(i, int(y), 0) for i, y in enumerate(samples.labels)]


class TestBuild:
    def test_zero_head_is_uniform(self, tiny_cfg, rng):
        cfg = msgspec.structs.replace(tiny_cfg, zero_head=True)
        probs = predict(build_classifier(cfg), tiny_images(rng))
        np.testing.assert_allclose(probs, 1.0 / 3.0, atol=1e-12)

    def test_same_seed_same_weights(self, tiny_cfg):
        a, b = build_classifier(tiny_cfg), build_classifier(tiny_cfg)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_seed_changes_weights(self, tiny_cfg):
        a = build_classifier(tiny_cfg)
        b = build_classifier(msgspec.structs.replace(tiny_cfg, seed=1))
        assert not torch.equal(a.dense.weight, b.dense.weight)

    def test_does_not_touch_global_rng(self, tiny_cfg):
        torch.manual_seed(7)
        expected = torch.rand(3)
        torch.manual_seed(7)
        build_classifier(tiny_cfg)
        assert torch.equal(torch.rand(3), expected)

    def test_shapes(self, tiny_cfg, rng):
        features, logits = forward(build_classifier(tiny_cfg), tiny_images(rng, 4))
        assert features.shape == (4, 5)
        assert logits.shape == (4, 3)
        assert features.dtype == logits.dtype == np.float64

    def test_input_mismatch(self, tiny_cfg, rng):
        images = rng.integers(0, 256, size=(2, 3, 16, 16), dtype=np.uint8)
        with pytest.raises(ValidationError):
            predict(build_classifier(tiny_cfg), images)

    def test_side_must_divide(self, tiny_cfg):
        with pytest.raises(ConfigurationError):
            build_classifier(msgspec.structs.replace(tiny_cfg, input_shape=(3, 10, 10)))


class TestGradients:
    def test_input_gradients(self, tiny_cfg, rng):
        model = build_classifier(tiny_cfg)
        x = torch.from_numpy(rng.normal(size=(2, 3, 8, 8))).requires_grad_()
        assert torch.autograd.gradcheck(
            lambda x: model(x)[1], (x,), eps=1e-6, atol=1e-6, rtol=1e-4
        )

    @pytest.mark.parametrize("duq", [False, True])
    def test_all_parameter_gradients(self, tiny_cfg, rng, duq):
        model = build_classifier(tiny_cfg, DuqConfig(embedding_size=4) if duq else None)
        x = torch.from_numpy(rng.normal(size=(3, 3, 8, 8)))
        named = dict(model.named_parameters())
        names = list(named)
        assert any(name.startswith("convs.") for name in names)
        assert any(name.startswith("dense.") for name in names)
        params = tuple(named[name].detach().clone().requires_grad_() for name in names)

        def outputs(*values):
            return functional_call(model, dict(zip(names, values)), (x,))[1]

        assert torch.autograd.gradcheck(outputs, params, eps=1e-6, atol=1e-6, rtol=1e-4)


class TestSoftmax:
    def test_matches_high_precision(self, rng):
        logits = rng.normal(scale=5.0, size=(20, 7))
        probs = softmax(logits)
        for row, p in zip(logits, probs):
            with mpmath.workdps(50):
                exps = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
                total = mpmath.fsum(exps)
                expected = [float(e / total) for e in exps]
            np.testing.assert_allclose(p, expected, rtol=0, atol=1e-12)

    def test_large_logits(self):
        probs = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
        np.testing.assert_allclose(probs, [[0.5, 0.5, 0.0]])


class TestMcDropout:
    def test_zero_dropout_rejected(self, tiny_cfg, rng):
        model = build_classifier(msgspec.structs.replace(tiny_cfg, dropout_p=0.0))
        with pytest.raises(ConfigurationError):
            mc_dropout_predict(model, tiny_images(rng))

    def test_duq_rejected(self, tiny_cfg, rng):
        model = build_classifier(tiny_cfg, DuqConfig(embedding_size=4))
        with pytest.raises(ConfigurationError):
            mc_dropout_predict(model, tiny_images(rng))

    def test_rows_sum_to_one(self, tiny_cfg, rng):
        model = build_classifier(tiny_cfg)
        probs = mc_dropout_predict(model, tiny_images(rng), samples=5)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_single_pass_without_drop_is_deterministic(self, tiny_cfg, rng):
        model = build_classifier(tiny_cfg)
        images = tiny_images(rng)
        model.dropout.p = 0.0
        np.testing.assert_array_equal(
            mc_dropout_predict(model, images, samples=1), predict(model, images)
        )

    def test_seeded(self, tiny_cfg, rng):
        model = build_classifier(tiny_cfg)
        images = tiny_images(rng)
        a = mc_dropout_predict(model, images, samples=4, seed=3)
        b = mc_dropout_predict(model, images, samples=4, seed=3)
        np.testing.assert_array_equal(a, b)

    def test_trained_passes_vary_around_stable_mean(self, gratings):
        cfg = ClassifierConfig(
            input_shape=(3, 32, 32),
            conv_channels=(4, 8),
            dense_width=16,
            num_classes=10,
            dropout_p=0.5,
        )
        model = train(
            clean_pairs(gratings), gratings, cfg, TrainHyper(epochs=1, batch_size=20)
        )
        images = gratings.images[:20]
        passes = _stochastic_passes(model, images, samples=10, seed=0)
        assert passes.shape == (10, 20, 10)
        assert passes.var(axis=0).max() > 0.0
        a = mc_dropout_predict(model, images, samples=200, seed=1)
        b = mc_dropout_predict(model, images, samples=200, seed=2)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(a, b, atol=0.1)


class TestDuq:
    @pytest.fixture
    def duq_model(self, tiny_cfg):
        return build_classifier(tiny_cfg, DuqConfig(embedding_size=4, length_scale=0.5))

    def test_kernels_match_loops(self, duq_model, rng):
        features = rng.normal(size=(4, 5))
        W = duq_model.head.W.detach().numpy()
        e = duq_model.head.centroids.detach().numpy()
        kernels = duq_kernels(duq_model, features)
        for n in range(4):
            for c in range(3):
                z = W[c] @ features[n]
                expected = np.exp(-np.mean((z - e[c]) ** 2) / (2 * 0.5**2))
                assert kernels[n, c] == pytest.approx(expected, rel=0, abs=1e-10)

    def test_torch_head_agrees(self, duq_model, rng):
        images = tiny_images(rng)
        features, kernels = forward(duq_model, images)
        np.testing.assert_allclose(
            duq_kernels(duq_model, features), kernels, atol=1e-12
        )

    def test_kernel_one_at_centroid(self, duq_model):
        f = np.linspace(0.1, 0.5, 5)
        with torch.no_grad():
            duq_model.head.centroids[1] = duq_model.head.W[1] @ torch.from_numpy(f)
        assert duq_kernels(duq_model, f[None])[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_zero_maps_are_uniform(self, duq_model, rng):
        with torch.no_grad():
            duq_model.head.W.zero_()
            duq_model.head.centroids.zero_()
        prediction = duq_predict(duq_model, tiny_images(rng))
        np.testing.assert_allclose(prediction.kernels, 1.0)
        np.testing.assert_allclose(prediction.probs, 1.0 / 3.0)
        np.testing.assert_allclose(entropy(prediction.probs), np.log2(3))

    def test_underflow_falls_back_to_uniform(self, duq_model, rng):
        with torch.no_grad():
            duq_model.head.centroids.fill_(1e6)
        prediction = duq_predict(duq_model, tiny_images(rng))
        assert prediction.underflow.all()
        np.testing.assert_allclose(prediction.probs, 1.0 / 3.0)

    def test_predict_rejects_duq(self, duq_model, rng):
        with pytest.raises(ConfigurationError):
            predict(duq_model, tiny_images(rng))


class TestEntropy:
    def test_one_hot(self):
        assert entropy(np.array([0.0, 1.0, 0.0])) == 0.0

    def test_uniform(self):
        assert entropy(np.full(10, 0.1)) == pytest.approx(np.log2(10))

    def test_bounds(self, rng):
        p = rng.dirichlet(np.ones(5), size=100)
        h = entropy(p)
        assert np.all(h >= 0.0) and np.all(h <= np.log2(5) + 1e-12)


class TestTrain:
    @pytest.mark.slow
    def test_learns_orientation(self, two_class):
        train_set, test_set, cfg = two_class
        hyper = TrainHyper(epochs=8, batch_size=32)
        model = train(clean_pairs(train_set), train_set, cfg, hyper)
        predicted = predict(model, test_set.images).argmax(axis=1)
        accuracy = np.mean(predicted == test_set.labels)
        assert accuracy >= 0.95

    def test_conflicting_labels_split_the_mass(self, two_class):
        train_set, _, cfg = two_class
        cfg = msgspec.structs.replace(cfg, zero_head=True)
        pairs = [
            TrainPair(i, label, label)
            for i in range(len(train_set))
            for label in (0, 1)
        ]
        model = train(pairs, train_set, cfg, TrainHyper(epochs=3, batch_size=32))
        probs = predict(model, train_set.images[:50])
        assert np.all(np.abs(probs[:, 0] - probs[:, 1]) < 0.2)

    def test_zero_epochs_returns_initial_model(self, tiny_cfg):
        samples = synthetic_dataset(seed=0, n=12, num_classes=3, side=8)
        model = train(clean_pairs(samples), samples, tiny_cfg, TrainHyper(epochs=0))
        assert save_checkpoint(model) == save_checkpoint(build_classifier(tiny_cfg))
        assert model.history == []

    def test_bit_identical_reruns(self, tiny_cfg):
        samples = synthetic_dataset(seed=0, n=30, num_classes=3, side=8)
        hyper = TrainHyper(epochs=2, batch_size=8)
        a = train(clean_pairs(samples), samples, tiny_cfg, hyper)
        b = train(clean_pairs(samples), samples, tiny_cfg, hyper)
        assert save_checkpoint(a) == save_checkpoint(b)
        assert a.history == b.history

    def test_empty_pairs(self, tiny_cfg):
        samples = synthetic_dataset(seed=0, n=12, num_classes=3, side=8)
        with pytest.raises(ValidationError):
            train([], samples, tiny_cfg, TrainHyper())

    def test_image_size_mismatch(self, tiny_cfg, gratings):
        with pytest.raises(ValidationError):
            train(clean_pairs(gratings), gratings, tiny_cfg, TrainHyper(epochs=1))

    def test_non_finite_loss(self, tiny_cfg, monkeypatch):
        samples = synthetic_dataset(seed=0, n=12, num_classes=3, side=8)
        monkeypatch.setattr(
            model_module.F, "cross_entropy", lambda out, y: out.sum() * float("nan")
        )
        with pytest.raises(TrainingError, match="epoch 1, batch 1"):
            train(clean_pairs(samples), samples, tiny_cfg, TrainHyper(epochs=1))

    def test_training_log(self, tiny_cfg, tmp_path):
        samples = synthetic_dataset(seed=0, n=24, num_classes=3, side=8)
        model = train(clean_pairs(samples), samples, tiny_cfg, TrainHyper(epochs=3))
        assert [h.epoch for h in model.history] == [1, 2, 3]
        path = tmp_path / "train_log.csv"
        write_training_log(path, model.history, {"head": "vanilla"})
        meta, rows = read_csv(path)
        assert meta == {"head": "vanilla"}
        assert float(rows[-1]["loss"]) == model.history[-1].loss

    def test_duq_training(self, tiny_cfg):
        samples = synthetic_dataset(seed=0, n=30, num_classes=3, side=8)
        before = build_classifier(tiny_cfg, DuqConfig(embedding_size=4)).head.centroids
        model = train(
            clean_pairs(samples),
            samples,
            tiny_cfg,
            TrainHyper(epochs=2, batch_size=10),
            head="duq",
            duq_cfg=DuqConfig(embedding_size=4),
        )
        assert model.is_duq
        assert torch.all(torch.isfinite(model.head.centroids))
        assert not torch.equal(model.head.centroids, before)
        probs = duq_predict(model, samples.images).probs
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_unknown_head(self, tiny_cfg):
        samples = synthetic_dataset(seed=0, n=12, num_classes=3, side=8)
        with pytest.raises(ConfigurationError):
            train(
                clean_pairs(samples), samples, tiny_cfg, TrainHyper(), head="mc_dropout"
            )
