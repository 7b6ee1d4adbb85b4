"""Classifier zoo: inference contracts, training behavior, checkpoint IO."""

import pytest
import torch

from plgmi.classifiers import (ARCHITECTURES, Classifier, TrainConfig,
                               perfect_intensity_classifier, train_classifier)
from plgmi.data import ImageBatch, solid_intensity_dataset


@pytest.fixture(scope="module")
def tiny_clf():
    torch.manual_seed(0)
    net = ARCHITECTURES["conv_tiny"](1, 3)
    return Classifier("conv_tiny", 3, net, meta={"in_ch": 1})


class TestInference:
    def test_softmax_of_logits_is_probability_vector(self, tiny_clf):
        torch.manual_seed(1)
        x = torch.rand(8, 1, 16, 16)
        probs = tiny_clf.predict_probs(x)
        assert probs.shape == (8, 3)
        assert torch.allclose(probs.sum(dim=1), torch.ones(8), atol=1e-6)
        assert float(probs.min()) >= 0
        assert torch.allclose(probs, torch.softmax(tiny_clf.predict_logits(x), dim=1))

    def test_duplicated_rows_get_identical_logits(self, tiny_clf):
        torch.manual_seed(2)
        x = torch.rand(1, 1, 16, 16).repeat(3, 1, 1, 1)
        o = tiny_clf.predict_logits(x)
        assert torch.equal(o[0], o[1]) and torch.equal(o[1], o[2])

    def test_repeated_calls_bitwise_identical(self, tiny_clf):
        torch.manual_seed(3)
        x = torch.rand(4, 1, 16, 16)
        assert torch.equal(tiny_clf.predict_logits(x), tiny_clf.predict_logits(x))

    def test_feature_contracts(self, tiny_clf):
        torch.manual_seed(4)
        x = torch.rand(5, 1, 16, 16)
        f = tiny_clf.penultimate_features(x)
        assert f.shape == (5, tiny_clf.feature_dim)
        same = tiny_clf.penultimate_features(torch.cat([x[:1], x[:1]]))
        assert float(torch.dist(same[0], same[1])) == 0.0

    def test_accepts_image_batch(self, tiny_clf):
        batch = ImageBatch(torch.rand(2, 1, 16, 16))
        assert tiny_clf.predict_logits(batch).shape == (2, 3)

    def test_logits_differentiable(self, tiny_clf):
        x = torch.rand(2, 1, 16, 16, requires_grad=True)
        tiny_clf.logits(x).sum().backward()
        assert x.grad is not None


class TestTraining:
    def test_separable_toy_reaches_full_train_accuracy(self):
        batch = solid_intensity_dataset(K=2, n_per_class=50, seed=0)
        clf = train_classifier(batch, "conv_tiny",
                               TrainConfig(epochs=6, batch_size=32, lr=0.05, seed=0))
        assert clf.meta["train_accuracy"] == 1.0
        assert clf.K == 2

    def test_single_class_rejected(self):
        batch = ImageBatch(torch.rand(10, 1, 16, 16), torch.ones(10, dtype=torch.int64))
        with pytest.raises(ValueError, match="degenerate"):
            train_classifier(batch, "conv_tiny")

    def test_unlabeled_batch_rejected(self):
        with pytest.raises(ValueError):
            train_classifier(ImageBatch(torch.rand(4, 1, 16, 16)), "conv_tiny")

    def test_training_deterministic_given_seed(self):
        batch = solid_intensity_dataset(K=2, n_per_class=20, seed=1)
        cfg = TrainConfig(epochs=2, batch_size=16, seed=7)
        a = train_classifier(batch, "conv_tiny", cfg)
        b = train_classifier(batch, "conv_tiny", cfg)
        assert a.parameter_hash() == b.parameter_hash()


class TestCheckpointIO:
    def test_save_load_roundtrip(self, tmp_path, tiny_clf):
        path = str(tmp_path / "clf.ckpt")
        tiny_clf.save(path)
        back = Classifier.load(path)
        x = torch.rand(3, 1, 16, 16)
        assert torch.equal(back.predict_logits(x), tiny_clf.predict_logits(x))
        assert back.architecture == "conv_tiny" and back.K == 3
        assert (tmp_path / "clf.ckpt.json").exists()

    def test_parameter_hash_tracks_weights(self, tiny_clf):
        h0 = tiny_clf.parameter_hash()
        with torch.no_grad():
            tiny_clf.net.fc.bias.add_(0.1)
        h1 = tiny_clf.parameter_hash()
        with torch.no_grad():
            tiny_clf.net.fc.bias.sub_(0.1)
        assert h0 != h1


class TestIntensityNet:
    def test_perfect_on_toy_dataset(self):
        batch = solid_intensity_dataset(K=4, n_per_class=32, seed=0)
        clf = perfect_intensity_classifier(4)
        pred = clf.predict_logits(batch).argmax(dim=1) + 1
        assert (pred == batch.labels).float().mean() == 1.0
