"""Evaluation metrics: attack accuracy, KNN feature distance, Frechet distance
and report aggregation, with closed-form oracles."""

import json

import numpy as np
import pytest
import torch

from plgmi.classifiers import ARCHITECTURES, Classifier, perfect_intensity_classifier
from plgmi.data import DatasetSplit, ImageBatch, solid_intensity_dataset
from plgmi.metrics import (EvaluationReport, attack_accuracy, build_report,
                           compute_fid, frechet_distance, knn_distance)
from plgmi.reconstruct import AttackResult, RestartResult


def solid(level, shape=(1, 16, 16)):
    return torch.full(shape, float(level))


@pytest.fixture(scope="module")
def feature_clf():
    torch.manual_seed(0)
    net = ARCHITECTURES["conv_tiny"](1, 4, width=8)
    return Classifier("conv_tiny", 4, net, meta={"in_ch": 1})


class TestAttackAccuracy:
    def test_exact_copies_score_one(self, toy_target):
        batch = solid_intensity_dataset(K=4, n_per_class=4, noise=0.0)
        assert attack_accuracy(toy_target, batch, batch.labels) == 1.0

    def test_top_k_saturation(self, toy_target):
        torch.manual_seed(1)
        recons = torch.rand(6, 1, 16, 16)
        targets = torch.randint(1, 5, (6,))
        assert attack_accuracy(toy_target, recons, targets, k=4) == 1.0
        assert attack_accuracy(toy_target, recons, targets, k=9) == 1.0

    def test_top5_at_least_top1(self, toy_target):
        torch.manual_seed(2)
        for _ in range(10):
            recons = torch.rand(8, 1, 16, 16)
            targets = torch.randint(1, 5, (8,))
            top1 = attack_accuracy(toy_target, recons, targets, k=1)
            top5 = attack_accuracy(toy_target, recons, targets, k=5)
            assert top5 >= top1

    def test_empty_batch_rejected(self, toy_target):
        with pytest.raises(ValueError):
            attack_accuracy(toy_target, torch.zeros(0, 1, 16, 16), torch.zeros(0))


class TestKnnDistance:
    def test_identical_image_gives_zero(self, toy_target):
        x = solid(0.4)[None]
        assert knn_distance(toy_target, x, x) == 0.0

    def test_hand_computed_toy(self, toy_target):
        # IntensityNet features are mean intensities, so distances are scalar gaps
        recons = torch.stack([solid(0.1), solid(0.5)])
        private = torch.stack([solid(0.2), solid(0.8), solid(0.45)])
        # mins: |0.1-0.2| = 0.1 and |0.5-0.45| = 0.05 -> mean 0.075
        val = knn_distance(toy_target, recons, private)
        assert val == pytest.approx(0.075, abs=1e-6)

    def test_adding_private_images_never_increases(self, toy_target):
        torch.manual_seed(3)
        recons = torch.rand(5, 1, 16, 16)
        private = torch.rand(6, 1, 16, 16)
        base = knn_distance(toy_target, recons, private)
        extended = knn_distance(toy_target, recons,
                                torch.cat([private, torch.rand(4, 1, 16, 16)]))
        assert extended <= base + 1e-8

    def test_empty_private_set_rejected(self, toy_target):
        with pytest.raises(ValueError):
            knn_distance(toy_target, torch.rand(2, 1, 16, 16),
                         torch.zeros(0, 1, 16, 16))


class TestFrechetDistance:
    def test_identical_moments_give_zero(self):
        rng = np.random.default_rng(0)
        mu = rng.standard_normal(6)
        a = rng.standard_normal((6, 6))
        sigma = a @ a.T + np.eye(6)
        assert frechet_distance(mu, sigma, mu, sigma) < 1e-6

    def test_equal_covariance_closed_form(self):
        # with equal covariances the distance reduces to the squared mean gap
        rng = np.random.default_rng(1)
        for dim in (2, 8):
            mu1 = rng.standard_normal(dim)
            delta = rng.standard_normal(dim)
            a = rng.standard_normal((dim, dim))
            sigma = a @ a.T + np.eye(dim)
            val = frechet_distance(mu1, sigma, mu1 + delta, sigma)
            assert val == pytest.approx(float(delta @ delta), rel=1e-3)

    def test_non_negative(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            m1, m2 = rng.standard_normal(4), rng.standard_normal(4)
            a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
            assert frechet_distance(m1, a @ a.T, m2, b @ b.T) >= 0


class TestComputeFid:
    def test_self_distance_is_zero(self, feature_clf):
        torch.manual_seed(4)
        x = torch.rand(80, 1, 16, 16)
        fid, _ = compute_fid(x, x, feature_clf)
        assert fid <= 1e-6

    def test_symmetric(self, feature_clf):
        torch.manual_seed(5)
        a, b = torch.rand(60, 1, 16, 16), torch.rand(60, 1, 16, 16) * 0.5
        ab, _ = compute_fid(a, b, feature_clf)
        ba, _ = compute_fid(b, a, feature_clf)
        assert ab == pytest.approx(ba, abs=1e-5)

    def test_small_sample_warning(self, feature_clf):
        x = torch.rand(4, 1, 16, 16)
        _, warnings = compute_fid(x, x, feature_clf)
        assert any("small sample" in w for w in warnings)


def _fake_result(c, level, seed=0):
    x = solid(level)
    restart = RestartResult(seed, torch.zeros(4), -1.0, [-1.0])
    return AttackResult(c, [restart], 0, torch.zeros(4), x, seeds=[seed])


@pytest.fixture(scope="module")
def private_split():
    batch = solid_intensity_dataset(K=4, n_per_class=16, seed=0)
    return DatasetSplit(private=batch, public=ImageBatch(batch.values.clone()),
                        K=4, image_shape=(1, 16, 16))


class TestBuildReport:
    CONFIG = {"target_architecture": "conv_tiny"}

    def test_spreadsheet_oracle(self, toy_target, private_split):
        # class levels are 0.125/0.375/0.625/0.875; two hits, one miss
        results = [_fake_result(1, 0.125), _fake_result(2, 0.375),
                   _fake_result(3, 0.125)]
        rep = build_report(results, toy_target, private_split, config=self.CONFIG)
        assert rep.attack_acc_top1 == pytest.approx(2 / 3)
        assert rep.attack_acc_top5 == 1.0  # K = 4 < 5 saturates top-5
        assert rep.n_success == 2 and rep.n_total == 3
        assert rep.top1_std == 0.0  # single seed group
        assert rep.fid is not None and np.isfinite(rep.fid)
        assert rep.knn_dist >= 0

    def test_all_failures_report_absent_fid(self, toy_target, private_split):
        results = [_fake_result(1, 0.875), _fake_result(2, 0.875)]
        rep = build_report(results, toy_target, private_split, config=self.CONFIG)
        assert rep.attack_acc_top1 == 0.0
        assert rep.fid is None and rep.n_success == 0
        assert any("FID absent" in w for w in rep.warnings)

    def test_seed_group_std(self, toy_target, private_split):
        # seed 0 hits both, seed 1 hits one of two -> std over [1.0, 0.5]
        results = [_fake_result(1, 0.125, seed=0), _fake_result(2, 0.375, seed=0),
                   _fake_result(1, 0.125, seed=1), _fake_result(2, 0.875, seed=1)]
        rep = build_report(results, toy_target, private_split, config=self.CONFIG)
        assert rep.top1_std == pytest.approx(np.std([1.0, 0.5]))

    def test_matching_architecture_rejected(self, toy_target, private_split):
        with pytest.raises(ValueError, match="differ"):
            build_report([_fake_result(1, 0.125)], toy_target, private_split,
                         config={"target_architecture": "intensity"})

    def test_empty_results_rejected(self, toy_target, private_split):
        with pytest.raises(ValueError):
            build_report([], toy_target, private_split)

    def test_class_map_translates_labels(self, private_split):
        # evaluator with 8 classes; attack classes 1..4 map to odd evaluator labels
        eval_model = perfect_intensity_classifier(8)
        eval_model.architecture = "intensity8"
        # attack class k at level (k - 0.5) / 4 = (2k - 1 - 0.5) / 8, evaluator class 2k - 1
        results = [_fake_result(k, (k - 0.5) / 4) for k in range(1, 5)]
        rep = build_report(results, eval_model, private_split, config=self.CONFIG,
                           class_map={k: 2 * k - 1 for k in range(1, 5)})
        assert rep.attack_acc_top1 == 1.0

    def test_serialization(self, toy_target, private_split, tmp_path):
        rep = build_report([_fake_result(1, 0.125)], toy_target, private_split,
                           config=self.CONFIG)
        path = tmp_path / "report.json"
        payload = rep.to_json(str(path))
        loaded = json.loads(path.read_text())
        assert json.loads(payload) == loaded
        assert loaded["attack_acc_top1"] == rep.attack_acc_top1
        table = rep.format_table()
        assert "Attack Acc" in table and "KNN Dist" in table
