"""End-to-end CLI pipeline on the synthetic protocol: stage dependencies,
artifacts, figures, idempotence, replay determinism and ablation sweeps."""

import csv
import json
import os
import shutil

import pytest
import yaml

from plgmi.cli import main
from plgmi.selection import PseudoLabeledDataset


def tiny_manifest(out_root, run_id="t0", **extra):
    m = {
        "run_id": run_id,
        "out_root": out_root,
        "seed": 0,
        "deterministic": True,
        "dataset": {"name": "synthetic", "private_labels": [0, 1],
                    "public_labels": [2, 3], "image_shape": [1, 16, 16],
                    "n_per_class": 48},
        "target": {"architecture": "conv_tiny", "epochs": 4, "batch_size": 32,
                   "lr": 0.05, "width": 8},
        "eval": {"architecture": "vgg_small", "epochs": 3, "batch_size": 32,
                 "lr": 0.02, "width": 8, "train_on_full_data": False},
        "selection": {"n": 24, "score_kind": "probability"},
        "gan": {"latent_dim": 16, "base_ch": 8, "batch_size": 16,
                "g_lr": 2e-4, "d_lr": 2e-4, "betas": [0.0, 0.9],
                "alpha": 0.2, "inv_loss": "mm", "total_iters": 300,
                "d_steps": 1, "checkpoint_every": 300,
                "aug": {"crop_scale": [0.9, 1.0], "flip_prob": 0.5,
                        "rotation_degrees": 0.0, "jitter": 0.0}},
        "invert": {"restarts": 2, "iters": 30, "m": 2, "lr": 0.05,
                   "betas": [0.9, 0.999], "inv_loss": "mm",
                   "images_per_class": 2, "classes": None},
        "analyze": {"iters": 25, "losses": ["ce", "mm", "poincare"]},
    }
    for key, value in extra.items():
        m[key] = {**m[key], **value} if isinstance(value, dict) else value
    return m


def write_manifest(tmp_path, m):
    path = tmp_path / f"{m['run_id']}.yaml"
    path.write_text(yaml.safe_dump(m))
    return str(path)


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    """Full pipeline once; downstream tests inspect its artifacts."""
    root = tmp_path_factory.mktemp("cli")
    m = tiny_manifest(str(root / "runs"))
    cfg = write_manifest(root, m)
    status = main(["--config", cfg, "run"])
    assert status == 0
    return {"root": str(root / "runs" / "t0"), "config": cfg, "manifest": m,
            "tmp": root}


class TestDependencies:
    def test_invert_before_gan_is_dependency_error(self, tmp_path):
        cfg = write_manifest(tmp_path, tiny_manifest(str(tmp_path / "runs"), "dep0"))
        assert main(["--config", cfg, "invert"]) == 3

    def test_select_before_target_is_dependency_error(self, tmp_path):
        cfg = write_manifest(tmp_path, tiny_manifest(str(tmp_path / "runs"), "dep1"))
        assert main(["--config", cfg, "select"]) == 3


class TestPipelineArtifacts:
    def test_report_written(self, pipeline_run):
        path = os.path.join(pipeline_run["root"], "reports", "report.json")
        rep = json.loads(open(path).read())
        assert rep["n_total"] == 4  # 2 classes x 2 images
        assert 0.0 <= rep["attack_acc_top1"] <= 1.0
        assert rep["attack_acc_top5"] >= rep["attack_acc_top1"]
        assert os.path.exists(os.path.join(pipeline_run["root"], "reports", "report.txt"))

    def test_selection_file_has_exactly_n_entries(self, pipeline_run):
        dr = PseudoLabeledDataset.load(os.path.join(pipeline_run["root"], "selection.json"))
        assert dr.n == 24
        assert all(len(v) == 24 for v in dr.per_class.values())

    def test_figures_rendered_alongside_delimited_outputs(self, pipeline_run):
        figures = os.path.join(pipeline_run["root"], "figures")
        assert os.path.exists(os.path.join(figures, "gan_history.png"))
        assert os.path.exists(os.path.join(figures, "reconstructions.png"))
        assert os.path.exists(os.path.join(pipeline_run["root"], "gan_history.csv"))
        assert os.path.exists(os.path.join(pipeline_run["root"], "attacks", "index.csv"))

    def test_frozen_manifest_echo(self, pipeline_run):
        frozen = os.path.join(pipeline_run["root"], "manifest.frozen.json")
        payload = json.loads(open(frozen).read())
        assert payload["manifest"]["run_id"] == "t0"
        assert len(payload["config_hash"]) == 16

    def test_stage_idempotent_without_force(self, pipeline_run):
        target = os.path.join(pipeline_run["root"], "checkpoints", "target.ckpt")
        mtime = os.path.getmtime(target)
        assert main(["--config", pipeline_run["config"], "train-target"]) == 0
        assert os.path.getmtime(target) == mtime

    def test_select_n_flag_overrides_manifest(self, pipeline_run):
        assert main(["--config", pipeline_run["config"], "--force",
                     "select", "--n", "12"]) == 0
        dr = PseudoLabeledDataset.load(os.path.join(pipeline_run["root"], "selection.json"))
        assert dr.n == 12
        # restore the original selection for later tests
        assert main(["--config", pipeline_run["config"], "--force", "select"]) == 0

    def test_analyze_loss_traces_and_figure(self, pipeline_run):
        assert main(["--config", pipeline_run["config"], "analyze-loss"]) == 0
        traces = os.path.join(pipeline_run["root"], "traces")
        for loss_id in ("ce", "mm", "poincare"):
            path = os.path.join(traces, f"{loss_id}.csv")
            with open(path, newline="") as f:
                rows = list(csv.DictReader(f))
            assert len(rows) == 25
            assert float(rows[0]["grad_rescaled"]) == 1.0
            assert float(rows[0]["loss_rescaled"]) == 1.0
            if loss_id == "mm":
                # rescaled by a constant 2, so the whole series stays 1
                assert all(float(r["grad_rescaled"]) == 1.0 for r in rows)
        assert os.path.exists(os.path.join(pipeline_run["root"], "figures",
                                           "trend_curves.png"))

    def test_ablation_sweep_m_axis(self, pipeline_run):
        assert main(["--config", pipeline_run["config"],
                     "ablate", "--axis", "m", "--values", "1,2"]) == 0
        out = os.path.join(pipeline_run["root"], "ablation_m.csv")
        with open(out, newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["value"] for r in rows] == ["1", "2"]
        assert all(r["attack_acc"] != "" for r in rows)
        assert os.path.exists(os.path.join(pipeline_run["root"], "figures",
                                           "ablation_m.png"))
        # stage-2-only axis shares the upstream GAN checkpoint via links
        sub_root = os.path.join(os.path.dirname(pipeline_run["root"]), "t0_m_1")
        assert os.path.islink(os.path.join(sub_root, "checkpoints"))


class TestReplayDeterminism:
    def test_rerun_from_saved_manifest_is_byte_identical(self, tmp_path):
        m = tiny_manifest(str(tmp_path / "runs"), "replay",
                          gan={"total_iters": 60},
                          invert={"iters": 10, "images_per_class": 1})
        cfg = write_manifest(tmp_path, m)
        report = os.path.join(str(tmp_path / "runs"), "replay", "reports", "report.json")
        assert main(["--config", cfg, "run"]) == 0
        first = open(report, "rb").read()
        shutil.rmtree(os.path.join(str(tmp_path / "runs"), "replay"))
        assert main(["--config", cfg, "run"]) == 0
        assert open(report, "rb").read() == first
