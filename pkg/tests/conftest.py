"""Shared fixtures: the solid-intensity toy protocol and one trained toy GAN
reused across the GAN, reconstruction and acceptance tests."""

import os

import pytest
import torch

from plgmi.augment import AugmentationPolicy
from plgmi.classifiers import perfect_intensity_classifier
from plgmi.data import load_split, solid_intensity_dataset
from plgmi.gan import GanConfig, train_cgan

DATA_ROOT = os.environ.get("PLG_DATA_ROOT", "data")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_batch():
    return solid_intensity_dataset(K=4, n_per_class=64, shape=(1, 16, 16), seed=0)


@pytest.fixture(scope="session")
def toy_target():
    return perfect_intensity_classifier(4)


@pytest.fixture(scope="session")
def toy_gan_config():
    return GanConfig(latent_dim=16, base_ch=8, batch_size=16, total_iters=1000,
                     alpha=0.5, inv_loss="mm", policy=AugmentationPolicy.identity(),
                     seed=0)


@pytest.fixture(scope="session")
def trained_toy_gan(toy_batch, toy_target, toy_gan_config):
    """1,000-iteration toy training run; also records target hashes around it."""
    hash_before = toy_target.parameter_hash()
    state = train_cgan(toy_batch.values, toy_batch.labels, toy_target, toy_gan_config)
    return {"state": state,
            "generator": state.generator,
            "discriminator": state.discriminator,
            "config": toy_gan_config,
            "target_hash_before": hash_before,
            "target_hash_after": toy_target.parameter_hash()}


def dataset_available(name):
    """True when the raw torchvision files for ``name`` are present locally."""
    try:
        load_split(name, {"private_labels": [0, 1, 2, 3, 4],
                          "public_labels": [5, 6, 7, 8, 9]},
                   data_root=DATA_ROOT)
        return True
    except (FileNotFoundError, ValueError):
        return False
