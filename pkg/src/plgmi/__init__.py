"""Pseudo label-guided model inversion attack toolkit."""

from .augment import AugmentationPolicy, apply_augmentations
from .classifiers import Classifier, TrainConfig, train_classifier
from .data import DatasetSplit, ImageBatch, load_split, preprocess
from .gan import (ConditionalDiscriminator, ConditionalGenerator, GanConfig,
                  discriminator_loss, generator_loss, train_cgan)
from .losses import (cross_entropy_grad, cross_entropy_loss, max_margin_grad,
                     max_margin_loss, poincare_loss, record_trend)
from .metrics import attack_accuracy, build_report, compute_fid, knn_distance
from .reconstruct import AttackResult, ReconstructConfig, batch_attack, reconstruct
from .selection import PseudoLabeledDataset, assign_pseudo_labels, selection_summary

__version__ = "0.1.0"
