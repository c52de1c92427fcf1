"""The four-stage robustness protocol, runnable end to end from Python.

Stages: (1) standard training on the synthetic merged set, (2) attack
evaluation of the standard model, (3) adversarial training and its
evaluation under matched-budget attacks, (4) dataset robustification
against the adversarially trained model followed by standard training on
the rebuilt data. ``ProtocolScale`` pins every count, epoch, and step so
that two runs of the same scale and seed are bit-identical; ``FULL`` is
the desk-scale reference configuration and ``MINI`` a smoke-test size.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .attacks import AttackSpec
from .data import (LabeledDataset, SceneSpec, generate_dataset,
                   merge_datasets, split_dataset)
from .models import SegModel, build_model
from .robustify import RobustifyConfig, RobustifyResult, robustify_dataset
from .training import ExperimentRecord, TrainConfig, evaluate, train

LINF_EPSILON = 8 / 255
LINF_ALPHA = 2 / 255


@dataclass(frozen=True)
class ProtocolScale:
    primary_count: int = 480
    variant_count: int = 176
    split: tuple[int, int, int] = (440, 120, 96)
    image_size: int = 64
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 8
    adv_train_images: int = 256
    adv_val_images: int = 48
    adv_epochs: int = 8
    adv_attack_steps: int = 3
    eval_attack_steps: int = 10
    robustify_images: int = 96
    robustify_steps: int = 100
    robustify_step_norm: float = 0.1


FULL = ProtocolScale()
MINI = ProtocolScale(primary_count=24, variant_count=8, split=(20, 8, 4),
                     image_size=32, epochs=2, adv_train_images=8,
                     adv_val_images=4, adv_epochs=1, adv_attack_steps=1,
                     eval_attack_steps=2, robustify_images=4,
                     robustify_steps=2)


def linf_attack(steps: int, alpha: float = LINF_ALPHA) -> AttackSpec:
    return AttackSpec(norm="linf", epsilon=LINF_EPSILON, alpha=alpha, steps=steps)


def l2_attack_matched(steps: int, alpha: float = LINF_ALPHA) -> AttackSpec:
    """The matched-budget L2 attack: identical epsilon, alpha, and steps,
    only the norm changes. An L2 ball of a given radius sits inside the
    box of the same radius, so this is the constrained variant."""
    return AttackSpec(norm="l2", epsilon=LINF_EPSILON, alpha=alpha, steps=steps)


def build_protocol_dataset(scale: ProtocolScale, seed: int = 0) -> LabeledDataset:
    """Merged two-generator corpus with the scale's train/val/test split."""
    primary = generate_dataset(
        SceneSpec(seed=seed, image_size=scale.image_size), scale.primary_count)
    variant = generate_dataset(
        SceneSpec(seed=seed + 1, image_size=scale.image_size,
                  trail_width_range=(0.16, 0.30)), scale.variant_count)
    return split_dataset(merge_datasets(primary, variant), scale.split, seed=seed)


def take_subset(ds: LabeledDataset, n_train: int, n_val: int) -> LabeledDataset:
    """The first n train and n val samples, in dataset order."""
    idx = np.concatenate([ds.indices("train")[:n_train], ds.indices("val")[:n_val]])
    if len(idx) != n_train + n_val:
        raise ValueError(f"dataset too small for a {n_train}+{n_val} subset")
    return LabeledDataset(ds.images[idx], ds.masks[idx], ds.split_tags[idx],
                          ds.class_names)


def stage1_train(ds: LabeledDataset, architecture: str, scale: ProtocolScale,
                 seed: int = 0, checkpoint_dir: str | None = None,
                 verbose: bool = False):
    """Standard training at protocol scale; returns (model, record)."""
    model = build_model(architecture, num_classes=len(ds.class_names), seed=seed)
    config = TrainConfig(epochs=scale.epochs, lr=scale.lr,
                         batch_size=scale.batch_size, seed=seed)
    return train(model, ds, config, checkpoint_dir=checkpoint_dir, verbose=verbose)


def adversarial_train(ds: LabeledDataset, architecture: str,
                      scale: ProtocolScale, seed: int = 0,
                      checkpoint_dir: str | None = None,
                      verbose: bool = False,
                      base_model: SegModel | None = None):
    """Adversarial training on a budgeted subset; returns (model, record).

    When base_model is given it is copied and fine-tuned on attacked
    batches, which is how the stage is meant to be run: the adversarial
    budget here is a fraction of the standard one, far too small to grow
    a competent model from random weights. Training attacks use fewer,
    larger steps than evaluation attacks (the inner maximization only
    needs to reach the ball boundary).
    """
    subset = take_subset(ds, scale.adv_train_images, scale.adv_val_images)
    spec = linf_attack(scale.adv_attack_steps, alpha=2 * LINF_ALPHA)
    if base_model is not None:
        model = copy.deepcopy(base_model)
    else:
        model = build_model(architecture, num_classes=len(ds.class_names),
                            seed=seed)
    config = TrainConfig(epochs=scale.adv_epochs, lr=scale.lr,
                         batch_size=scale.batch_size, seed=seed, attack=spec)
    return train(model, subset, config, checkpoint_dir=checkpoint_dir,
                 verbose=verbose)


def training_attack(scale: ProtocolScale) -> AttackSpec:
    return linf_attack(scale.adv_attack_steps, alpha=2 * LINF_ALPHA)


def robustify_stage(model: SegModel, ds: LabeledDataset, scale: ProtocolScale,
                    seed: int = 0) -> RobustifyResult:
    """Rebuild the first robustify_images train samples against the model."""
    idx = ds.indices("train")[:scale.robustify_images]
    if len(idx) < scale.robustify_images:
        raise ValueError("train split smaller than the robustify budget")
    source = LabeledDataset(ds.images[idx], ds.masks[idx], ds.split_tags[idx],
                            ds.class_names)
    config = RobustifyConfig(steps=scale.robustify_steps,
                             step_norm=scale.robustify_step_norm, seed=seed)
    return robustify_dataset(model, source, config)


def robust_train(robust_ds: LabeledDataset, architecture: str,
                 scale: ProtocolScale, seed: int = 0,
                 checkpoint_dir: str | None = None, verbose: bool = False):
    """Standard training on a robustified set (usually train-only)."""
    model = build_model(architecture, num_classes=len(robust_ds.class_names),
                        seed=seed)
    config = TrainConfig(epochs=scale.epochs, lr=scale.lr,
                         batch_size=scale.batch_size, seed=seed)
    return train(model, robust_ds, config, checkpoint_dir=checkpoint_dir,
                 verbose=verbose)


def final_row(record: ExperimentRecord, split: str, attack_tag: str = "clean"):
    """Last-epoch record row for a split/tag, or None."""
    rows = record.select(split=split, attack_tag=attack_tag)
    return rows[-1] if rows else None
