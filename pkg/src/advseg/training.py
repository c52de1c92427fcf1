"""Training loop, evaluation, and per-epoch experiment records.

Training is plain mini-batch Adam on the per-pixel cross-entropy. When an
attack spec is present every batch is replaced by its attacked version
before the step (optionally alongside the clean batch), which makes the
loop the inner-maximization form of adversarial training. All shuffling,
augmentation, and attack randomness flows from the config seed, so a run
is exactly repeatable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, pgd
from .autodiff import AdamState, NonFiniteError, Tensor, adam_step, backward, \
    softmax_cross_entropy
from .data import LabeledDataset, augment, one_hot
from .metrics import MetricReport, confusion_matrix, iou_from_confusion
from .models import SegModel, frozen, save_checkpoint

RECORD_COLUMNS = ("epoch", "split", "loss", "miou", "pixel_acc", "attack_tag")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    augment: bool = True
    attack: AttackSpec | None = None
    mix_clean: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.attack is not None:
            self.attack.validate()
        if self.mix_clean and self.attack is None:
            raise ValueError("mix_clean requires an attack spec")


@dataclass
class RecordRow:
    epoch: int
    split: str
    loss: float
    miou: float
    pixel_acc: float
    attack_tag: str


@dataclass
class ExperimentRecord:
    """Per-epoch metric rows plus serialization helpers."""

    rows: list[RecordRow] = field(default_factory=list)

    def add(self, **kwargs) -> None:
        self.rows.append(RecordRow(**kwargs))

    def csv_text(self) -> str:
        lines = [",".join(RECORD_COLUMNS)]
        for r in self.rows:
            lines.append(f"{r.epoch},{r.split},{r.loss:.6f},{r.miou:.6f},"
                         f"{r.pixel_acc:.6f},{r.attack_tag}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(self.csv_text())
        os.replace(tmp, path)

    def select(self, split: str | None = None, attack_tag: str | None = None):
        out = self.rows
        if split is not None:
            out = [r for r in out if r.split == split]
        if attack_tag is not None:
            out = [r for r in out if r.attack_tag == attack_tag]
        return out

    def epoch_losses(self, split: str = "train") -> list[float]:
        return [r.loss for r in self.select(split=split)]

    def summary_markdown(self) -> str:
        if not self.rows:
            return "(no records)\n"
        last = max(r.epoch for r in self.rows)
        lines = ["| split | attack | loss | mIoU | pixel acc |",
                 "|-------|--------|------|------|-----------|"]
        for r in self.rows:
            if r.epoch == last:
                lines.append(f"| {r.split} | {r.attack_tag} | {r.loss:.2f} "
                             f"| {r.miou:.2f} | {r.pixel_acc:.2f} |")
        return f"Final epoch {last}:\n\n" + "\n".join(lines) + "\n"


def _batches(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def evaluate(model: SegModel, dataset: LabeledDataset, split: str | None = None,
             attack: AttackSpec | None = None, batch_size: int = 8,
             rng=None) -> MetricReport:
    """Aggregate loss/mIoU/pixel-accuracy over a split, optionally under attack.

    Scores come from one confusion matrix over all pixels, so batch size
    cannot change the result. The model is left untouched: parameters are
    frozen for the duration and attacks run on copies of the images.
    """
    idx = dataset.indices(split) if split is not None else np.arange(len(dataset))
    if len(idx) == 0:
        raise ValueError(f"no samples in split {split!r}")
    num_classes = len(dataset.class_names)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    loss_sum = 0.0
    pixels = 0
    correct = 0
    for batch in _batches(idx, batch_size):
        images = dataset.images[batch]
        masks = dataset.masks[batch]
        target = one_hot(masks, num_classes)
        if attack is not None:
            images = pgd(model, images, target, attack, rng=rng)
        with frozen(model):
            logits = model.forward(Tensor(images))
            loss = softmax_cross_entropy(logits, Tensor(target))
        preds = logits.data.argmax(axis=1)
        cm += confusion_matrix(preds, masks, num_classes)
        npix = masks.size
        loss_sum += loss.item() * npix
        pixels += npix
        correct += int((preds == masks).sum())
    miou, per_class = iou_from_confusion(cm)
    return MetricReport(
        mean_iou=miou,
        per_class_iou=per_class,
        pixel_accuracy=correct / pixels,
        mean_loss=loss_sum / pixels,
        attack_tag=attack.tag if attack is not None else "clean",
        image_count=len(idx),
    )


def train(model: SegModel, dataset: LabeledDataset, config: TrainConfig,
          checkpoint_dir: str | None = None, verbose: bool = False):
    """Fit the model on the dataset's train split; returns (model, record).

    The model is updated in place. Per-epoch rows cover the training pass
    (measured on the batches as trained, so under attack when adversarial)
    and the val split, clean plus attacked when an attack is configured.
    With ``checkpoint_dir``, the best-val-mIoU weights land in
    ``<dir>/best`` and the final weights in ``<dir>/final``.
    """
    config.validate()
    train_idx = dataset.indices("train")
    if len(train_idx) == 0:
        raise ValueError("dataset has no train split")
    has_val = len(dataset.indices("val")) > 0
    num_classes = len(dataset.class_names)
    if num_classes != model.num_classes:
        raise ValueError(f"model predicts {model.num_classes} classes, "
                         f"dataset defines {num_classes}")

    rng = np.random.default_rng((config.seed, 0x7261494E))
    params = model.parameters()
    state = AdamState([p.data for p in params])
    record = ExperimentRecord()
    train_tag = config.attack.tag if config.attack is not None else "clean"
    best_miou = -1.0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_idx)
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        loss_sum = 0.0
        pixels = 0
        correct = 0
        for bidx, batch in enumerate(_batches(order, config.batch_size)):
            images = dataset.images[batch].copy()
            masks = dataset.masks[batch].copy()
            if config.augment:
                for j in range(len(batch)):
                    images[j], masks[j] = augment(images[j], masks[j], rng)
            target = one_hot(masks, num_classes)
            if config.attack is not None:
                attacked = pgd(model, images, target, config.attack, rng=rng)
                if config.mix_clean:
                    images = np.concatenate([images, attacked])
                    target = np.concatenate([target, target])
                    masks = np.concatenate([masks, masks])
                else:
                    images = attacked

            model.zero_grad()
            try:
                logits = model.forward(Tensor(images))
                loss = softmax_cross_entropy(logits, Tensor(target))
                backward(loss)
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"training diverged at epoch {epoch}, batch {bidx}: {exc}") from exc
            adam_step([p.data for p in params], [p.grad for p in params],
                      state, lr=config.lr)

            preds = logits.data.argmax(axis=1)
            cm += confusion_matrix(preds, masks, num_classes)
            loss_sum += loss.item() * masks.size
            pixels += masks.size
            correct += int((preds == masks).sum())

        miou, _ = iou_from_confusion(cm)
        train_loss = loss_sum / pixels
        record.add(epoch=epoch, split="train", loss=train_loss, miou=miou,
                   pixel_acc=correct / pixels, attack_tag=train_tag)
        monitor = miou
        if has_val:
            val_clean = evaluate(model, dataset, "val", batch_size=config.batch_size)
            record.add(epoch=epoch, split="val", loss=val_clean.mean_loss,
                       miou=val_clean.mean_iou, pixel_acc=val_clean.pixel_accuracy,
                       attack_tag="clean")
            monitor = val_clean.mean_iou
            if config.attack is not None:
                val_adv = evaluate(model, dataset, "val", attack=config.attack,
                                   batch_size=config.batch_size, rng=rng)
                record.add(epoch=epoch, split="val", loss=val_adv.mean_loss,
                           miou=val_adv.mean_iou, pixel_acc=val_adv.pixel_accuracy,
                           attack_tag=val_adv.attack_tag)
                monitor = val_adv.mean_iou
        if verbose:
            print(f"epoch {epoch:3d}  train loss {train_loss:.4f}"
                  f"  monitor miou {monitor:.4f}", flush=True)
        if checkpoint_dir is not None and monitor > best_miou:
            best_miou = monitor
            save_checkpoint(model, os.path.join(checkpoint_dir, "best"))

    if checkpoint_dir is not None:
        save_checkpoint(model, os.path.join(checkpoint_dir, "final"))
    return model, record
