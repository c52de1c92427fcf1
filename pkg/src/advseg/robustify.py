"""Robust-dataset construction by representation inversion.

Each output image starts from a *different* source image (a seeded
derangement of the dataset) and is driven by normalized gradient descent
to match the target sample's penultimate representation under a frozen,
adversarially trained model. The labels never change: sample i keeps
mask i while its pixels are rebuilt from sample perm(i), so whatever the
inversion reconstructs is what the robust model actually encodes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import project
from .autodiff import NonFiniteError, Tensor, backward, mul, sub, sum_all
from .data import LabeledDataset
from .metrics import confusion_matrix  # noqa: F401  (re-export convenience)
from .models import SegModel, frozen, model_weights_hash


@dataclass(frozen=True)
class RobustifyConfig:
    steps: int = 100
    step_norm: float = 0.1
    seed: int = 0
    batch_size: int = 16
    ball_norm: str | None = None
    ball_epsilon: float | None = None

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_norm <= 0:
            raise ValueError("step_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if (self.ball_norm is None) != (self.ball_epsilon is None):
            raise ValueError("ball_norm and ball_epsilon must be set together")
        if self.ball_norm is not None:
            if self.ball_norm not in ("l2", "linf"):
                raise ValueError(f"unknown ball norm {self.ball_norm!r}")
            if self.ball_epsilon <= 0:
                raise ValueError("ball_epsilon must be positive")


def representation_distance(model: SegModel, images: np.ndarray,
                            target_repr: np.ndarray) -> np.ndarray:
    """Per-sample L2 distance between g(images) and a target representation."""
    with frozen(model):
        z = model.representation(Tensor(np.asarray(images))).data
    if z.shape != target_repr.shape:
        raise ValueError(f"representation {z.shape} vs target {target_repr.shape}")
    diff = (z - target_repr).reshape(len(z), -1)
    return np.sqrt((diff ** 2).sum(axis=1))


def _per_sample_l2(arr: np.ndarray) -> np.ndarray:
    return np.sqrt((arr.reshape(len(arr), -1) ** 2).sum(axis=1)).reshape(
        (len(arr),) + (1,) * (arr.ndim - 1))


def invert_representation(model: SegModel, init_images: np.ndarray,
                          target_repr: np.ndarray, config: RobustifyConfig,
                          step_callback=None) -> np.ndarray:
    """Drive images toward a target representation by normalized descent.

    The descent objective is the squared representation distance; because
    every step is renormalized per sample to length ``step_norm``, the
    iterates are identical to descending the unsquared distance, without
    its gradient singularity at zero. Pixels are clamped to [0,1] each
    step, and optionally projected back into a ball around the start.
    """
    config.validate()
    x = np.asarray(init_images).copy()
    x0 = x.copy()
    target = Tensor(target_repr)
    with frozen(model):
        for step in range(config.steps):
            xt = Tensor(x, requires_grad=True)
            diff = sub(model.representation(xt), target)
            backward(sum_all(mul(diff, diff)))
            if xt.grad is None or not np.isfinite(xt.grad).all():
                raise NonFiniteError(f"non-finite inversion gradient at step {step}")
            ghat = xt.grad / np.maximum(_per_sample_l2(xt.grad), 1e-12)
            x = x - config.step_norm * ghat
            if config.ball_norm is not None:
                delta = project(x - x0, config.ball_norm, config.ball_epsilon)
                x = x0 + delta
            x = np.clip(x, 0.0, 1.0)
            if step_callback is not None:
                step_callback(step + 1, x)
    return x


def pair_sources(n: int, rng) -> np.ndarray:
    """A seeded derangement: source index for each target, never itself."""
    if n < 2:
        raise ValueError("robustification needs at least two samples")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


@dataclass
class RobustifyResult:
    dataset: LabeledDataset
    pairing: np.ndarray
    initial_distance: np.ndarray
    final_distance: np.ndarray
    provenance: dict = field(default_factory=dict)


def robustify_sample(model: SegModel, image: np.ndarray, mask: np.ndarray,
                     config: RobustifyConfig, init_image: np.ndarray):
    """Rebuild one image from a chosen starting image; mask passes through.

    Returns ``(new_image, mask, initial_distance, final_distance)``.
    """
    with frozen(model):
        target = model.representation(Tensor(image[None])).data
    initial = representation_distance(model, init_image[None], target)[0]
    out = invert_representation(model, init_image[None], target, config)
    final = representation_distance(model, out, target)[0]
    return out[0], mask.copy(), initial, final


def robustify_dataset(model: SegModel, ds: LabeledDataset,
                      config: RobustifyConfig) -> RobustifyResult:
    """Rebuild every image in the dataset against its own representation.

    Sample order, masks, split tags, and the class taxonomy are carried
    over untouched; only pixels change. The result records the source
    pairing and per-sample representation distances before and after.
    """
    config.validate()
    n = len(ds)
    rng = np.random.default_rng((config.seed, 0x726F6275))
    pairing = pair_sources(n, rng)
    new_images = np.empty_like(ds.images)
    initial = np.empty(n)
    final = np.empty(n)
    for start in range(0, n, config.batch_size):
        sel = np.arange(start, min(start + config.batch_size, n))
        with frozen(model):
            target = model.representation(Tensor(ds.images[sel])).data
        init = ds.images[pairing[sel]]
        initial[sel] = representation_distance(model, init, target)
        out = invert_representation(model, init, target, config)
        final[sel] = representation_distance(model, out, target)
        new_images[sel] = out
    dataset = LabeledDataset(new_images, ds.masks.copy(), ds.split_tags.copy(),
                             ds.class_names)
    provenance = {
        "model_hash": model_weights_hash(model),
        "config": asdict(config),
        "mean_initial_distance": float(initial.mean()),
        "mean_final_distance": float(final.mean()),
    }
    return RobustifyResult(dataset=dataset, pairing=pairing,
                           initial_distance=initial, final_distance=final,
                           provenance=provenance)
