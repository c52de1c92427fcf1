"""Gradient attacks on segmentation models: FGSM, BIM, and PGD.

All three are the same projected ascent loop on the per-pixel cross-entropy
loss; fgsm and bim are literal wrappers around pgd, so their documented
equivalences hold bitwise. Perturbations are measured per image (the norm
runs over each sample's C*H*W values), every iterate is projected back into
the epsilon-ball and clamped to the valid pixel range, and the attacked
model's parameters are frozen for the duration, so an attack can never
train the model it probes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward, softmax_cross_entropy
from .models import frozen

_NORMS = ("l2", "linf")
_INITS = ("zero", "random_in_ball")


@dataclass(frozen=True)
class AttackSpec:
    """Budget and schedule of a projected-gradient attack."""

    norm: str
    epsilon: float
    alpha: float
    steps: int = 10
    init: str = "zero"
    clamp_range: tuple[float, float] = (0.0, 1.0)

    def validate(self) -> None:
        if self.norm not in _NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; choose from {_NORMS}")
        if self.epsilon <= 0 or self.alpha <= 0:
            raise ValueError("epsilon and alpha must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.init not in _INITS:
            raise ValueError(f"unknown init {self.init!r}; choose from {_INITS}")
        lo, hi = self.clamp_range
        if not lo < hi:
            raise ValueError(f"clamp_range {self.clamp_range} must be increasing")

    @property
    def tag(self) -> str:
        return f"pgd-{self.norm}-eps{self.epsilon:g}-a{self.alpha:g}-k{self.steps}"


def _per_image_l2(delta: np.ndarray) -> np.ndarray:
    # norm over each sample's C*H*W block, shape (N,1,1,1) for broadcasting
    return np.sqrt((delta * delta).sum(axis=(1, 2, 3), keepdims=True))


def project(delta: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Project per-image perturbations onto the epsilon-ball of a norm.

    Linf clips each component; L2 rescales any sample whose norm exceeds
    epsilon (and leaves interior points untouched).
    """
    if norm not in _NORMS:
        raise ValueError(f"unknown norm {norm!r}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    delta = np.asarray(delta)
    squeeze = delta.ndim == 3
    if squeeze:
        delta = delta[None]
    if delta.ndim != 4:
        raise ValueError(f"expected (N,C,H,W) or (C,H,W) deltas, got {delta.shape}")
    if norm == "linf":
        out = np.clip(delta, -epsilon, epsilon)
    else:
        norms = _per_image_l2(delta)
        scale = np.where(norms > epsilon, epsilon / np.maximum(norms, 1e-12), 1.0)
        out = delta * scale
    return out[0] if squeeze else out


def _ce_loss(model, x: Tensor, target_onehot: np.ndarray) -> Tensor:
    return softmax_cross_entropy(model.forward(x), Tensor(target_onehot))


def input_gradient(model, images: np.ndarray, target_onehot: np.ndarray,
                   loss_fn=_ce_loss) -> np.ndarray:
    """Gradient of the loss w.r.t. the input pixels, parameters frozen."""
    with frozen(model):
        x = Tensor(images, requires_grad=True)
        backward(loss_fn(model, x, target_onehot))
    if x.grad is None or not np.isfinite(x.grad).all():
        raise NonFiniteError("attack received a non-finite input gradient")
    return x.grad


def pgd(model, images: np.ndarray, target_onehot: np.ndarray, spec: AttackSpec,
        rng=None, step_callback=None, loss_fn=_ce_loss) -> np.ndarray:
    """Projected gradient ascent on the loss within an epsilon-ball.

    ``images`` is (N,C,H,W) or a single (C,H,W); ``target_onehot`` matches
    the model's logits shape. Every iterate satisfies both the norm bound
    and the clamp range. ``step_callback(step, delta, x_adv)`` observes each
    completed iterate, with ``step`` counting from 1.
    ``rng`` seeds the random start when init="random_in_ball"
    (default: a fresh generator with seed 0). ``loss_fn(model, x, target)``
    may replace the cross-entropy objective.
    """
    spec.validate()
    images = np.asarray(images)
    squeeze = images.ndim == 3
    x0 = images[None].copy() if squeeze else images.copy()
    target = target_onehot[None] if squeeze else target_onehot

    if spec.init == "random_in_ball":
        rng = rng or np.random.default_rng(0)
        if spec.norm == "linf":
            delta = rng.uniform(-spec.epsilon, spec.epsilon, size=x0.shape)
        else:
            raw = rng.standard_normal(x0.shape)
            radius = rng.uniform(0.0, spec.epsilon, size=(x0.shape[0], 1, 1, 1))
            delta = raw / np.maximum(_per_image_l2(raw), 1e-12) * radius
        delta = project(delta, spec.norm, spec.epsilon)
    else:
        delta = np.zeros_like(x0)

    lo, hi = spec.clamp_range
    x_adv = np.clip(x0 + delta, lo, hi)
    for step in range(spec.steps):
        grad = input_gradient(model, x_adv, target, loss_fn=loss_fn)
        if spec.norm == "linf":
            move = spec.alpha * np.sign(grad)
        else:
            move = spec.alpha * grad / np.maximum(_per_image_l2(grad), 1e-12)
        delta = project(x_adv + move - x0, spec.norm, spec.epsilon)
        x_adv = np.clip(x0 + delta, lo, hi)
        if step_callback is not None:
            step_callback(step + 1, x_adv - x0, x_adv)
    return x_adv[0] if squeeze else x_adv


def fgsm(model, images, target_onehot, epsilon: float) -> np.ndarray:
    """Single-step sign attack: pgd with one Linf step of size epsilon."""
    spec = AttackSpec(norm="linf", epsilon=epsilon, alpha=epsilon, steps=1, init="zero")
    return pgd(model, images, target_onehot, spec)


def bim(model, images, target_onehot, epsilon: float, alpha: float,
        steps: int) -> np.ndarray:
    """Iterative sign attack: pgd with a zero start in the Linf ball."""
    spec = AttackSpec(norm="linf", epsilon=epsilon, alpha=alpha, steps=steps, init="zero")
    return pgd(model, images, target_onehot, spec)
