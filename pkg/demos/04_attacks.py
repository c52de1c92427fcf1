"""Attack a quickly-trained model with FGSM, BIM, and PGD and watch the
segmentation quality collapse.

Run: python3 demos/04_attacks.py   (a couple of minutes on one core)
"""

import numpy as np

from advseg import (AttackSpec, SceneSpec, Tensor, TrainConfig, bim,
                    build_model, confusion_matrix, evaluate, fgsm,
                    generate_dataset, iou_from_confusion, one_hot, pgd,
                    split_dataset, train)


def batch_miou(model, images, masks, num_classes):
    logits = model.forward(Tensor(images)).data
    pred = np.argmax(logits, axis=1)
    cm = confusion_matrix(pred, masks, num_classes)
    miou, _ = iou_from_confusion(cm)
    return miou


print("training a small model to attack (64 images, 6 epochs)...")
ds = split_dataset(generate_dataset(SceneSpec(seed=5), 80), (64, 16, 0), seed=0)
model = build_model("unet", stages=3, base_channels=16, num_classes=10, seed=0)
model, _ = train(model, ds, TrainConfig(epochs=6, lr=1e-3, seed=0))
print(f"clean val mIoU {evaluate(model, ds, 'val').mean_iou:.3f}")

x = np.stack([ds.images[i] for i in ds.indices("val")[:8]])
y = np.stack([ds.masks[i] for i in ds.indices("val")[:8]])
t = one_hot(y, len(ds.class_names))
eps, alpha = 8 / 255, 2 / 255

print()
print("=== one val batch, three attacks, same epsilon ===")
print(f"  clean                  batch mIoU {batch_miou(model, x, y, len(ds.class_names)):.3f}")
for name, x_adv in [
    ("fgsm (1 step)", fgsm(model, x, t, epsilon=eps)),
    ("bim (10 steps)", bim(model, x, t, epsilon=eps, alpha=alpha, steps=10)),
    ("pgd (10 steps, random start)",
     pgd(model, x, t, AttackSpec("linf", eps, alpha, 10, init="random_in_ball"),
         rng=np.random.default_rng(0))),
]:
    miou = batch_miou(model, x_adv, y, len(ds.class_names))
    print(f"  {name:28s} batch mIoU {miou:.3f}  "
          f"max|delta| {np.max(np.abs(x_adv - x)):.6f} (eps {eps:.6f})")

print()
print("=== the perturbation is tiny but targeted ===")
spec = AttackSpec("linf", eps, alpha, 10, init="random_in_ball")
x_adv = pgd(model, x, t, spec, rng=np.random.default_rng(0))
inside_ball = bool(np.all(np.abs(x_adv - x) <= eps + 1e-9))
inside_box = bool(np.all((x_adv >= 0.0) & (x_adv <= 1.0)))
print(f"  mean |pixel shift| {np.mean(np.abs(x_adv - x)):.5f} on a [0, 1] scale")
print(f"  final iterate inside the ball: {inside_ball}, inside the box: {inside_box}")

print()
print("=== L2 at a matched budget is the weaker threat ===")
l2 = AttackSpec("l2", eps, alpha, 10, init="random_in_ball")
x_l2 = pgd(model, x, t, l2, rng=np.random.default_rng(0))
print(f"  pgd-l2   batch mIoU {batch_miou(model, x_l2, y, len(ds.class_names)):.3f}")
print(f"  pgd-linf batch mIoU {batch_miou(model, x_adv, y, len(ds.class_names)):.3f}")
print("  (an L2 ball sits inside the Linf box of the same radius)")
