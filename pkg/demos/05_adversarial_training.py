"""Adversarial training at toy scale: train a standard model on clean batches,
then fine-tune a copy of it on attacked batches and evaluate both under the
same attack.

Starting the adversarial pass from the trained weights is the intended shape
of the stage: hardening is a smaller, more expensive pass (every batch costs
an inner attack), so it rides on the standard model instead of growing a new
one from random weights.

Run: python3 demos/05_adversarial_training.py   (a few minutes on one core)
"""

import copy

import numpy as np

from advseg import (AttackSpec, SceneSpec, TrainConfig, build_model, evaluate,
                    generate_dataset, split_dataset, train)

print("building 72 images (48 train / 16 val / 8 test)...")
ds = split_dataset(generate_dataset(SceneSpec(seed=7), 72), (48, 16, 8), seed=0)

# Short-horizon training attack: few steps with a larger step size, the usual
# trade so each batch costs 4 forward/backward passes instead of 11.
train_attack = AttackSpec("linf", 8 / 255, 4 / 255, 3, init="random_in_ball")
eval_attack = AttackSpec("linf", 8 / 255, 2 / 255, 10, init="random_in_ball")

print("training the standard model (8 epochs, clean batches)...")
standard = build_model("unet", stages=3, base_channels=16, num_classes=10, seed=0)
standard, _ = train(standard, ds, TrainConfig(epochs=8, lr=1e-3, seed=0))

print("fine-tuning a copy on attacked batches (4 epochs)...")
robust = copy.deepcopy(standard)
robust, record = train(robust, ds, TrainConfig(epochs=4, lr=1e-3, seed=0,
                                               attack=train_attack))

print()
print("=== the trade, on the val split ===")
rows = []
for name, model in [("standard", standard), ("adv-tuned", robust)]:
    clean = evaluate(model, ds, "val").mean_iou
    attacked = evaluate(model, ds, "val", attack=eval_attack,
                        rng=np.random.default_rng(0)).mean_iou
    rows.append((name, clean, attacked))
    print(f"  {name:12s} clean mIoU {clean:.3f}   attacked mIoU {attacked:.3f}")

(_, sc, sa), (_, rc, ra) = rows
print()
print(f"robustness gained under attack: {ra - sa:+.3f} mIoU")
print(f"clean accuracy given up:        {rc - sc:+.3f} mIoU")
print()
print("per-epoch record rows are tagged with the attack that produced them:")
tags = sorted({row.attack_tag for row in record.rows})
print(f"  attack tags in the fine-tuning run: {tags}")
print("(the acceptance-scale run fine-tunes on 256 images for 8 epochs,"
      " three seeds)")
