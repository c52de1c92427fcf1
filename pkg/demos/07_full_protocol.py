"""Run the whole four-stage robustness protocol end to end at smoke scale:
standard training, adversarial training, robust-dataset construction, and
retraining on the robust data.

Run: python3 demos/07_full_protocol.py   (several minutes on one core)

The same flow is scripted for the shell in README.md with the `advseg` command
(gen-data -> train -> adv-train -> attack-eval -> robustify -> robust-train ->
compare); this file drives it from Python at reduced scale instead.
"""

import numpy as np

from advseg import evaluate
from advseg.protocol import (MINI, adversarial_train, build_protocol_dataset,
                             final_row, linf_attack, robust_train,
                             robustify_stage, stage1_train, training_attack)

scale = MINI
print(f"protocol scale: {scale.primary_count + scale.variant_count} images, "
      f"split {scale.split}, {scale.epochs} epochs")

print()
print("--- stage 0: dataset ---")
ds = build_protocol_dataset(scale, seed=0)
print(f"built {len(ds.images)} images at {ds.images.shape[2]}x{ds.images.shape[3]}")

print()
print("--- stage 1: standard training ---")
standard, record = stage1_train(ds, "unet", scale, seed=0)
clean = final_row(record, "val").miou
print(f"clean val mIoU {clean:.3f}")

eval_attack = linf_attack(scale.eval_attack_steps)
attacked = evaluate(standard, ds, "val", attack=eval_attack,
                    rng=np.random.default_rng(0)).mean_iou
print(f"attacked val mIoU {attacked:.3f} (collapse {clean - attacked:+.3f})")

print()
print("--- stage 2: adversarial training ---")
adv_model, adv_record = adversarial_train(ds, "unet", scale, seed=0,
                                          base_model=standard)
spec = training_attack(scale)
std_under = evaluate(standard, ds, "val", attack=spec,
                     rng=np.random.default_rng(1)).mean_iou
adv_under = evaluate(adv_model, ds, "val", attack=spec,
                     rng=np.random.default_rng(1)).mean_iou
print(f"under the training attack: standard {std_under:.3f}, "
      f"adv-trained {adv_under:.3f} (benefit {adv_under - std_under:+.3f})")

print()
print("--- stage 3: robust dataset via representation inversion ---")
result = robustify_stage(adv_model, ds, scale, seed=0)
d0 = result.initial_distance.mean()
d1 = result.final_distance.mean()
print(f"{len(result.dataset.images)} images rebuilt, "
      f"mean feature distance {d0:.3f} -> {d1:.3f}")

print()
print("--- stage 4: retrain on the robust data ---")
robust_model, robust_record = robust_train(result.dataset, "unet", scale, seed=0)
r_train = final_row(robust_record, "train").miou
orig_val = evaluate(robust_model, ds, "val").mean_iou
print(f"train mIoU on robust data {r_train:.3f}, "
      f"mIoU back on the original val split {orig_val:.3f}")
print()
print("the robust data is learnable, but it is a different distribution:")
print(f"generalization gap back to original scenes: {r_train - orig_val:+.3f}")
print("(numbers at this smoke scale are noisy; the acceptance protocol uses")
print(" 656 images, 20 epochs, and three adversarial seeds)")
