"""Build the two segmentation architectures, compare them, and train one
briefly on a small synthetic set.

Run: python3 demos/03_models_and_training.py   (about a minute on one core)
"""

import numpy as np

from advseg import (SceneSpec, Tensor, TrainConfig, build_model, evaluate,
                    generate_dataset, split_dataset, train)

print("=== the two architectures ===")
for arch in ("unet", "linknet"):
    model = build_model(arch, stages=3, base_channels=16, num_classes=10, seed=0)
    print(f"  {arch:8s} {model.num_parameters():7d} parameters "
          f"(skip connections {'concatenate' if arch == 'unet' else 'add'})")

print()
print("=== forward contract ===")
model = build_model("unet", stages=3, base_channels=16, num_classes=10, seed=0)
x = np.random.default_rng(0).uniform(size=(2, 3, 64, 64))
logits = model.forward(Tensor(x))
print(f"  input {x.shape} -> logits {logits.data.shape} (one score per class per pixel)")

capture = {}
model.forward(Tensor(x[:1]), capture=capture)
print(f"  capture exposes {len(capture)} named activations, e.g. "
      f"{sorted(capture)[:4]} ...")
print(f"  representation layer for inversion: {model.representation_layer!r}")

print()
print("=== a short training run (48 images, 4 epochs) ===")
ds = split_dataset(generate_dataset(SceneSpec(seed=3), 64), (48, 16, 0), seed=0)
model = build_model("unet", stages=3, base_channels=16, num_classes=10, seed=0)
model, record = train(model, ds, TrainConfig(epochs=4, lr=1e-3, seed=0),
                      verbose=True)
report = evaluate(model, ds, "val")
print(f"val mIoU {report.mean_iou:.3f}, pixel accuracy "
      f"{report.pixel_accuracy:.3f} after {record.rows[-1].epoch} epochs")
print("(the acceptance-scale run trains 440 images for 20 epochs)")
