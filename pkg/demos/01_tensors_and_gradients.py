"""A tour of the tensor library: building graphs, reverse-mode gradients,
and checking them against finite differences by hand.

Run: python3 demos/01_tensors_and_gradients.py
"""

import numpy as np

from advseg import (AdamState, NonFiniteError, Tensor, adam_step, backward,
                    conv2d, mul, relu, softmax_cross_entropy, sum_all)

print("=== scalars through a tiny graph ===")
a = Tensor(np.array([2.0]), requires_grad=True)
b = Tensor(np.array([3.0]), requires_grad=True)
loss = sum_all(mul(a, b) + relu(a - b))   # 2*3 + relu(-1) = 6
backward(loss)
print(f"loss = {loss.item():.1f}")
print(f"d loss / d a = {a.grad[0]:.1f}  (b + relu'(a-b) = 3 + 0)")
print(f"d loss / d b = {b.grad[0]:.1f}  (a - relu'(a-b) = 2 - 0)")

print()
print("=== a convolution, checked against finite differences ===")
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
k = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
w = rng.normal(size=(1, 3, 4, 4))        # random projection -> scalar loss

loss = sum_all(mul(conv2d(x, k), Tensor(w)))
backward(loss)

h = 1e-6
flat = k.data.ravel()
probe = rng.choice(flat.size, size=5, replace=False)
print("kernel entry   analytic      numeric")
for idx in probe:
    keep = flat[idx]
    flat[idx] = keep + h
    up = float((np.ascontiguousarray(
        conv2d(Tensor(x.data), Tensor(k.data)).data) * w).sum())
    flat[idx] = keep - h
    down = float((np.ascontiguousarray(
        conv2d(Tensor(x.data), Tensor(k.data)).data) * w).sum())
    flat[idx] = keep
    numeric = (up - down) / (2 * h)
    print(f"  {idx:4d}      {k.grad.ravel()[idx]:+.6f}   {numeric:+.6f}")

print()
print("=== the per-pixel cross-entropy at a known point ===")
# uniform logits over 10 classes: loss is exactly ln(10)
logits = Tensor(np.zeros((1, 10, 2, 2)))
target = np.zeros((1, 10, 2, 2))
target[:, 3] = 1.0
loss = softmax_cross_entropy(logits, Tensor(target))
print(f"uniform-logit loss = {loss.item():.6f}, ln(10) = {np.log(10):.6f}")

print()
print("=== one Adam step, reproduced by hand ===")
p = np.array([1.0])
g = np.array([10.0])     # sign matters, magnitude mostly does not
state = AdamState([p])
adam_step([p], [g], state, lr=1e-2)
print(f"after one step from 1.0 with lr 1e-2: {p[0]:.6f} "
      "(first step is almost exactly -lr * sign(g))")

print()
print("=== non-finite values refuse to propagate ===")
big = Tensor(np.array([1e308]))
try:
    mul(big, big)
except NonFiniteError as exc:
    print(f"NonFiniteError: {exc}")
