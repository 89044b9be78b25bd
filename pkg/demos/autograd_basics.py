#!/usr/bin/env python3
"""Tour of the tensor engine: build a graph, differentiate it, verify it.

Runs in about a second and prints every intermediate, so it doubles as a
worked example of the closure-based backward pass.
"""

import numpy as np

from ocenet import autograd as ag
from ocenet.autograd import Tensor

print("== scalar chain ==")
x = Tensor(np.array(1.5), requires_grad=True)
y = ag.relu(x * x + x)
y.backward()
print(f"y = x^2 + x at x=1.5      -> {float(y.data):.4f}")
print(f"dy/dx (analytic 2x+1)     -> {float(x.grad):.4f}")

print()
print("== broadcasting and reductions ==")
w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
b = Tensor(np.ones(3), requires_grad=True)
loss = ((w + b) ** 2).mean()
loss.backward()
print(f"loss = mean((w + b)^2)    -> {float(loss.data):.4f}")
print(f"dw shape {w.grad.shape}, db (summed over broadcast) {b.grad}")

print()
print("== a small convolution, checked by finite differences ==")
rng = np.random.default_rng(0)
with ag.precision(np.float64):
    kernel = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
    image = Tensor(rng.normal(size=(1, 1, 6, 6)), requires_grad=True)
    coeff = Tensor(rng.normal(size=(1, 2, 6, 6)))
    worst = ag.gradcheck(
        lambda: (ag.conv2d(image, kernel, padding=1) * coeff).sum(),
        [kernel, image], eps=1e-5, rtol=1e-4, atol=1e-9, max_probes=40)
print(f"conv2d gradcheck worst relative error: {worst:.2e}")

print()
print("== graphs release their buffers after backward ==")
a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
out = (a * a).sum()
out.backward()
print(f"first backward fine, a.grad = {a.grad}")
try:
    out.backward()
except Exception as exc:
    print(f"second backward on the same graph raises: {exc}")
