#!/usr/bin/env python3
"""Fit a small network onto two oriented bars and watch it converge.

Uses a two-level model so the run finishes in seconds; each step prints the
loss and the Dice overlap of the argmax prediction with the labels.
"""

import time

import numpy as np

from ocenet.autograd import Tensor
from ocenet.network import NetworkConfig, OCENet, ce_loss
from ocenet.pipeline import Adam
from ocenet.synthetic import bar_batch

images, labels = bar_batch([0.0, np.pi / 2], size=32)
targets = labels.astype(np.int64)

net = OCENet(NetworkConfig(levels=2, base_channels=8), seed=0)
print(f"model: 2 levels, 8 base channels, {net.num_parameters()} parameters")
optimizer = Adam(net.parameters(), lr=2e-3)

started = time.monotonic()
for step in range(80):
    net.set_temperature(4.0 + (1.0 - 4.0) * step / 79.0)
    optimizer.zero_grad()
    logits = net(Tensor(images))
    loss = ce_loss(logits, targets)
    pred = logits.data.argmax(axis=1)
    loss.backward()
    optimizer.step()

    overlap = int(((pred == 1) & (targets == 1)).sum())
    dice = 2.0 * overlap / float((pred == 1).sum() + (targets == 1).sum())
    print(f"step {step:2d}   loss {float(loss.data):.4f}   dice {dice:.4f}")
    if float(loss.data) < 0.05 and dice >= 0.95:
        print(f"converged in {time.monotonic() - started:.1f}s")
        break
else:
    print("did not converge inside the demo budget; try more steps")
