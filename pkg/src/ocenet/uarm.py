"""Confidence-partitioned refinement with depth-asymmetric attention.

The block squeezes its input to a per-pixel vessel probability, splits the
feature map into a confident part (probability below 0.4 or at least 0.7)
and an ambiguous part (between the thresholds), and refines each with its
own attention: a wide two-convolution gate for the confident regions and a
deeper four-convolution gate for the ambiguous ones, where thin vessels
tend to live.  The partition mask is a hard 0/1 map and carries no
gradient.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError
from .nn import Conv2d, Module

LOW_THRESHOLD = 0.4
HIGH_THRESHOLD = 0.7


def sign_partition(p: np.ndarray) -> np.ndarray:
    """1 where probability is confidently background or vessel, 0 between.

    Intervals are half-open: [0, 0.4) -> 1, [0.4, 0.7) -> 0, [0.7, 1] -> 1.
    """
    p = np.asarray(p)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ContractError(
            f"probabilities must lie in [0, 1], got [{p.min()}, {p.max()}]")
    return np.where((p >= LOW_THRESHOLD) & (p < HIGH_THRESHOLD), 0.0, 1.0).astype(p.dtype)


class _DeepGate(Module):
    """Four 3x3 convolutions narrowing to a 1-channel sigmoid map."""

    def __init__(self, channels: int, *, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng=rng)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng)
        self.conv3 = Conv2d(channels, channels, 3, rng=rng)
        self.conv4 = Conv2d(channels, 1, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h = ag.relu(self.conv1(x))
        h = ag.relu(self.conv2(h))
        h = ag.relu(self.conv3(h))
        return x * ag.sigmoid(self.conv4(h))


class _ShallowGate(Module):
    """Two 3x3 convolutions narrowing to a 1-channel sigmoid map."""

    def __init__(self, channels: int, *, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng=rng)
        self.conv2 = Conv2d(channels, 1, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return x * ag.sigmoid(self.conv2(ag.relu(self.conv1(x))))


class UarmBlock(Module):
    """Refine features by attending confident and ambiguous regions separately.

    ``prob_mode`` selects how the squeezed 1-channel map becomes a
    probability: ``sigmoid`` (default) normalizes each pixel on its own,
    ``spatial_softmax`` normalizes across all positions of the map.
    """

    def __init__(self, channels: int = 32, *, rng: np.random.Generator,
                 prob_mode: str = "sigmoid"):
        super().__init__()
        if prob_mode not in ("sigmoid", "spatial_softmax"):
            raise ContractError(f"unknown prob_mode {prob_mode!r}")
        self.channels = channels
        self.prob_mode = prob_mode
        self.reduce = Conv2d(channels, 1, 1, rng=rng)
        self.shallow = _ShallowGate(channels, rng=rng)
        self.deep = _DeepGate(channels, rng=rng)
        # Debug tap: when record_prob is set, partition() keeps a copy of the
        # last probability map so callers can visualize the region split.
        self.record_prob = False
        self.last_prob = None

    def prob_map(self, x: Tensor) -> Tensor:
        """Per-pixel vessel probability, shape (N, 1, H, W), values in [0, 1]."""
        squeezed = self.reduce(x)
        if self.prob_mode == "sigmoid":
            return ag.sigmoid(squeezed)
        n, _, h, w = squeezed.shape
        flat = ag.softmax(squeezed.reshape(n, 1, h * w), axis=2)
        return flat.reshape(n, 1, h, w)

    def partition(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Split into (confident, ambiguous) parts that sum back to the input."""
        prob = self.prob_map(x).data
        if self.record_prob:
            self.last_prob = np.array(prob, copy=True)
        mask = Tensor(sign_partition(prob))
        return x * mask, x * Tensor(1.0 - mask.data)

    def forward(self, x: Tensor) -> Tensor:
        confident, ambiguous = self.partition(x)
        return self.shallow(confident) + self.deep(ambiguous)
