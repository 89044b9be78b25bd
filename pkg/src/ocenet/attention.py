"""Attention blocks: spatial and channel gates plus the two fusion modules.

``SpaBlock`` and ``SeBlock`` gate a feature map through a sigmoid attention
map (spatial and per-channel respectively).  ``SafmBlock`` fuses the plain
and oriented encoder branches with a selective-kernel style channel vote,
and ``GlfmBlock`` gates a skip connection through local low-level, local
high-level and global self-attention pathways.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError
from .nn import Conv2d, Linear, Module


class SpaBlock(Module):
    """Multiply a feature map by a single-channel sigmoid attention map."""

    def __init__(self, channels: int, *, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng=rng)
        self.conv2 = Conv2d(channels, 1, 3, rng=rng)

    def attention_map(self, x: Tensor) -> Tensor:
        return ag.sigmoid(self.conv2(ag.relu(self.conv1(x))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.attention_map(x)


class SeBlock(Module):
    """Scale channels by sigmoid gates squeezed from the pooled descriptor."""

    def __init__(self, channels: int, *, rng: np.random.Generator, reduction: int = 16):
        super().__init__()
        self.channels = channels
        hidden = max(channels // reduction, 1)
        self.squeeze = Linear(channels, hidden, rng=rng)
        self.expand = Linear(hidden, channels, rng=rng)

    def gates(self, x: Tensor) -> Tensor:
        pooled = ag.global_avg_pool(x).reshape(x.shape[0], self.channels)
        return ag.sigmoid(self.expand(ag.relu(self.squeeze(pooled))))

    def forward(self, x: Tensor) -> Tensor:
        g = self.gates(x)
        return x * g.reshape(x.shape[0], self.channels, 1, 1)


class SelfAttention2d(Module):
    """Single-head dot-product attention over all spatial positions.

    Query/key embeddings are an eighth of the input width; value keeps the
    full width so the attended map adds directly onto the residual.
    """

    def __init__(self, channels: int, *, rng: np.random.Generator, embed: int | None = None):
        super().__init__()
        self.channels = channels
        self.embed = max(channels // 8, 1) if embed is None else embed
        self.query = Conv2d(channels, self.embed, 1, rng=rng)
        self.key = Conv2d(channels, self.embed, 1, rng=rng)
        self.value = Conv2d(channels, channels, 1, rng=rng)

    def attention_rows(self, x: Tensor) -> Tensor:
        """Row-stochastic (N, H*W, H*W) map; row i attends position i."""
        n, _, h, w = x.shape
        q = self.query(x).reshape(n, self.embed, h * w)
        k = self.key(x).reshape(n, self.embed, h * w)
        logits = ag.matmul(q.transpose(0, 2, 1), k) * (1.0 / math.sqrt(self.embed))
        return ag.softmax(logits, axis=2)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        attn = self.attention_rows(x)
        v = self.value(x).reshape(n, c, h * w)
        out = ag.matmul(v, attn.transpose(0, 2, 1))
        return x + out.reshape(n, c, h, w)


class GlfmBlock(Module):
    """Gate a skip connection with local and global attention pathways.

    The low path (skip features) and high path (upsampled decoder features)
    are each channel-gated then spatially gated; the global path runs
    self-attention over their concatenation.  A 1x1 convolution fuses all
    three back to the skip width.
    """

    def __init__(self, low_channels: int, high_channels: int, *,
                 rng: np.random.Generator, out_channels: int | None = None):
        super().__init__()
        self.out_channels = low_channels if out_channels is None else out_channels
        joint = low_channels + high_channels
        self.se_low = SeBlock(low_channels, rng=rng)
        self.spa_low = SpaBlock(low_channels, rng=rng)
        self.se_high = SeBlock(high_channels, rng=rng)
        self.spa_high = SpaBlock(high_channels, rng=rng)
        self.se_global = SeBlock(joint, rng=rng)
        self.sa_global = SelfAttention2d(joint, rng=rng)
        self.fuse = Conv2d(2 * joint, self.out_channels, 1, rng=rng)

    def forward(self, low: Tensor, high: Tensor) -> Tensor:
        if low.shape[0] != high.shape[0] or low.shape[2:] != high.shape[2:]:
            raise DimensionError(
                f"glfm: low {low.shape} and high {high.shape} do not align")
        f_ll = self.spa_low(self.se_low(low))
        f_hh = self.spa_high(self.se_high(high))
        f_g = self.sa_global(self.se_global(ag.concat_channels([high, low])))
        return self.fuse(ag.concat_channels([f_ll, f_hh, f_g]))


class SafmBlock(Module):
    """Fuse plain and oriented branches by per-channel selection.

    The summed branches vote through a shared bottleneck for a two-way
    softmax per channel; each branch is scaled by its share, spatially
    gated, and the sum passes through a 1x1 fusion convolution.

    ``selection_override`` (a length-2 or (N, 2, C) array) replaces the
    learned vote and ``bypass_spa`` skips the per-branch spatial gates;
    both exist for tests that pin the block into a degenerate regime.
    """

    def __init__(self, channels: int, *, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        self.channels = channels
        bottleneck = max(channels // reduction, 8)
        self.squeeze = Linear(channels, bottleneck, rng=rng)
        self.head_plain = Linear(bottleneck, channels, rng=rng)
        self.head_oriented = Linear(bottleneck, channels, rng=rng)
        self.spa_plain = SpaBlock(channels, rng=rng)
        self.spa_oriented = SpaBlock(channels, rng=rng)
        self.fuse = Conv2d(channels, channels, 1, rng=rng)
        self.selection_override = None
        self.bypass_spa = False

    def selection_weights(self, plain: Tensor, oriented: Tensor) -> Tensor:
        """(N, 2, C) softmax over the two branches, per channel."""
        n, c = plain.shape[0], self.channels
        pooled = ag.global_avg_pool(plain + oriented).reshape(n, c)
        z = ag.relu(self.squeeze(pooled))
        logits = ag.concat([self.head_plain(z).reshape(n, 1, c),
                            self.head_oriented(z).reshape(n, 1, c)], axis=1)
        return ag.softmax(logits, axis=1)

    def forward(self, plain: Tensor, oriented: Tensor) -> Tensor:
        if plain.shape != oriented.shape:
            raise DimensionError(
                f"safm: branch shapes {plain.shape} and {oriented.shape} differ")
        n, c = plain.shape[0], self.channels
        if self.selection_override is not None:
            w = np.asarray(self.selection_override, dtype=plain.dtype)
            if w.shape == (2,):
                w = np.broadcast_to(w.reshape(1, 2, 1), (n, 2, c))
            weights = Tensor(np.ascontiguousarray(w))
        else:
            weights = self.selection_weights(plain, oriented)
        w_plain = ag.narrow(weights, 1, 0, 1).reshape(n, c, 1, 1)
        w_oriented = ag.narrow(weights, 1, 1, 1).reshape(n, c, 1, 1)
        scaled_plain = plain * w_plain
        scaled_oriented = oriented * w_oriented
        if not self.bypass_spa:
            scaled_plain = self.spa_plain(scaled_plain)
            scaled_oriented = self.spa_oriented(scaled_oriented)
        return self.fuse(scaled_plain + scaled_oriented)
