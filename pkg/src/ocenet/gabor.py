"""Orientation-aware dynamic convolution built from a bank of Gabor kernels.

A fixed Gabor kernel is generated per orientation, standardized, and
multiplied elementwise into a learned plain kernel of the same footprint.
A small attention head looks at the globally pooled input and produces a
softmax weight per orientation; the weighted sum of the modulated kernels
becomes the convolution kernel for that sample.  With the weights pinned to
a one-hot vector the layer degenerates to a single oriented convolution,
which is the main correctness handle the tests use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError

KERNEL_BN_EPS = 1e-5


@dataclass
class GaborParams:
    """Parameters of one real-valued Gabor kernel.

    ``wavelength`` defaults to 1/sqrt(2) and ``sigma`` to 1, the values the
    orientation bank uses for its 3x3 kernels; ``aspect`` is carried for
    completeness but the envelope already couples the axes via the
    wavelength squared term.
    """

    theta: float
    wavelength: float = 1.0 / math.sqrt(2.0)
    psi: float = 0.0
    sigma: float = 1.0
    aspect: float = 1.0
    size: int = 3

    def validate(self) -> None:
        if self.size < 3 or self.size % 2 == 0:
            raise ContractError(f"kernel size must be odd and >= 3, got {self.size}")
        if self.wavelength <= 0 or self.sigma <= 0:
            raise ContractError("wavelength and sigma must be positive")


def gen_gabor(params: GaborParams) -> np.ndarray:
    """Sample the real part of the Gabor function on a centered grid.

    x is the column offset and y the row offset, so the returned array can
    be used directly as a convolution kernel over (row, column) images.
    """
    params.validate()
    half = params.size // 2
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    c, s = math.cos(params.theta), math.sin(params.theta)
    x_rot = xs * c + ys * s
    y_rot = -xs * s + ys * c
    lam, sig = params.wavelength, params.sigma
    envelope = np.exp(-(x_rot ** 2 + (lam ** 2) * (y_rot ** 2)) / (2.0 * sig ** 2))
    carrier = np.cos(2.0 * math.pi * x_rot / lam + params.psi)
    return (envelope * carrier).astype(ag.default_dtype())


def orientation_angles(num_orientations: int, spacing: str = "uniform") -> list[float]:
    """Angles of the bank, evenly covering the half circle by default.

    ``spacing="literal"`` keeps the harmonic set 2*pi/i instead, which
    clusters kernels near small angles; it exists for comparison runs.
    """
    if num_orientations < 1:
        raise ContractError(f"num_orientations must be positive, got {num_orientations}")
    if num_orientations not in (4, 8):
        raise ConfigError(f"num_orientations must be 4 or 8, got {num_orientations}")
    if spacing == "uniform":
        return [i * math.pi / num_orientations for i in range(num_orientations)]
    if spacing == "literal":
        return [2.0 * math.pi / i for i in range(1, num_orientations + 1)]
    raise ConfigError(f"unknown orientation spacing {spacing!r}")


class OrientationBank(nn.Module):
    """Dynamic convolution over a bank of Gabor-modulated kernels.

    The aggregation is bias-free: the per-sample kernel is the attention
    weighted sum of ``plain_kernels * normalized gabor`` and nothing else
    is added after the convolution.
    """

    def __init__(self, in_channels: int, out_channels: int, *, rng: np.random.Generator,
                 num_orientations: int = 8, kernel_size: int = 3,
                 spacing: str = "uniform", normalize_gabor: bool = True,
                 attention_reduction: int = 4):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.num_orientations = num_orientations
        self.kernel_size = kernel_size
        self.normalize_gabor = normalize_gabor
        self.temperature = 1.0
        self.attention_override: np.ndarray | None = None

        angles = orientation_angles(num_orientations, spacing)
        self.angles = angles
        stack = np.stack([gen_gabor(GaborParams(theta=a, size=kernel_size)) for a in angles])
        self.register_buffer("gabor", stack.astype(ag.default_dtype()))

        fan_in = in_channels * kernel_size * kernel_size
        std = float(np.sqrt(2.0 / fan_in))
        shape = (num_orientations, out_channels, in_channels, kernel_size, kernel_size)
        self.plain_kernels = Tensor(rng.normal(0.0, std, size=shape).astype(ag.default_dtype()),
                                    requires_grad=True)
        self.bn_scale = Tensor(np.ones(num_orientations, dtype=ag.default_dtype()), requires_grad=True)
        self.bn_shift = Tensor(np.zeros(num_orientations, dtype=ag.default_dtype()), requires_grad=True)

        hidden = max(in_channels // attention_reduction, 1)
        self.att_reduce = nn.Linear(in_channels, hidden, rng=rng)
        self.att_expand = nn.Linear(hidden, num_orientations, rng=rng)

    def normalized_gabor(self) -> Tensor:
        """Per-orientation standardized Gabor stack with learned affine."""
        n, k = self.num_orientations, self.kernel_size
        gab = Tensor(self.gabor)
        if not self.normalize_gabor:
            return gab
        mean = gab.mean(axis=(1, 2), keepdims=True)
        centered = gab - mean
        var = (centered * centered).mean(axis=(1, 2), keepdims=True)
        standardized = centered * ((var + KERNEL_BN_EPS) ** -0.5)
        scale = self.bn_scale.reshape(n, 1, 1)
        shift = self.bn_shift.reshape(n, 1, 1)
        return standardized * scale + shift

    def composite_kernels(self) -> Tensor:
        """K_i elementwise modulated by its normalized Gabor kernel."""
        n, k = self.num_orientations, self.kernel_size
        gab = self.normalized_gabor().reshape(n, 1, 1, k, k)
        return self.plain_kernels * gab

    def attention_weights(self, x: Tensor) -> Tensor:
        """Softmax orientation weights, one distribution per sample."""
        if self.attention_override is not None:
            w = np.asarray(self.attention_override, dtype=x.dtype)
            if w.ndim == 1:
                w = np.broadcast_to(w, (x.shape[0], self.num_orientations))
            if w.shape != (x.shape[0], self.num_orientations):
                raise DimensionError(
                    f"attention override shape {w.shape} does not fit "
                    f"({x.shape[0]}, {self.num_orientations})")
            return Tensor(np.ascontiguousarray(w))
        pooled = ag.global_avg_pool(x).reshape(x.shape[0], self.in_channels)
        logits = self.att_expand(ag.relu(self.att_reduce(pooled)))
        return ag.softmax(logits * (1.0 / float(self.temperature)), axis=1)

    def aggregate_kernel(self, weights: Tensor) -> Tensor:
        """Blend the composite kernels into one kernel per sample."""
        n = self.num_orientations
        o, i, k = self.out_channels, self.in_channels, self.kernel_size
        flat = self.composite_kernels().reshape(n, o * i * k * k)
        return ag.matmul(weights, flat).reshape(weights.shape[0], o, i, k, k)

    def orientation_response(self, x: Tensor, index: int) -> Tensor:
        """Convolve with one orientation's composite kernel only."""
        n = self.num_orientations
        if not 0 <= index < n:
            raise ContractError(f"orientation index {index} out of range 0..{n - 1}")
        kernel = ag.narrow(self.composite_kernels(), 0, index, 1).reshape(
            self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        return ag.conv2d(x, kernel, padding=self.kernel_size // 2)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"expected (N, C, H, W), got rank {x.ndim}")
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"bank built for {self.in_channels} channels, got {x.shape[1]}")
        batch = x.shape[0]
        weights = self.attention_weights(x)
        kernels = self.aggregate_kernel(weights)
        o, i, k = self.out_channels, self.in_channels, self.kernel_size
        outs = []
        for b in range(batch):
            sample = ag.narrow(x, 0, b, 1)
            kernel = ag.narrow(kernels, 0, b, 1).reshape(o, i, k, k)
            outs.append(ag.conv2d(sample, kernel, padding=k // 2))
        return outs[0] if batch == 1 else ag.concat(outs, axis=0)


class DcoaBlock(nn.Module):
    """Oriented dynamic convolution -> feature batchnorm -> relu."""

    def __init__(self, in_channels: int, out_channels: int, *, rng: np.random.Generator,
                 num_orientations: int = 8, kernel_size: int = 3, spacing: str = "uniform"):
        super().__init__()
        self.bank = OrientationBank(in_channels, out_channels, rng=rng,
                                    num_orientations=num_orientations,
                                    kernel_size=kernel_size, spacing=spacing)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return ag.relu(self.bn(self.bank(x)))
