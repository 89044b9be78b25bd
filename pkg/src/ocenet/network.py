"""The full segmentation network and its configuration surface.

A U-shaped encoder/decoder: every encoder level runs a plain convolution
block next to an oriented dynamic convolution block and fuses them, the
decoder gates each skip connection with global/local attention and takes
the oriented features back in as guidance, a multi-scale fusion stage
entangles the decoder pyramid with the orientation pyramid, and a
confidence-partitioned refinement feeds the two-class 1x1 head.

``NetworkConfig`` carries the structural switches used by the ablation
grid; every switch removes or swaps a block, so distinct settings have
distinct parameter counts.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import autograd as ag
from .attention import GlfmBlock, SafmBlock
from .autograd import Tensor
from .entangled import MSFM_CORES, MultiScaleFusion
from .errors import ConfigError, ContractError, DimensionError
from .gabor import DcoaBlock, OrientationBank
from .nn import BatchNorm2d, Conv2d, Module, ModuleList
from .uarm import UarmBlock

FUSION_MODES = ("safm", "conv1x1", "plain_only", "orientation_only")
_INJECT_MODES = ("concat", "add", "none")
_PROB_MODES = ("sigmoid", "spatial_softmax")
_GATE_MODES = ("add", "mul")


@dataclass(frozen=True)
class NetworkConfig:
    """Structural switches for the network; every field changes the graph.

    The boolean switches and ``fusion_mode`` overlap: the mode names the
    encoder fusion wiring while the booleans say which blocks exist, and
    ``validate`` rejects contradictions.  ``with_ablation`` edits one key
    and fixes up the implied switches, which is what the command line's
    ablation flags go through.
    """

    levels: int = 3
    base_channels: int = 32
    num_orientations: int = 8
    use_dcoa: bool = True
    use_safm: bool = True
    use_glfm: bool = True
    use_msfm_ocednl: bool = True
    use_uarm: bool = True
    fusion_mode: str = "safm"
    msfm_core: str = "oce_dnl"
    msfm_gate: str = "add"
    orient_inject: str = "concat"
    prob_mode: str = "sigmoid"

    def validate(self) -> "NetworkConfig":
        if self.levels < 2:
            raise ConfigError(f"levels must be at least 2, got {self.levels}")
        if self.base_channels < 8:
            raise ConfigError(f"base_channels must be at least 8, got {self.base_channels}")
        for name, value, choices in (("fusion_mode", self.fusion_mode, FUSION_MODES),
                                     ("msfm_core", self.msfm_core, MSFM_CORES),
                                     ("msfm_gate", self.msfm_gate, _GATE_MODES),
                                     ("orient_inject", self.orient_inject, _INJECT_MODES),
                                     ("prob_mode", self.prob_mode, _PROB_MODES)):
            if value not in choices:
                raise ConfigError(f"{name} must be one of {choices}, got {value!r}")
        if self.use_safm and not self.use_dcoa:
            raise ConfigError("use_safm without use_dcoa: there is no oriented branch to fuse")
        if self.fusion_mode == "safm" and not self.use_safm:
            raise ConfigError("fusion_mode 'safm' needs use_safm (and use_dcoa) enabled")
        if self.fusion_mode in ("conv1x1", "orientation_only"):
            if not self.use_dcoa:
                raise ConfigError(f"fusion_mode {self.fusion_mode!r} needs use_dcoa enabled")
            if self.use_safm:
                raise ConfigError(f"fusion_mode {self.fusion_mode!r} contradicts use_safm")
        if self.fusion_mode == "plain_only" and self.use_dcoa:
            raise ConfigError("fusion_mode 'plain_only' contradicts use_dcoa")
        return self

    @classmethod
    def plain_baseline(cls) -> "NetworkConfig":
        """Bare U-shaped network with every contribution switched off."""
        return cls(use_dcoa=False, use_safm=False, use_glfm=False,
                   use_msfm_ocednl=False, use_uarm=False, fusion_mode="plain_only")

    def with_ablation(self, key: str, value) -> "NetworkConfig":
        """One-key edit with implied switches fixed up, then validated."""
        by_name = {f.name: f for f in fields(self)}
        if key not in by_name:
            raise ConfigError(f"unknown ablation key {key!r}; "
                              f"choices: {sorted(by_name)}")
        kind = by_name[key].type
        if kind == "bool" and isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                value = True
            elif lowered in ("false", "0", "no", "off"):
                value = False
            else:
                raise ConfigError(f"{key} expects a boolean, got {value!r}")
        elif kind == "int" and isinstance(value, str):
            try:
                value = int(value)
            except ValueError:
                raise ConfigError(f"{key} expects an integer, got {value!r}") from None
        updates = {key: value}
        if key == "fusion_mode":
            if value == "safm":
                updates.update(use_dcoa=True, use_safm=True)
            elif value in ("conv1x1", "orientation_only"):
                updates.update(use_dcoa=True, use_safm=False)
            elif value == "plain_only":
                updates.update(use_dcoa=False, use_safm=False)
        elif key == "use_dcoa":
            if not value:
                updates.update(use_safm=False, fusion_mode="plain_only")
            elif self.fusion_mode == "plain_only":
                updates.update(fusion_mode="safm" if self.use_safm else "conv1x1")
        elif key == "use_safm":
            if value:
                updates.update(use_dcoa=True, fusion_mode="safm")
            elif self.fusion_mode == "safm":
                updates.update(fusion_mode="conv1x1" if self.use_dcoa else "plain_only")
        return replace(self, **updates).validate()


class ConvBnRelu(Module):
    def __init__(self, in_channels: int, out_channels: int, *, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng=rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return ag.relu(self.bn(self.conv(x)))


class EncoderLevel(Module):
    """Plain and oriented branches fused per the configured mode.

    Returns the fused features together with the oriented branch's output,
    which later stages consume as orientation guidance (None when the
    oriented branch does not exist).
    """

    def __init__(self, in_channels: int, out_channels: int, config: NetworkConfig, *,
                 rng: np.random.Generator):
        super().__init__()
        self.mode = config.fusion_mode
        if self.mode != "orientation_only":
            self.plain = ConvBnRelu(in_channels, out_channels, rng=rng)
        if config.use_dcoa:
            self.oriented = DcoaBlock(in_channels, out_channels, rng=rng,
                                      num_orientations=config.num_orientations)
        if self.mode == "safm":
            self.fuse = SafmBlock(out_channels, rng=rng)
        elif self.mode == "conv1x1":
            self.fuse = Conv2d(2 * out_channels, out_channels, 1, rng=rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        if self.mode == "plain_only":
            return self.plain(x), None
        if self.mode == "orientation_only":
            oriented = self.oriented(x)
            return oriented, oriented
        plain = self.plain(x)
        oriented = self.oriented(x)
        if self.mode == "safm":
            return self.fuse(plain, oriented), oriented
        return self.fuse(ag.concat_channels([plain, oriented])), oriented


class DecoderLevel(Module):
    """Upsample, gate the skip, merge, and take orientation guidance back in."""

    def __init__(self, in_channels: int, out_channels: int, config: NetworkConfig, *,
                 rng: np.random.Generator):
        super().__init__()
        self.up = ConvBnRelu(in_channels, out_channels, rng=rng)
        if config.use_glfm:
            self.gate = GlfmBlock(out_channels, out_channels, rng=rng)
        else:
            self.gate = None
        self.merge = ConvBnRelu(2 * out_channels, out_channels, rng=rng)
        self.inject_mode = config.orient_inject if config.use_dcoa else "none"
        if self.inject_mode == "concat":
            self.inject = Conv2d(2 * out_channels, out_channels, 1, rng=rng)

    def forward(self, x: Tensor, skip: Tensor, orient: Tensor | None) -> Tensor:
        up = self.up(ag.upsample_bilinear(x, 2))
        gated = self.gate(skip, up) if self.gate is not None else skip
        merged = self.merge(ag.concat_channels([up, gated]))
        if self.inject_mode == "none" or orient is None:
            return merged
        if self.inject_mode == "concat":
            return self.inject(ag.concat_channels([merged, orient]))
        return merged + orient


class OCENet(Module):
    """Orientation and context entangled segmentation network.

    Consumes (N, 1, H, W) grayscale patches with H and W divisible by
    2**(levels-1) and produces (N, 2, H, W) class logits.  Construction is
    deterministic in (config, seed).
    """

    def __init__(self, config: NetworkConfig | None = None, *, seed: int = 0):
        super().__init__()
        config = (NetworkConfig() if config is None else config).validate()
        self.config = config
        rng = np.random.default_rng(seed)
        widths = [config.base_channels * 2 ** level for level in range(config.levels)]
        self.widths = widths
        encoder = []
        in_channels = 1
        for width in widths:
            encoder.append(EncoderLevel(in_channels, width, config, rng=rng))
            in_channels = width
        self.encoder = ModuleList(encoder)
        self.decoder = ModuleList([
            DecoderLevel(widths[level + 1], widths[level], config, rng=rng)
            for level in range(config.levels - 2, -1, -1)])
        if config.use_msfm_ocednl:
            self.msfm = MultiScaleFusion(tuple(widths), rng=rng, width=config.base_channels,
                                         core=config.msfm_core, gate=config.msfm_gate)
        if config.use_uarm:
            self.uarm = UarmBlock(config.base_channels, rng=rng, prob_mode=config.prob_mode)
        self.head = Conv2d(config.base_channels, 2, 1, rng=rng)

    def set_temperature(self, value: float) -> None:
        """Sharpness of every orientation-attention softmax (annealed in training)."""
        for module in self.modules():
            if isinstance(module, OrientationBank):
                module.temperature = float(value)

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 1:
            raise DimensionError(f"expected (N, 1, H, W) input, got {x.shape}")
        divisor = 2 ** (self.config.levels - 1)
        if x.shape[2] % divisor or x.shape[3] % divisor:
            raise DimensionError(
                f"spatial size {x.shape[2:]} must be divisible by {divisor}")

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        features: list[Tensor] = []
        orientations: list[Tensor | None] = []
        h = x
        for i, level in enumerate(self.encoder):
            if i > 0:
                h = ag.maxpool2d(h, 2)
            with ag.scope(f"encoder{i}"):
                h, oriented = level(h)
            features.append(h)
            orientations.append(oriented)
        d = features[-1]
        plain_scales = [d]
        for i, level in enumerate(self.decoder):
            target = self.config.levels - 2 - i
            with ag.scope(f"decoder{target}"):
                d = level(d, features[target], orientations[target])
            plain_scales.append(d)
        if self.config.use_msfm_ocednl:
            plain_scales = plain_scales[::-1]
            if self.config.use_dcoa:
                orient_scales = orientations
            else:
                orient_scales = plain_scales
            with ag.scope("msfm"):
                d = self.msfm(plain_scales, orient_scales)
        if self.config.use_uarm:
            with ag.scope("uarm"):
                d = self.uarm(d)
        with ag.scope("head"):
            return self.head(d)


def ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean two-class cross entropy between logits and a {0,1} label map."""
    target = np.asarray(target)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise DimensionError(f"logits must be (N, 2, H, W), got {logits.shape}")
    n, _, h, w = logits.shape
    if target.shape != (n, h, w):
        raise DimensionError(
            f"target shape {target.shape} does not match logits {(n, h, w)}")
    if not np.isin(target, (0, 1)).all():
        raise ContractError("target labels must all be 0 or 1")
    log_q = ag.log_softmax(logits, axis=1)
    onehot = np.zeros(logits.shape, dtype=log_q.dtype)
    index = target.astype(np.int64)
    grid_n, grid_h, grid_w = np.ogrid[:n, :h, :w]
    onehot[grid_n, index, grid_h, grid_w] = 1.0
    return -(log_q * Tensor(onehot)).sum() / float(n * h * w)
