"""Non-local attention family and the multi-scale fusion module that hosts it.

Four operators over flattened spatial positions, in increasing order of
structure: plain non-local (pairwise dot-product affinities), the
disentangled variant (whitened pairwise term plus a separately embedded
unary term), and their two-stream counterparts that entangle a plain
feature map with an orientation feature map by multiplying the
self-affinity with both cross-affinities elementwise.

Affinities are exposed raw (pre-normalization) so their algebraic
identities can be checked directly; each term is softmax-normalized over
the key axis before it weights the value vectors.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .attention import SelfAttention2d
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .nn import Conv2d, Module, ModuleList


def _flatten(t: Tensor) -> Tensor:
    n, c, h, w = t.shape
    return t.reshape(n, c, h * w)


def whitened_pairwise(q: Tensor, k: Tensor) -> Tensor:
    """(q_i - mean q)ᵀ(k_j - mean k) for (N, d, P) embeddings.

    Means are taken over positions per batch element, so adding a constant
    map to either argument leaves the result unchanged.
    """
    qc = q - q.mean(axis=2, keepdims=True)
    kc = k - k.mean(axis=2, keepdims=True)
    return ag.matmul(qc.transpose(0, 2, 1), kc)


def unary_term(q: Tensor, u: Tensor) -> Tensor:
    """(mean q) · u_j per position: an (N, 1, P) row of key-only logits."""
    return ag.matmul(q.mean(axis=2, keepdims=True).transpose(0, 2, 1), u)


class NonlocalBlock(Module):
    """Pairwise dot-product attention over all positions, residual output."""

    def __init__(self, channels: int, *, rng: np.random.Generator, embed: int | None = None):
        super().__init__()
        self.channels = channels
        self.embed = max(channels // 2, 1) if embed is None else embed
        self.query = Conv2d(channels, self.embed, 1, rng=rng, bias=False)
        self.key = Conv2d(channels, self.embed, 1, rng=rng, bias=False)
        self.value = Conv2d(channels, channels, 1, rng=rng, bias=False)

    def affinity(self, x: Tensor) -> Tensor:
        """Raw (N, P, P) logits Q_iᵀK_j before normalization."""
        q = _flatten(self.query(x))
        k = _flatten(self.key(x))
        return ag.matmul(q.transpose(0, 2, 1), k)

    def _apply(self, weights: Tensor, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        v = _flatten(self.value(x))
        out = ag.matmul(v, weights.transpose(0, 2, 1))
        return x + out.reshape(n, c, h, w)

    def forward(self, x: Tensor) -> Tensor:
        return self._apply(ag.softmax(self.affinity(x), axis=2), x)


class DnlBlock(NonlocalBlock):
    """Non-local with the affinity split into whitened-pairwise and unary terms.

    The pairwise term correlates mean-subtracted queries and keys; the unary
    term scores each position through its own key embedding against the mean
    query.  Both are softmax-normalized over positions and summed.
    """

    def __init__(self, channels: int, *, rng: np.random.Generator, embed: int | None = None):
        super().__init__(channels, rng=rng, embed=embed)
        self.unary_key = Conv2d(channels, self.embed, 1, rng=rng, bias=False)

    def pairwise_affinity(self, x: Tensor) -> Tensor:
        return whitened_pairwise(_flatten(self.query(x)), _flatten(self.key(x)))

    def unary_affinity(self, x: Tensor) -> Tensor:
        return unary_term(_flatten(self.query(x)), _flatten(self.unary_key(x)))

    def forward(self, x: Tensor) -> Tensor:
        weights = ag.softmax(self.pairwise_affinity(x), axis=2) \
            + ag.softmax(self.unary_affinity(x), axis=2)
        return self._apply(weights, x)


class OceNlBlock(Module):
    """Entangled non-local: self-affinity times both plain/oriented cross-affinities."""

    def __init__(self, channels: int, *, rng: np.random.Generator, embed: int | None = None):
        super().__init__()
        self.channels = channels
        self.embed = max(channels // 2, 1) if embed is None else embed
        self.query = Conv2d(channels, self.embed, 1, rng=rng, bias=False)
        self.key = Conv2d(channels, self.embed, 1, rng=rng, bias=False)
        self.value = Conv2d(channels, channels, 1, rng=rng, bias=False)
        self.orient_query = Conv2d(channels, self.embed, 1, rng=rng, bias=False)
        self.orient_key = Conv2d(channels, self.embed, 1, rng=rng, bias=False)

    def _check(self, plain: Tensor, oriented: Tensor) -> None:
        if plain.shape != oriented.shape:
            raise DimensionError(
                f"entangled streams differ: {plain.shape} vs {oriented.shape}")

    def self_affinity(self, plain: Tensor) -> Tensor:
        q = _flatten(self.query(plain))
        k = _flatten(self.key(plain))
        return ag.matmul(q.transpose(0, 2, 1), k)

    def affinity(self, plain: Tensor, oriented: Tensor) -> Tensor:
        """Raw (N, P, P) product (QᵀK) ∘ (Q̃ᵀK) ∘ (QᵀK̃)."""
        self._check(plain, oriented)
        q = _flatten(self.query(plain))
        k = _flatten(self.key(plain))
        qo = _flatten(self.orient_query(oriented))
        ko = _flatten(self.orient_key(oriented))
        qt = q.transpose(0, 2, 1)
        return ag.matmul(qt, k) * ag.matmul(qo.transpose(0, 2, 1), k) * ag.matmul(qt, ko)

    def _apply(self, weights: Tensor, plain: Tensor) -> Tensor:
        n, c, h, w = plain.shape
        v = _flatten(self.value(plain))
        out = ag.matmul(v, weights.transpose(0, 2, 1))
        return plain + out.reshape(n, c, h, w)

    def forward(self, plain: Tensor, oriented: Tensor) -> Tensor:
        return self._apply(ag.softmax(self.affinity(plain, oriented), axis=2), plain)


class OceDnlBlock(OceNlBlock):
    """Entangled disentangled non-local: whitened triple product plus entangled unary."""

    def __init__(self, channels: int, *, rng: np.random.Generator, embed: int | None = None):
        super().__init__(channels, rng=rng, embed=embed)
        self.unary_key = Conv2d(channels, self.embed, 1, rng=rng, bias=False)
        self.orient_unary_key = Conv2d(channels, self.embed, 1, rng=rng, bias=False)

    def pairwise_affinity(self, plain: Tensor, oriented: Tensor) -> Tensor:
        self._check(plain, oriented)
        q = _flatten(self.query(plain))
        k = _flatten(self.key(plain))
        qo = _flatten(self.orient_query(oriented))
        ko = _flatten(self.orient_key(oriented))
        return whitened_pairwise(q, k) * whitened_pairwise(qo, k) * whitened_pairwise(q, ko)

    def unary_affinity(self, plain: Tensor, oriented: Tensor) -> Tensor:
        self._check(plain, oriented)
        plain_part = unary_term(_flatten(self.query(plain)),
                                _flatten(self.unary_key(plain)))
        orient_part = unary_term(_flatten(self.orient_query(oriented)),
                                 _flatten(self.orient_unary_key(oriented)))
        return plain_part * orient_part

    def forward(self, plain: Tensor, oriented: Tensor) -> Tensor:
        weights = ag.softmax(self.pairwise_affinity(plain, oriented), axis=2) \
            + ag.softmax(self.unary_affinity(plain, oriented), axis=2)
        return self._apply(weights, plain)


MSFM_CORES = ("oce_dnl", "oce_nl", "dnl", "nl", "self_attention",
              "addition_dnl", "concat_dnl")
_TWO_STREAM_CORES = ("oce_dnl", "oce_nl", "addition_dnl", "concat_dnl")


class MultiScaleFusion(Module):
    """Unify multi-scale features and refine them through a non-local core.

    Each scale is projected to a common width by a 1x1 convolution,
    bilinearly upsampled to the finest resolution, and the concatenation is
    fused to one map per stream.  The configured core consumes the fused
    plain map (and, for two-stream cores, the fused orientation map); its
    sigmoid joins the plain map through the configured gate:

      add:  out = sigmoid(core) + plain
      mul:  out = plain * sigmoid(core) + plain

    ``core_override`` replaces the core computation when set (a callable on
    the fused maps), pinning the gate for tests.
    """

    def __init__(self, scale_channels, *, rng: np.random.Generator, width: int = 32,
                 core: str = "oce_dnl", gate: str = "add"):
        super().__init__()
        scale_channels = tuple(scale_channels)
        if len(scale_channels) < 2:
            raise ContractError(f"needs at least 2 scales, got {len(scale_channels)}")
        if core not in MSFM_CORES:
            raise ConfigError(f"unknown fusion core {core!r}; choices: {MSFM_CORES}")
        if gate not in ("add", "mul"):
            raise ConfigError(f"unknown gate {gate!r}; choices: add, mul")
        self.scale_channels = scale_channels
        self.width = width
        self.core_kind = core
        self.gate = gate
        self.core_override = None
        self.plain_proj = ModuleList([Conv2d(c, width, 1, rng=rng) for c in scale_channels])
        self.plain_fuse = Conv2d(len(scale_channels) * width, width, 1, rng=rng)
        self.two_stream = core in _TWO_STREAM_CORES
        if self.two_stream:
            self.orient_proj = ModuleList([Conv2d(c, width, 1, rng=rng) for c in scale_channels])
            self.orient_fuse = Conv2d(len(scale_channels) * width, width, 1, rng=rng)
        if core == "concat_dnl":
            self.merge = Conv2d(2 * width, width, 1, rng=rng)
        if core == "oce_dnl":
            self.core = OceDnlBlock(width, rng=rng)
        elif core == "oce_nl":
            self.core = OceNlBlock(width, rng=rng)
        elif core in ("dnl", "addition_dnl", "concat_dnl"):
            self.core = DnlBlock(width, rng=rng)
        elif core == "nl":
            self.core = NonlocalBlock(width, rng=rng)
        else:
            self.core = SelfAttention2d(width, rng=rng)

    def _validate_scales(self, scales, label: str) -> None:
        if len(scales) != len(self.scale_channels):
            raise ContractError(
                f"{label}: configured for {len(self.scale_channels)} scales, got {len(scales)}")
        h, w = scales[0].shape[2:]
        for i, (t, c) in enumerate(zip(scales, self.scale_channels)):
            if t.shape[1] != c:
                raise DimensionError(f"{label} scale {i}: {t.shape[1]} channels, expected {c}")
            if t.shape[2] * 2 ** i != h or t.shape[3] * 2 ** i != w:
                raise DimensionError(
                    f"{label} scale {i}: spatial {t.shape[2:]} is not 1/{2 ** i} of {(h, w)}")

    def _stack(self, scales, projections, fuse) -> Tensor:
        maps = []
        for i, (t, proj) in enumerate(zip(scales, projections)):
            t = proj(t)
            if i > 0:
                t = ag.upsample_bilinear(t, 2 ** i)
            maps.append(t)
        return fuse(ag.concat_channels(maps))

    def _run_core(self, f_plain: Tensor, f_orient: Tensor | None) -> Tensor:
        if self.core_override is not None:
            return self.core_override(f_plain, f_orient)
        if self.core_kind in ("oce_dnl", "oce_nl"):
            return self.core(f_plain, f_orient)
        if self.core_kind == "addition_dnl":
            return self.core(f_plain + f_orient)
        if self.core_kind == "concat_dnl":
            return self.core(self.merge(ag.concat_channels([f_plain, f_orient])))
        return self.core(f_plain)

    def forward(self, plain_scales, orient_scales) -> Tensor:
        plain_scales = list(plain_scales)
        orient_scales = list(orient_scales)
        self._validate_scales(plain_scales, "plain stream")
        f_plain = self._stack(plain_scales, self.plain_proj, self.plain_fuse)
        f_orient = None
        if self.two_stream:
            self._validate_scales(orient_scales, "orientation stream")
            f_orient = self._stack(orient_scales, self.orient_proj, self.orient_fuse)
        gated = ag.sigmoid(self._run_core(f_plain, f_orient))
        if self.gate == "mul":
            return f_plain * gated + f_plain
        return gated + f_plain
