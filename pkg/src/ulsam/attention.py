"""Subspace attention (ULSAM) and a squeeze-excitation comparison block.

The ULSAM block splits an m-channel feature map into g contiguous groups of
width G = m / g, infers one spatial attention map per group as

    A = spatial_softmax( PW1( maxpool_3x3_p1( DW1x1(F_group) ) ) )

and redistributes features as ``(A * F_group) + F_group`` before concatenating
the groups back together. The depthwise stage has one scalar per channel and
the pointwise stage one filter (G scalars) per group, so the whole block costs
exactly ``2 m`` parameters regardless of g. Neither stage carries a bias, and
there is no normalization or activation besides the softmax.

``g = m`` degenerates to a per-channel non-linear gate; ``case3_attention``
evaluates that closed form directly (scalar multiplies instead of convolution
plumbing) and must agree bitwise with the grouped path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigurationError, StateError
from .tensor import Array, Tensor, parameter


@dataclass(frozen=True)
class UlsamConfig:
    """Channel count and group count; group width is derived."""

    channels: int
    groups: int

    def __post_init__(self):
        if self.channels < 1 or self.groups < 1:
            raise ConfigurationError(f"ulsam: channels and groups must be positive, got {self.channels}, {self.groups}")
        if self.groups > self.channels:
            raise ConfigurationError(f"ulsam: groups {self.groups} exceeds channels {self.channels}")
        if self.channels % self.groups != 0:
            raise ConfigurationError(
                f"ulsam: groups {self.groups} does not divide channels {self.channels} evenly"
            )

    @property
    def group_width(self) -> int:
        return self.channels // self.groups


@dataclass
class UlsamWeights:
    """Flat per-channel weights; group ñ owns the slice [ñ*G, (ñ+1)*G) of each.

    ``dw`` holds the 1x1 depthwise scalars, ``pw`` the single pointwise filter
    of each group. Total parameter count is 2m for every valid g.
    """

    dw: Tensor
    pw: Tensor

    def __post_init__(self):
        if self.dw.ndim != 1 or self.pw.ndim != 1 or self.dw.shape != self.pw.shape:
            raise ConfigurationError(
                f"ulsam weights must be two equal-length vectors, got {self.dw.shape} and {self.pw.shape}"
            )

    @property
    def param_count(self) -> int:
        return int(self.dw.size + self.pw.size)


def init_ulsam_weights(cfg: UlsamConfig, rng: np.random.Generator, dtype=np.float64) -> UlsamWeights:
    """Fan-in scaled init: zero-mean normal with variance 2 / G keeps logits O(1)."""
    std = float(np.sqrt(2.0 / cfg.group_width))
    dw = parameter(rng.normal(0.0, std, size=cfg.channels).astype(dtype), name="ulsam.dw")
    pw = parameter(rng.normal(0.0, std, size=cfg.channels).astype(dtype), name="ulsam.pw")
    return UlsamWeights(dw, pw)


def split_groups(f: Tensor, groups: int) -> list[Tensor]:
    """Split the channel extent into ``groups`` contiguous equal slices, in order."""
    if f.ndim != 4:
        raise ConfigurationError(f"split_groups: expected rank-4 input, got shape {f.shape}")
    m = f.shape[1]
    if groups < 1 or m % groups != 0:
        raise ConfigurationError(f"split_groups: {groups} groups do not divide {m} channels evenly")
    width = m // groups
    return [ops.channel_slice(f, i * width, (i + 1) * width) for i in range(groups)]


def attention_map(f_group: Tensor, dw_group: Tensor, pw_group: Tensor) -> Tensor:
    """Single-channel attention distribution for one group; sums to 1 over (i, j)."""
    if f_group.ndim != 4:
        raise ConfigurationError(f"attention_map: expected rank-4 input, got shape {f_group.shape}")
    width = f_group.shape[1]
    if dw_group.shape != (width,) or pw_group.shape != (width,):
        raise ConfigurationError(
            f"attention_map: weight lengths {dw_group.shape}/{pw_group.shape} do not match group width {width}"
        )
    dw_spec = ops.ConvSpec(
        ops.CONV_DEPTHWISE, width, width, kernel=1, stride=1, padding=0,
        weights=ops.reshape(dw_group, (width, 1, 1)),
    )
    z = ops.depthwise_conv(f_group, dw_spec)
    p = ops.maxpool_3x3_p1(z)
    pw_spec = ops.ConvSpec(
        ops.CONV_POINTWISE, width, 1, kernel=1, stride=1, padding=0,
        weights=ops.reshape(pw_group, (1, width, 1, 1)),
    )
    logits = ops.pointwise_conv(p, pw_spec)
    return ops.spatial_softmax(logits)


def ulsam_attention_maps(f: Tensor, cfg: UlsamConfig, weights: UlsamWeights) -> Tensor:
    """All g attention maps stacked on the channel extent: shape (b, g, h, w)."""
    _check_input(f, cfg, weights)
    width = cfg.group_width
    maps = []
    for i, f_group in enumerate(split_groups(f, cfg.groups)):
        dw_i = ops.slice1d(weights.dw, i * width, (i + 1) * width)
        pw_i = ops.slice1d(weights.pw, i * width, (i + 1) * width)
        maps.append(attention_map(f_group, dw_i, pw_i))
    return ops.channel_concat(maps)


def ulsam_forward(f: Tensor, cfg: UlsamConfig, weights: UlsamWeights) -> Tensor:
    """Grouped attention + residual redistribution; output shape equals input shape."""
    _check_input(f, cfg, weights)
    width = cfg.group_width
    refined = []
    for i, f_group in enumerate(split_groups(f, cfg.groups)):
        dw_i = ops.slice1d(weights.dw, i * width, (i + 1) * width)
        pw_i = ops.slice1d(weights.pw, i * width, (i + 1) * width)
        a = attention_map(f_group, dw_i, pw_i)
        refined.append(ops.broadcast_mul_add(f_group, a))
    return ops.channel_concat(refined)


def _check_input(f: Tensor, cfg: UlsamConfig, weights: UlsamWeights) -> None:
    if f.ndim != 4:
        raise ConfigurationError(f"ulsam: expected rank-4 input, got shape {f.shape}")
    if f.shape[1] != cfg.channels:
        raise ConfigurationError(f"ulsam: input has {f.shape[1]} channels but config says {cfg.channels}")
    if weights.dw.shape != (cfg.channels,):
        raise ConfigurationError(
            f"ulsam: weight length {weights.dw.shape[0]} does not match {cfg.channels} channels"
        )


def case3_attention(f: Tensor, weights: UlsamWeights) -> Tensor:
    """Closed form of the g = m degenerate case: per-channel scalar gate.

    Computes softmax(a2 * maxpool(a1 * F_c)) for every channel c with plain
    scalar multiplies, reusing the same pooling and softmax kernels, so it is
    bitwise comparable with the grouped path at g = m.
    """
    if f.ndim != 4:
        raise ConfigurationError(f"case3_attention: expected rank-4 input, got shape {f.shape}")
    b, m, h, w = f.shape
    if weights.dw.shape != (m,):
        raise ConfigurationError(f"case3_attention: weights length {weights.dw.shape[0]} != {m} channels (g = m)")
    a1 = weights.dw.data
    a2 = weights.pw.data
    z = Tensor(f.data * a1[None, :, None, None])
    p = ops.maxpool_3x3_p1(z)
    logits = p.data * a2[None, :, None, None]
    # fold channels into the batch extent so the per-channel softmax reuses the kernel
    s = ops.spatial_softmax(Tensor(logits.reshape(b * m, 1, h, w)))
    return Tensor(s.data.reshape(b, m, h, w))


class UlsamBlock:
    """Stateful wrapper: owns the weights, records the last forward for backward()."""

    def __init__(
        self,
        channels: int,
        groups: int,
        weights: Optional[UlsamWeights] = None,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
    ):
        self.config = UlsamConfig(channels, groups)
        if weights is None:
            weights = init_ulsam_weights(self.config, rng or np.random.default_rng(0), dtype)
        self.weights = weights
        self._last: Optional[tuple[Tensor, Tensor]] = None

    @property
    def param_count(self) -> int:
        return self.weights.param_count

    def forward(self, x: Tensor) -> Tensor:
        if not (x.requires_grad or x._parents):
            x = Tensor(x.data, requires_grad=True)
        out = ulsam_forward(x, self.config, self.weights)
        self._last = (x, out)
        return out

    __call__ = forward

    def attention_maps(self, x: Tensor) -> Tensor:
        return ulsam_attention_maps(x, self.config, self.weights)

    def backward(self, upstream: Array) -> tuple[Array, Array, Array]:
        """Gradients (d_input, d_dw, d_pw) for the most recent forward pass."""
        if self._last is None:
            raise StateError("ulsam backward called before any forward pass")
        x, out = self._last
        x.zero_grad()
        self.weights.dw.zero_grad()
        self.weights.pw.zero_grad()
        out.backward(np.asarray(upstream, dtype=out.dtype))
        zeros = lambda t: np.zeros_like(t.data)
        return (
            x.grad if x.grad is not None else zeros(x),
            self.weights.dw.grad if self.weights.dw.grad is not None else zeros(self.weights.dw),
            self.weights.pw.grad if self.weights.pw.grad is not None else zeros(self.weights.pw),
        )


# ---------------------------------------------------------------------------
# squeeze-excitation baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeConfig:
    """Channel count and MLP reduction ratio; r must divide m."""

    channels: int
    reduction: int = 16

    def __post_init__(self):
        if self.channels < 1 or self.reduction < 1:
            raise ConfigurationError("se: channels and reduction must be positive")
        if self.channels % self.reduction != 0:
            raise ConfigurationError(
                f"se: reduction {self.reduction} does not divide channels {self.channels}"
            )

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction


@dataclass
class SeWeights:
    w1: Tensor  # (m, m/r)
    w2: Tensor  # (m/r, m)

    @property
    def param_count(self) -> int:
        return int(self.w1.size + self.w2.size)


def init_se_weights(cfg: SeConfig, rng: np.random.Generator, dtype=np.float64) -> SeWeights:
    s1 = float(np.sqrt(2.0 / cfg.channels))
    s2 = float(np.sqrt(2.0 / cfg.hidden))
    w1 = parameter(rng.normal(0.0, s1, size=(cfg.channels, cfg.hidden)).astype(dtype), name="se.w1")
    w2 = parameter(rng.normal(0.0, s2, size=(cfg.hidden, cfg.channels)).astype(dtype), name="se.w2")
    return SeWeights(w1, w2)


def se_forward(f: Tensor, cfg: SeConfig, weights: SeWeights) -> Tensor:
    """Scale each channel by sigmoid(W2 . relu(W1 . gap(F))); no biases."""
    if f.ndim != 4:
        raise ConfigurationError(f"se_forward: expected rank-4 input, got shape {f.shape}")
    b, m, _, _ = f.shape
    if m != cfg.channels:
        raise ConfigurationError(f"se_forward: input has {m} channels but config says {cfg.channels}")
    if weights.w1.shape != (cfg.channels, cfg.hidden) or weights.w2.shape != (cfg.hidden, cfg.channels):
        raise ConfigurationError(
            f"se_forward: weight shapes {weights.w1.shape}/{weights.w2.shape} do not match "
            f"({cfg.channels}, {cfg.hidden})/({cfg.hidden}, {cfg.channels})"
        )
    squeezed = ops.global_avg_pool(f)
    hidden = ops.relu(ops.fully_connected(squeezed, weights.w1))
    gates = ops.sigmoid(ops.fully_connected(hidden, weights.w2))
    return ops.scale_channels(f, ops.reshape(gates, (b, m, 1, 1)))


class SeBlock:
    def __init__(
        self,
        channels: int,
        reduction: int = 16,
        weights: Optional[SeWeights] = None,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
    ):
        self.config = SeConfig(channels, reduction)
        self.weights = weights if weights is not None else init_se_weights(self.config, rng or np.random.default_rng(0), dtype)

    @property
    def param_count(self) -> int:
        return self.weights.param_count

    def forward(self, x: Tensor) -> Tensor:
        return se_forward(x, self.config, self.weights)

    __call__ = forward
