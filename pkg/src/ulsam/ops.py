"""Convolution, pooling, activation, and normalization kernels.

Every op is a pure function: it validates shapes, computes the forward result
from ``Tensor.data``, and attaches an analytic backward closure to the output.
Kernels are deterministic (fixed reduction order, no RNG) and never mutate
their inputs; batch-norm running statistics are the one piece of state, held
in plain arrays owned by the caller and updated only in training mode.

Layout convention: rank-4 activations ``(batch, channels, height, width)``.
Convolution is cross-correlation (no kernel flip). Max-pool padding uses -inf
so padded cells never win, and gradient on ties goes to the first maximum in
row-major window order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import instrument
from .errors import ConfigurationError
from .tensor import Array, Tensor, needs_tape

CONV_STANDARD = "standard"
CONV_DEPTHWISE = "depthwise"
CONV_POINTWISE = "pointwise"


@dataclass
class ConvSpec:
    """Configuration + weights for one convolution.

    Weight layouts: standard ``(n, m, k, k)``, depthwise ``(m, k, k)`` (one
    kernel per input channel), pointwise ``(n, m, 1, 1)``.
    """

    kind: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    weights: Tensor
    bias: Optional[Tensor] = None

    def __post_init__(self):
        if self.kind not in (CONV_STANDARD, CONV_DEPTHWISE, CONV_POINTWISE):
            raise ConfigurationError(f"unknown conv kind {self.kind!r}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigurationError(
                f"conv: stride must be >= 1 and padding >= 0, got stride={self.stride} padding={self.padding}"
            )
        if self.kind == CONV_DEPTHWISE:
            if self.out_channels != self.in_channels:
                raise ConfigurationError(
                    f"depthwise conv: out_channels {self.out_channels} != in_channels {self.in_channels}"
                )
            expect = (self.in_channels, self.kernel, self.kernel)
            if self.weights.shape != expect:
                raise ConfigurationError(f"depthwise weights shape {self.weights.shape}, expected {expect}")
        elif self.kind == CONV_POINTWISE:
            if self.kernel != 1:
                raise ConfigurationError(f"pointwise conv requires kernel 1, got {self.kernel}")
            expect = (self.out_channels, self.in_channels, 1, 1)
            if self.weights.shape != expect:
                raise ConfigurationError(f"pointwise weights shape {self.weights.shape}, expected {expect}")
        else:
            expect = (self.out_channels, self.in_channels, self.kernel, self.kernel)
            if self.weights.shape != expect:
                raise ConfigurationError(f"standard conv weights shape {self.weights.shape}, expected {expect}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ConfigurationError(f"bias shape {self.bias.shape}, expected ({self.out_channels},)")


def _require_rank4(x: Tensor, who: str) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"{who}: expected rank-4 (batch, channels, height, width), got shape {x.shape}")


def _out_extent(h: int, pad: int, k: int, stride: int, who: str) -> int:
    span = h + 2 * pad - k
    if span < 0:
        raise ConfigurationError(f"{who}: kernel {k} does not fit padded extent {h + 2 * pad}")
    return span // stride + 1


def _windows(xp: Array, k: int, stride: int, h_out: int, w_out: int) -> Array:
    """Strided (b, c, h_out, w_out, k, k) view over a padded array."""
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(b, c, h_out, w_out, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )


def _pad_spatial(x: Array, pad: int, value: float = 0.0) -> Array:
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def conv2d_standard(x: Tensor, spec: ConvSpec) -> Tensor:
    """Dense cross-correlation over all input channels."""
    if spec.kind != CONV_STANDARD:
        raise ConfigurationError(f"conv2d_standard called with kind {spec.kind!r}")
    _require_rank4(x, "conv2d_standard")
    b, m, h, w = x.shape
    if m != spec.in_channels:
        raise ConfigurationError(f"conv2d_standard: input has {m} channels but spec.in_channels is {spec.in_channels}")
    k, stride, pad, n = spec.kernel, spec.stride, spec.padding, spec.out_channels
    h_out = _out_extent(h, pad, k, stride, "conv2d_standard")
    w_out = _out_extent(w, pad, k, stride, "conv2d_standard")

    xp = _pad_spatial(x.data, pad)
    win = _windows(xp, k, stride, h_out, w_out)
    # (b*hw, m*k*k) @ (m*k*k, n): one GEMM per forward
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h_out * w_out, m * k * k)
    w_mat = spec.weights.data.reshape(n, m * k * k)
    out = cols @ w_mat.T
    instrument.tally(CONV_STANDARD, b * n * h_out * w_out * m * k * k)
    if spec.bias is not None:
        out = out + spec.bias.data[None, :]
    out = out.reshape(b, h_out, w_out, n).transpose(0, 3, 1, 2)

    inputs = (x, spec.weights) + ((spec.bias,) if spec.bias is not None else ())
    result = Tensor(np.ascontiguousarray(out), parents=tuple(t for t in inputs), name="conv2d")
    if not needs_tape(*inputs):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, spec=spec, cols=cols, shape=(b, m, h, w), geom=(h_out, w_out)) -> None:
        bb, mm, hh, ww = shape
        ho, wo = geom
        kk, st, pd, nn = spec.kernel, spec.stride, spec.padding, spec.out_channels
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bb * ho * wo, nn)
        if needs_tape(spec.weights):
            dw = (g_mat.T @ cols).reshape(nn, mm, kk, kk)
            spec.weights.accumulate_grad(dw)
        if spec.bias is not None and needs_tape(spec.bias):
            spec.bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if needs_tape(x):
            dxp = np.zeros((bb, mm, hh + 2 * pd, ww + 2 * pd), dtype=g.dtype)
            wdat = spec.weights.data
            for i in range(kk):
                for j in range(kk):
                    # (b,n,ho,wo) x (n,m) -> (b,ho,wo,m)
                    contrib = np.tensordot(g, wdat[:, :, i, j], axes=([1], [0]))
                    dxp[:, :, i : i + st * ho : st, j : j + st * wo : st] += contrib.transpose(0, 3, 1, 2)
            x.accumulate_grad(dxp[:, :, pd : pd + hh, pd : pd + ww] if pd else dxp)

    result._backward = _bwd
    return result


def depthwise_conv(x: Tensor, spec: ConvSpec) -> Tensor:
    """Per-channel cross-correlation: output channel c depends only on input channel c."""
    if spec.kind != CONV_DEPTHWISE:
        raise ConfigurationError(f"depthwise_conv called with kind {spec.kind!r}")
    _require_rank4(x, "depthwise_conv")
    b, m, h, w = x.shape
    if m != spec.in_channels:
        raise ConfigurationError(f"depthwise_conv: input has {m} channels but spec.in_channels is {spec.in_channels}")
    k, stride, pad = spec.kernel, spec.stride, spec.padding
    h_out = _out_extent(h, pad, k, stride, "depthwise_conv")
    w_out = _out_extent(w, pad, k, stride, "depthwise_conv")

    xp = _pad_spatial(x.data, pad)
    win = _windows(xp, k, stride, h_out, w_out)
    out = np.einsum("bchwij,cij->bchw", win, spec.weights.data, optimize=True)
    instrument.tally(CONV_DEPTHWISE, b * m * h_out * w_out * k * k)
    if spec.bias is not None:
        out = out + spec.bias.data[None, :, None, None]

    inputs = (x, spec.weights) + ((spec.bias,) if spec.bias is not None else ())
    result = Tensor(np.ascontiguousarray(out), parents=inputs, name="depthwise_conv")
    if not needs_tape(*inputs):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, spec=spec, xp=xp, shape=(b, m, h, w), geom=(h_out, w_out)) -> None:
        bb, mm, hh, ww = shape
        ho, wo = geom
        kk, st, pd = spec.kernel, spec.stride, spec.padding
        if needs_tape(spec.weights):
            win_b = _windows(xp, kk, st, ho, wo)
            dw = np.einsum("bchwij,bchw->cij", win_b, g, optimize=True)
            spec.weights.accumulate_grad(dw)
        if spec.bias is not None and needs_tape(spec.bias):
            spec.bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if needs_tape(x):
            dxp = np.zeros((bb, mm, hh + 2 * pd, ww + 2 * pd), dtype=g.dtype)
            wdat = spec.weights.data
            for i in range(kk):
                for j in range(kk):
                    dxp[:, :, i : i + st * ho : st, j : j + st * wo : st] += g * wdat[None, :, i, j, None, None]
            x.accumulate_grad(dxp[:, :, pd : pd + hh, pd : pd + ww] if pd else dxp)

    result._backward = _bwd
    return result


def pointwise_conv(x: Tensor, spec: ConvSpec) -> Tensor:
    """1x1 convolution: a linear mix across channels at each spatial position."""
    if spec.kind != CONV_POINTWISE:
        raise ConfigurationError(f"pointwise_conv called with kind {spec.kind!r}")
    if spec.stride != 1 or spec.padding != 0:
        raise ConfigurationError("pointwise_conv: stride must be 1 and padding 0")
    _require_rank4(x, "pointwise_conv")
    b, m, h, w = x.shape
    if m != spec.in_channels:
        raise ConfigurationError(f"pointwise_conv: input has {m} channels but spec.in_channels is {spec.in_channels}")
    n = spec.out_channels
    w2d = spec.weights.data.reshape(n, m)
    out = np.matmul(w2d, x.data.reshape(b, m, h * w)).reshape(b, n, h, w)
    instrument.tally(CONV_POINTWISE, b * m * n * h * w)
    if spec.bias is not None:
        out = out + spec.bias.data[None, :, None, None]

    inputs = (x, spec.weights) + ((spec.bias,) if spec.bias is not None else ())
    result = Tensor(out, parents=inputs, name="pointwise_conv")
    if not needs_tape(*inputs):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, spec=spec, shape=(b, m, h, w)) -> None:
        bb, mm, hh, ww = shape
        nn = spec.out_channels
        g_flat = g.reshape(bb, nn, hh * ww)
        if needs_tape(spec.weights):
            x_flat = x.data.reshape(bb, mm, hh * ww)
            dw = np.einsum("bnl,bml->nm", g_flat, x_flat, optimize=True)
            spec.weights.accumulate_grad(dw.reshape(nn, mm, 1, 1))
        if spec.bias is not None and needs_tape(spec.bias):
            spec.bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if needs_tape(x):
            w2d_b = spec.weights.data.reshape(nn, mm)
            dx = np.matmul(w2d_b.T, g_flat).reshape(bb, mm, hh, ww)
            x.accumulate_grad(dx)

    result._backward = _bwd
    return result


# ---------------------------------------------------------------------------
# pooling / softmax / redistribution
# ---------------------------------------------------------------------------


def maxpool_3x3_p1(x: Tensor) -> Tensor:
    """3x3 max pool, padding 1, stride 1: spatial shape is preserved.

    Padding is -inf so padded cells never win; ties route the gradient to the
    first maximum in row-major window order.
    """
    _require_rank4(x, "maxpool_3x3_p1")
    b, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ConfigurationError("maxpool_3x3_p1: spatial extents must be >= 1")
    xp = _pad_spatial(x.data, 1, value=-np.inf)
    win = _windows(xp, 3, 1, h, w).reshape(b, c, h, w, 9)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    result = Tensor(np.ascontiguousarray(out), parents=(x,), name="maxpool_3x3_p1")
    if not needs_tape(x):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, idx=idx, shape=(b, c, h, w)) -> None:
        if not needs_tape(x):
            return
        bb, cc, hh, ww = shape
        dxp = np.zeros((bb, cc, hh + 2, ww + 2), dtype=g.dtype)
        bi = np.arange(bb)[:, None, None, None]
        ci = np.arange(cc)[None, :, None, None]
        hi = np.arange(hh)[None, None, :, None]
        wi = np.arange(ww)[None, None, None, :]
        np.add.at(dxp, (bi, ci, hi + idx // 3, wi + idx % 3), g)
        x.accumulate_grad(dxp[:, :, 1 : 1 + hh, 1 : 1 + ww])

    result._backward = _bwd
    return result


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over the h*w positions of a single-channel map, per batch item.

    Max-subtracted for stability; outputs are in (0,1) and sum to 1 per item.
    """
    _require_rank4(x, "spatial_softmax")
    b, c, h, w = x.shape
    if c != 1:
        raise ConfigurationError(f"spatial_softmax: expected exactly 1 channel, got {c}")
    z = x.data.reshape(b, h * w)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    result = Tensor(s.reshape(b, 1, h, w), parents=(x,), name="spatial_softmax")
    if not needs_tape(x):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, s=s, shape=(b, h, w)) -> None:
        if not needs_tape(x):
            return
        bb, hh, ww = shape
        gf = g.reshape(bb, hh * ww)
        dot = (gf * s).sum(axis=1, keepdims=True)
        x.accumulate_grad((s * (gf - dot)).reshape(bb, 1, hh, ww))

    result._backward = _bwd
    return result


def broadcast_mul_add(f: Tensor, a: Tensor) -> Tensor:
    """Feature redistribution ``(a * f) + f`` with ``a`` broadcast across channels."""
    _require_rank4(f, "broadcast_mul_add")
    _require_rank4(a, "broadcast_mul_add")
    if a.shape[1] != 1:
        raise ConfigurationError(f"broadcast_mul_add: attention map must have 1 channel, got {a.shape[1]}")
    if a.shape[0] != f.shape[0] or a.shape[2:] != f.shape[2:]:
        raise ConfigurationError(
            f"broadcast_mul_add: spatial/batch extents of map {a.shape} do not match features {f.shape}"
        )
    out = a.data * f.data + f.data
    result = Tensor(out, parents=(f, a), name="broadcast_mul_add")
    if not needs_tape(f, a):
        result._parents = ()
        return result

    def _bwd(g: Array, f=f, a=a) -> None:
        if needs_tape(f):
            f.accumulate_grad(g * (a.data + 1.0))
        if needs_tape(a):
            a.accumulate_grad((g * f.data).sum(axis=1, keepdims=True))

    result._backward = _bwd
    return result


def channel_concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel extent, in argument order."""
    if not parts:
        raise ConfigurationError("channel_concat: need at least one part")
    for p in parts:
        _require_rank4(p, "channel_concat")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ConfigurationError(f"channel_concat: part shape {p.shape} incompatible with {ref}")
    out = np.concatenate([p.data for p in parts], axis=1)
    result = Tensor(out, parents=tuple(parts), name="channel_concat")
    if not needs_tape(*parts):
        result._parents = ()
        return result

    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def _bwd(g: Array, parts=tuple(parts), offsets=offsets) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if needs_tape(p):
                p.accumulate_grad(g[:, lo:hi])

    result._backward = _bwd
    return result


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous channel slice ``[start, stop)`` with gradient routing."""
    _require_rank4(x, "channel_slice")
    if not (0 <= start < stop <= x.shape[1]):
        raise ConfigurationError(f"channel_slice: [{start}, {stop}) out of range for {x.shape[1]} channels")
    out = x.data[:, start:stop].copy()
    result = Tensor(out, parents=(x,), name="channel_slice")
    if not needs_tape(x):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, start=start, stop=stop) -> None:
        if not needs_tape(x):
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:, start:stop] += g

    result._backward = _bwd
    return result


def slice1d(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` of a rank-1 tensor (used for per-group weight views)."""
    if x.ndim != 1:
        raise ConfigurationError(f"slice1d: expected rank-1 tensor, got shape {x.shape}")
    if not (0 <= start < stop <= x.shape[0]):
        raise ConfigurationError(f"slice1d: [{start}, {stop}) out of range for length {x.shape[0]}")
    result = Tensor(x.data[start:stop].copy(), parents=(x,), name="slice1d")
    if not needs_tape(x):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, start=start, stop=stop) -> None:
        if not needs_tape(x):
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[start:stop] += g

    result._backward = _bwd
    return result


def reshape(x: Tensor, shape: tuple) -> Tensor:
    """Reshape with gradient routing; element count must be preserved."""
    out = x.data.reshape(shape)
    result = Tensor(out.copy(), parents=(x,), name="reshape")
    if not needs_tape(x):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x) -> None:
        if needs_tape(x):
            x.accumulate_grad(g.reshape(x.shape))

    result._backward = _bwd
    return result


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of ``x`` by a per-(batch, channel) scalar ``s`` of shape (b, c, 1, 1)."""
    _require_rank4(x, "scale_channels")
    _require_rank4(s, "scale_channels")
    if s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ConfigurationError(f"scale_channels: scale shape {s.shape}, expected {(x.shape[0], x.shape[1], 1, 1)}")
    out = x.data * s.data
    result = Tensor(out, parents=(x, s), name="scale_channels")
    if not needs_tape(x, s):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, s=s) -> None:
        if needs_tape(x):
            x.accumulate_grad(g * s.data)
        if needs_tape(s):
            s.accumulate_grad((g * x.data).sum(axis=(2, 3), keepdims=True))

    result._backward = _bwd
    return result


# ---------------------------------------------------------------------------
# auxiliary ops
# ---------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extents; output (b, c, 1, 1)."""
    _require_rank4(x, "global_avg_pool")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    result = Tensor(out, parents=(x,), name="global_avg_pool")
    if not needs_tape(x):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, hw=h * w) -> None:
        if needs_tape(x):
            x.accumulate_grad(np.broadcast_to(g / hw, x.shape).copy())

    result._backward = _bwd
    return result


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ W + b``; accepts (b, f) or (b, f, 1, 1) inputs, W is (f, out)."""
    if x.ndim == 4:
        b = x.shape[0]
        feat = x.shape[1] * x.shape[2] * x.shape[3]
    elif x.ndim == 2:
        b, feat = x.shape
    else:
        raise ConfigurationError(f"fully_connected: expected rank 2 or 4 input, got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[0] != feat:
        raise ConfigurationError(f"fully_connected: weight shape {weight.shape} incompatible with {feat} features")
    out_features = weight.shape[1]
    if bias is not None and bias.shape != (out_features,):
        raise ConfigurationError(f"fully_connected: bias shape {bias.shape}, expected ({out_features},)")

    x2d = x.data.reshape(b, feat)
    out = x2d @ weight.data
    instrument.tally("fc", b * feat * out_features)
    if bias is not None:
        out = out + bias.data[None, :]

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    result = Tensor(out, parents=inputs, name="fully_connected")
    if not needs_tape(*inputs):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, weight=weight, bias=bias, b=b, feat=feat) -> None:
        x2d_b = x.data.reshape(b, feat)
        if needs_tape(weight):
            weight.accumulate_grad(x2d_b.T @ g)
        if bias is not None and needs_tape(bias):
            bias.accumulate_grad(g.sum(axis=0))
        if needs_tape(x):
            x.accumulate_grad((g @ weight.data.T).reshape(x.shape))

    result._backward = _bwd
    return result


def _elementwise(x: Tensor, out_data: Array, local_grad: Array, name: str) -> Tensor:
    result = Tensor(out_data, parents=(x,), name=name)
    if not needs_tape(x):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, local_grad=local_grad) -> None:
        if needs_tape(x):
            x.accumulate_grad(g * local_grad)

    result._backward = _bwd
    return result


def relu(x: Tensor) -> Tensor:
    return _elementwise(x, np.maximum(x.data, 0.0), (x.data > 0).astype(x.dtype), "relu")


def relu6(x: Tensor) -> Tensor:
    out = np.minimum(np.maximum(x.data, 0.0), 6.0)
    mask = ((x.data > 0) & (x.data < 6)).astype(x.dtype)
    return _elementwise(x, out, mask, "relu6")


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _elementwise(x, s, s * (1.0 - s), "sigmoid")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Array,
    running_var: Array,
    train: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (batch, height, width).

    Training mode uses biased batch statistics and folds them into the running
    buffers as ``running = momentum * running + (1 - momentum) * batch``;
    inference mode normalizes with the running buffers only.
    """
    _require_rank4(x, "batch_norm")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"batch_norm: gamma/beta must have shape ({c},)")
    if train:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    inputs = (x, gamma, beta)
    result = Tensor(out, parents=inputs, name="batch_norm")
    if not needs_tape(*inputs):
        result._parents = ()
        return result

    def _bwd(g: Array, x=x, gamma=gamma, beta=beta, x_hat=x_hat, inv_std=inv_std, train=train) -> None:
        if needs_tape(beta):
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if needs_tape(gamma):
            gamma.accumulate_grad((g * x_hat).sum(axis=(0, 2, 3)))
        if needs_tape(x):
            scale = gamma.data[None, :, None, None] * inv_std[None, :, None, None]
            if train:
                g_mean = g.mean(axis=(0, 2, 3), keepdims=True)
                gx_mean = (g * x_hat).mean(axis=(0, 2, 3), keepdims=True)
                x.accumulate_grad(scale * (g - g_mean - x_hat * gx_mean))
            else:
                x.accumulate_grad(scale * g)

    result._backward = _bwd
    return result
