"""Axis-projected attention blocks.

A volumetric feature map is collapsed onto the three orthogonal planes
(sagittal = H, axial = W, coronal = D). Keys and queries live on the plane,
a local 3x3 group convolution mines plane context, two 1x1 convolutions turn
it into a per-plane gate, and the gate multiplies back onto the full 3D value
tensor by broadcasting along the collapsed axis. A selective-kernel gate then
mixes the attended tensor with the block input. Encoder blocks read a single
scale; decoder blocks take a coarse input for keys/values and a fine input
for queries, upsampling inside the block.

Two reference variants used for comparisons keep the same skeleton but move
the attention fully to 3D (``cot3d``) or fully to the projected plane
(``cot2d``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modules import Conv2d, Conv3d, ConvTranspose2d, ConvTranspose3d, Module, uniform_init
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    axis_pool,
    concatenate,
    norm_act,
    relu,
    softmax,
    unsqueeze,
)
from . import convops

AXES = ("sagittal", "axial", "coronal")
AXIS_DIM = {"sagittal": 2, "axial": 3, "coronal": 4}

PROJECTION_OPS = ("avg_plus_max", "avg", "max", "conv")
VARIANTS = ("apa", "cot2d", "cot3d")

SK_REDUCTION = 4
KEY_CONV_GROUPS = 4


@dataclass
class AttentionTrace:
    """Intermediates of one attention block, for inspection and tests."""

    k: Tensor
    q: Tensor
    l: Tensor
    g: Tensor
    h: Tensor

    def plane_elements(self) -> int:
        """Number of key/query elements per channel."""
        return int(np.prod(self.k.shape[2:]))


def _check_axis(axis: str):
    if axis not in AXES:
        raise ShapeError(f"unknown axis {axis!r}, expected one of {AXES}")


def project(x: Tensor, axis: str, op: str = "avg_plus_max", weight=None) -> Tensor:
    """Collapse one spatial axis of a (N, C, H, W, D) tensor to a plane map.

    ``avg_plus_max`` sums the mean- and max-pooled planes; ``conv`` reduces
    the axis with a per-channel kernel spanning its full extent (``weight``
    of shape (C, 1, extent), no padding).
    """
    _check_axis(axis)
    dim = AXIS_DIM[axis]
    if op == "avg_plus_max":
        return axis_pool(x, dim, "mean") + axis_pool(x, dim, "max")
    if op == "avg":
        return axis_pool(x, dim, "mean")
    if op == "max":
        return axis_pool(x, dim, "max")
    if op == "conv":
        if weight is None:
            raise ShapeError("conv projection requires a learned kernel")
        c = x.shape[1]
        extent = x.shape[dim]
        if weight.shape != (c, 1, extent):
            raise ShapeError(
                f"conv projection kernel {weight.shape} does not match "
                f"(channels, 1, axis extent) = {(c, 1, extent)}"
            )
        kshape = [c, 1, 1, 1, 1]
        kshape[dim] = extent
        y = convops.conv3d(x, weight.reshape(tuple(kshape)), None, groups=c)
        # the reduced axis has extent 1; drop it
        out_shape = tuple(s for i, s in enumerate(y.shape) if i != dim)
        return y.reshape(out_shape)
    raise ShapeError(f"unknown projection op {op!r}, expected one of {PROJECTION_OPS}")


class SKFusion(Module):
    """Two-branch selective-kernel gate mixing same-shape tensors h and x."""

    def __init__(self, channels: int, *, rng, dtype, reduction: int = SK_REDUCTION):
        super().__init__()
        self.channels = channels
        hidden = max(1, channels // reduction)
        self.squeeze = Conv3d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.select = Conv3d(hidden, 2 * channels, 1, rng=rng, dtype=dtype)

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        if h.shape != x.shape:
            raise ShapeError(f"sk_fuse branch shapes differ: {h.shape} vs {x.shape}")
        n, c = h.shape[:2]
        s = (h + x).mean(axis=(2, 3, 4), keepdims=True)
        z = relu(self.squeeze(s))
        logits = self.select(z).reshape((n, 2, c, 1, 1, 1))
        w = softmax(logits, axis=1)
        return w[:, 0] * h + w[:, 1] * x


class AxisFusion(Module):
    """Softmax-weighted sum of the three per-axis branches (Eq.-style simplex)."""

    def __init__(self, learned: bool, *, dtype):
        super().__init__()
        self.learned = learned
        logits = np.zeros(3, dtype=dtype)
        self.logits = Parameter(logits) if learned else Tensor(logits)

    def weights(self) -> Tensor:
        return softmax(self.logits, axis=0)

    def weights_array(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max()
        e = np.exp(z)
        return e / e.sum()

    def __call__(self, branches) -> Tensor:
        b0, b1, b2 = branches
        if not (b0.shape == b1.shape == b2.shape):
            raise ShapeError("fuse_axes branches must share a shape")
        w = self.weights()
        return w[0] * b0 + w[1] * b1 + w[2] * b2


def fuse_axes(branches, fusion: AxisFusion) -> Tensor:
    return fusion(branches)


def _proj_kernel(rng, channels, extent, dtype):
    return uniform_init(rng, (channels, 1, extent), extent, dtype)


class EncoderAttentionBlock(Module):
    """Single-axis attention block operating at one scale (variant ``apa``)."""

    def __init__(self, channels: int, axis: str, *, rng, dtype,
                 projection_op: str = "avg_plus_max", axis_extent: int | None = None):
        super().__init__()
        _check_axis(axis)
        if channels % KEY_CONV_GROUPS:
            raise ShapeError(f"block width {channels} must be divisible by {KEY_CONV_GROUPS}")
        self.axis = axis
        self.channels = channels
        self.projection_op = projection_op
        if projection_op == "conv":
            if axis_extent is None:
                raise ShapeError("conv projection needs the axis extent at build time")
            self.proj_weight = _proj_kernel(rng, channels, axis_extent, dtype)
        else:
            self.proj_weight = None
        self.value_proj = Conv3d(channels, channels, 1, rng=rng, dtype=dtype)
        self.key_conv = Conv2d(channels, channels, 3, rng=rng, dtype=dtype,
                               padding=1, groups=KEY_CONV_GROUPS)
        self.attn_a = Conv2d(2 * channels, channels, 1, rng=rng, dtype=dtype)
        self.attn_b = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.sk = SKFusion(channels, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor):
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeError(
                f"block expects (N, {self.channels}, H, W, D), got {x.shape}"
            )
        k = project(x, self.axis, self.projection_op, self.proj_weight)
        q = k
        l = norm_act(self.key_conv(k))
        g2 = self.attn_b(norm_act(self.attn_a(concatenate([l, q], axis=1))))
        g = unsqueeze(g2, AXIS_DIM[self.axis])
        v = self.value_proj(x)
        h = v * g
        y = self.sk(h, x)
        return y, AttentionTrace(k=k, q=q, l=l, g=g, h=h)


class DecoderAttentionBlock(Module):
    """Single-axis attention block fusing a coarse and a fine scale.

    The coarse input (2C channels, half extent) provides keys and values and
    is upsampled inside the block; the fine input (C channels) provides the
    queries and the fusion residual.
    """

    def __init__(self, channels: int, axis: str, *, rng, dtype,
                 projection_op: str = "avg_plus_max", axis_extent: int | None = None):
        super().__init__()
        _check_axis(axis)
        if channels % KEY_CONV_GROUPS:
            raise ShapeError(f"block width {channels} must be divisible by {KEY_CONV_GROUPS}")
        self.axis = axis
        self.channels = channels
        self.projection_op = projection_op
        if projection_op == "conv":
            if axis_extent is None or axis_extent % 2:
                raise ShapeError("conv projection needs an even axis extent at build time")
            self.proj_weight = _proj_kernel(rng, channels, axis_extent, dtype)
            self.proj_weight_low = _proj_kernel(rng, 2 * channels, axis_extent // 2, dtype)
        else:
            self.proj_weight = None
            self.proj_weight_low = None
        self.key_upsample = ConvTranspose2d(
            2 * channels, channels, 3, rng=rng, dtype=dtype,
            stride=2, padding=1, output_padding=1, groups=KEY_CONV_GROUPS,
        )
        self.value_upsample = ConvTranspose3d(
            2 * channels, channels, 3, rng=rng, dtype=dtype,
            stride=2, padding=1, output_padding=1,
        )
        self.attn_a = Conv2d(2 * channels, channels, 1, rng=rng, dtype=dtype)
        self.attn_b = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.sk = SKFusion(channels, rng=rng, dtype=dtype)

    def __call__(self, x_low: Tensor, x_high: Tensor):
        c = self.channels
        if x_high.ndim != 5 or x_high.shape[1] != c:
            raise ShapeError(f"high-res input must be (N, {c}, H, W, D), got {x_high.shape}")
        if x_low.ndim != 5 or x_low.shape[1] != 2 * c:
            raise ShapeError(f"low-res input must be (N, {2 * c}, h, w, d), got {x_low.shape}")
        if x_low.shape[0] != x_high.shape[0]:
            raise ShapeError("batch sizes differ between resolutions")
        high_sp = x_high.shape[2:]
        low_sp = x_low.shape[2:]
        if tuple(2 * s for s in low_sp) != tuple(high_sp):
            raise ShapeError(
                f"low-res extents {low_sp} must be exactly half of high-res {high_sp}"
            )
        q = project(x_high, self.axis, self.projection_op, self.proj_weight)
        k = project(x_low, self.axis, self.projection_op, self.proj_weight_low)
        l = norm_act(self.key_upsample(k))
        g2 = self.attn_b(norm_act(self.attn_a(concatenate([l, q], axis=1))))
        g = unsqueeze(g2, AXIS_DIM[self.axis])
        v = self.value_upsample(x_low)
        h = v * g
        y = self.sk(h, x_high)
        return y, AttentionTrace(k=k, q=q, l=l, g=g, h=h)


class Cot3dBlock(Module):
    """Fully 3D contextual-attention reference: keys/queries keep the volume."""

    def __init__(self, channels: int, axis: str = "sagittal", *, rng, dtype, **_):
        super().__init__()
        if channels % KEY_CONV_GROUPS:
            raise ShapeError(f"block width {channels} must be divisible by {KEY_CONV_GROUPS}")
        self.channels = channels
        self.axis = axis  # ignored; kept for a uniform constructor signature
        self.value_proj = Conv3d(channels, channels, 1, rng=rng, dtype=dtype)
        self.key_conv = Conv3d(channels, channels, 3, rng=rng, dtype=dtype,
                               padding=1, groups=KEY_CONV_GROUPS)
        self.attn_a = Conv3d(2 * channels, channels, 1, rng=rng, dtype=dtype)
        self.attn_b = Conv3d(channels, channels, 1, rng=rng, dtype=dtype)
        self.sk = SKFusion(channels, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor):
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeError(f"block expects (N, {self.channels}, H, W, D), got {x.shape}")
        k = x
        q = x
        l = norm_act(self.key_conv(k))
        g = self.attn_b(norm_act(self.attn_a(concatenate([l, q], axis=1))))
        v = self.value_proj(x)
        h = v * g
        y = self.sk(h, x)
        return y, AttentionTrace(k=k, q=q, l=l, g=g, h=h)


class Cot2dBlock(Module):
    """Fully projected reference: values collapse to the plane as well."""

    def __init__(self, channels: int, axis: str, *, rng, dtype,
                 projection_op: str = "avg_plus_max", axis_extent: int | None = None):
        super().__init__()
        _check_axis(axis)
        if channels % KEY_CONV_GROUPS:
            raise ShapeError(f"block width {channels} must be divisible by {KEY_CONV_GROUPS}")
        self.axis = axis
        self.channels = channels
        self.projection_op = projection_op
        if projection_op == "conv":
            if axis_extent is None:
                raise ShapeError("conv projection needs the axis extent at build time")
            self.proj_weight = _proj_kernel(rng, channels, axis_extent, dtype)
        else:
            self.proj_weight = None
        self.value_proj = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.key_conv = Conv2d(channels, channels, 3, rng=rng, dtype=dtype,
                               padding=1, groups=KEY_CONV_GROUPS)
        self.attn_a = Conv2d(2 * channels, channels, 1, rng=rng, dtype=dtype)
        self.attn_b = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.sk = SKFusion(channels, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor):
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeError(f"block expects (N, {self.channels}, H, W, D), got {x.shape}")
        dim = AXIS_DIM[self.axis]
        k = project(x, self.axis, self.projection_op, self.proj_weight)
        q = k
        l = norm_act(self.key_conv(k))
        g2 = self.attn_b(norm_act(self.attn_a(concatenate([l, q], axis=1))))
        v2 = self.value_proj(k)
        h2 = v2 * g2
        # broadcast the plane result back along the collapsed axis
        ones_shape = [1, 1, 1, 1, 1]
        ones_shape[dim] = x.shape[dim]
        h = unsqueeze(h2, dim) * Tensor(np.ones(ones_shape, dtype=x.dtype))
        y = self.sk(h, x)
        return y, AttentionTrace(k=k, q=q, l=l, g=unsqueeze(g2, dim), h=h)


_BLOCKS = {"apa": EncoderAttentionBlock, "cot2d": Cot2dBlock, "cot3d": Cot3dBlock}


def build_encoder_block(variant: str, channels: int, axis: str, *, rng, dtype,
                        projection_op: str = "avg_plus_max",
                        axis_extent: int | None = None) -> Module:
    """Factory over the block variants; ``apa`` is the default architecture."""
    if variant not in _BLOCKS:
        raise ShapeError(f"unknown block variant {variant!r}, expected one of {VARIANTS}")
    return _BLOCKS[variant](channels, axis, rng=rng, dtype=dtype,
                            projection_op=projection_op, axis_extent=axis_extent)


def cot_variant_block(x: Tensor, block: Module) -> Tensor:
    """Run any block variant, returning just the output tensor."""
    y, _ = block(x)
    return y
