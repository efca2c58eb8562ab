"""N-dimensional cross-correlation and its transpose, with autodiff hooks.

Convolutions here are cross-correlations (no kernel flip), the usual deep
learning convention. Forward and backward both run through a single
im2col/col2im pair built from one cached index map, which makes the transpose
convolution the exact adjoint of the convolution with the same geometry.

Weight layouts follow the (out, in/groups, *kernel) convention for ``conv``
and (in, out/groups, *kernel) for ``transpose_conv``.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _as_tensor, _make


def _tuple_of(v, n: int, name: str):
    if isinstance(v, int):
        v = (v,) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ShapeError(f"{name} must have {n} entries, got {v}")
    return v


_INDEX_CACHE: dict = {}


def _col_index(channels, padded, kernel, stride):
    """Flat indices (C*K, L) into an array of shape (C, *padded).

    Column l enumerates output positions in row-major order; row (c, t)
    enumerates channel-major kernel taps. Cached per geometry.
    """
    key = (channels, padded, kernel, stride)
    hit = _INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    nd = len(padded)
    out = tuple((padded[i] - kernel[i]) // stride[i] + 1 for i in range(nd))
    if any(o < 1 for o in out):
        raise ShapeError(
            f"kernel {kernel} does not fit into padded extents {padded}"
        )
    pstride = np.cumprod((1,) + padded[::-1])[::-1][1:]  # row-major strides

    tap = np.zeros(1, dtype=np.int64)
    start = np.zeros(1, dtype=np.int64)
    for i in range(nd):
        tap = (tap[:, None] + np.arange(kernel[i]) * pstride[i]).reshape(-1)
        start = (start[:, None] + np.arange(out[i]) * stride[i] * pstride[i]).reshape(-1)
    chan = np.arange(channels, dtype=np.int64) * int(np.prod(padded))
    idx = (chan[:, None, None] + tap[None, :, None] + start[None, None, :]).reshape(
        channels * tap.size, start.size
    )
    _INDEX_CACHE[key] = (idx, out)
    return idx, out


def _pad_spatial(x, padding):
    if not any(padding):
        return x
    pads = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    return np.pad(x, pads)


def _im2col(x, kernel, stride, padding):
    """x (N, C, *S) -> columns (N, C*K, L) and the output spatial extents."""
    n, c = x.shape[:2]
    xp = _pad_spatial(x, padding)
    padded = xp.shape[2:]
    idx, out = _col_index(c, padded, kernel, stride)
    cols = xp.reshape(n, -1)[:, idx.reshape(-1)].reshape(n, idx.shape[0], idx.shape[1])
    return cols, out


def _col2im(cols, n, c, spatial, kernel, stride, padding):
    """Adjoint of _im2col: scatter-add columns back to (N, C, *spatial)."""
    padded = tuple(s + 2 * p for s, p in zip(spatial, padding))
    idx, _ = _col_index(c, padded, kernel, stride)
    flat = idx.reshape(-1)
    size = c * int(np.prod(padded))
    out = np.empty((n, size), dtype=cols.dtype)
    for i in range(n):
        out[i] = np.bincount(flat, weights=cols[i].reshape(-1), minlength=size)
    out = out.reshape((n, c) + padded)
    if any(padding):
        sl = (slice(None), slice(None)) + tuple(
            slice(p, p + s) for s, p in zip(spatial, padding)
        )
        out = np.ascontiguousarray(out[sl])
    return out


def _group_matmul(w2, cols, cout, groups):
    """Per-group (Cout_g, K) @ (N, K_g, L) -> (N, Cout, L)."""
    n, _, ncols = cols.shape
    if groups == 1:
        return np.matmul(w2, cols)
    kg = cols.shape[1] // groups
    cg = cout // groups
    out = np.empty((n, cout, ncols), dtype=cols.dtype)
    for g in range(groups):
        out[:, g * cg : (g + 1) * cg] = np.matmul(
            w2[g * cg : (g + 1) * cg], cols[:, g * kg : (g + 1) * kg]
        )
    return out


def _group_matmul_t(w2, y, groups):
    """Per-group (K_g, Cout_g) @ (N, Cout_g, L) -> (N, K, L); adjoint of above."""
    n, cout, ncols = y.shape
    if groups == 1:
        return np.matmul(w2.T, y)
    cg = cout // groups
    kg = w2.shape[1]
    out = np.empty((n, groups * kg, ncols), dtype=y.dtype)
    for g in range(groups):
        out[:, g * kg : (g + 1) * kg] = np.matmul(
            w2[g * cg : (g + 1) * cg].T, y[:, g * cg : (g + 1) * cg]
        )
    return out


def _check_conv_args(x, w, nd, groups, kind):
    if x.ndim != nd + 2:
        raise ShapeError(f"{kind} expects a {nd + 2}-d input, got shape {x.shape}")
    if w.ndim != nd + 2:
        raise ShapeError(f"{kind} expects a {nd + 2}-d weight, got shape {w.shape}")
    cin = x.shape[1]
    if kind.startswith("transpose"):
        if w.shape[0] != cin:
            raise ShapeError(
                f"{kind}: weight leading dim {w.shape[0]} != input channels {cin}"
            )
        if cin % groups:
            raise ShapeError(f"{kind}: in-channels {cin} not divisible by groups {groups}")
    else:
        if w.shape[1] * groups != cin:
            raise ShapeError(
                f"{kind}: weight expects {w.shape[1] * groups} in-channels, input has {cin}"
            )
        if w.shape[0] % groups:
            raise ShapeError(f"{kind}: out-channels {w.shape[0]} not divisible by groups {groups}")


# -- convolution ----------------------------------------------------------------


def _conv_nd(x, weight, bias, stride, padding, groups, nd):
    kind = f"conv{nd}d"
    x, weight = _as_tensor(x), _as_tensor(weight)
    stride = _tuple_of(stride, nd, "stride")
    padding = _tuple_of(padding, nd, "padding")
    if any(s < 1 for s in stride) or any(p < 0 for p in padding):
        raise ShapeError(f"{kind}: stride must be >= 1 and padding >= 0")
    _check_conv_args(x.data, weight.data, nd, groups, kind)

    xd, wd = x.data, weight.data
    n, cin = xd.shape[:2]
    cout = wd.shape[0]
    kernel = wd.shape[2:]
    spatial = xd.shape[2:]

    w2 = wd.reshape(cout, -1)
    if kernel == (1,) * nd and stride == (1,) * nd and not any(padding):
        cols = xd.reshape(n, cin, -1)
        out_dims = spatial
    else:
        cols, out_dims = _im2col(xd, kernel, stride, padding)
    y = _group_matmul(w2, cols, cout, groups).reshape((n, cout) + tuple(out_dims))

    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (cout,):
            raise ShapeError(f"{kind}: bias must have shape ({cout},), got {bias.data.shape}")
        y = y + bias.data.reshape((1, cout) + (1,) * nd)
        parents.append(bias)

    def vjp(g):
        go = g.reshape(n, cout, -1)
        if kernel == (1,) * nd and stride == (1,) * nd and not any(padding):
            cols_b = xd.reshape(n, cin, -1)
            gcols = _group_matmul_t(w2, go, groups)
            gx = gcols.reshape(xd.shape)
        else:
            cols_b, _ = _im2col(xd, kernel, stride, padding)
            gcols = _group_matmul_t(w2, go, groups)
            gx = _col2im(gcols, n, cin, spatial, kernel, stride, padding)
        if groups == 1:
            gw = np.matmul(go, cols_b.transpose(0, 2, 1)).sum(axis=0)
        else:
            cg = cout // groups
            kg = cols_b.shape[1] // groups
            gw = np.empty((cout, kg), dtype=wd.dtype)
            for gi in range(groups):
                gw[gi * cg : (gi + 1) * cg] = np.matmul(
                    go[:, gi * cg : (gi + 1) * cg],
                    cols_b[:, gi * kg : (gi + 1) * kg].transpose(0, 2, 1),
                ).sum(axis=0)
        grads = [gx, gw.reshape(wd.shape)]
        if bias is not None:
            grads.append(g.reshape(n, cout, -1).sum(axis=(0, 2)))
        return tuple(grads)

    return _make(y, parents, vjp)


def conv3d(x, weight, bias=None, stride=1, padding=0, groups=1) -> Tensor:
    """Cross-correlate a (N, C, H, W, D) tensor with (Cout, Cin/g, kh, kw, kd)."""
    return _conv_nd(x, weight, bias, stride, padding, groups, 3)


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1) -> Tensor:
    """Cross-correlate a (N, C, A, B) tensor with (Cout, Cin/g, ka, kb)."""
    return _conv_nd(x, weight, bias, stride, padding, groups, 2)


# -- transpose convolution --------------------------------------------------------


def _transpose_conv_nd(x, weight, bias, stride, padding, output_padding, groups, nd):
    kind = f"transpose_conv{nd}d"
    x, weight = _as_tensor(x), _as_tensor(weight)
    stride = _tuple_of(stride, nd, "stride")
    padding = _tuple_of(padding, nd, "padding")
    output_padding = _tuple_of(output_padding, nd, "output_padding")
    if any(s < 1 for s in stride):
        raise ShapeError(f"{kind}: stride must be >= 1")
    if any(not 0 <= op < s for op, s in zip(output_padding, stride)):
        raise ShapeError(
            f"{kind}: output_padding {output_padding} must satisfy 0 <= op < stride {stride}"
        )
    _check_conv_args(x.data, weight.data, nd, groups, kind)

    xd, wd = x.data, weight.data
    n, cin = xd.shape[:2]
    coutg = wd.shape[1]
    cout = coutg * groups
    kernel = wd.shape[2:]
    in_spatial = xd.shape[2:]
    out_spatial = tuple(
        (i - 1) * s - 2 * p + k + op
        for i, s, p, k, op in zip(in_spatial, stride, padding, kernel, output_padding)
    )
    if any(o < 1 for o in out_spatial):
        raise ShapeError(f"{kind}: non-positive output extents {out_spatial}")

    # Adjoint of the conv mapping (N, Cout, out) -> (N, Cin, in) with weight wd
    # read as (out=Cin, in=Cout/g, *kernel). output_padding is already folded
    # into out_spatial, which sizes the scatter buffer.
    w2 = wd.reshape(cin, -1)
    cols = _group_matmul_t(w2, xd.reshape(n, cin, -1), groups)
    y = _col2im(cols, n, cout, out_spatial, kernel, stride, padding)

    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (cout,):
            raise ShapeError(f"{kind}: bias must have shape ({cout},), got {bias.data.shape}")
        y = y + bias.data.reshape((1, cout) + (1,) * nd)
        parents.append(bias)

    def vjp(g):
        gcols, _ = _im2col(g, kernel, stride, padding)
        gx = _group_matmul(w2, gcols, cin, groups).reshape(xd.shape)
        x2 = xd.reshape(n, cin, -1)
        if groups == 1:
            gw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0)
        else:
            cing = cin // groups
            kg = gcols.shape[1] // groups
            gw = np.empty((cin, kg), dtype=wd.dtype)
            for gi in range(groups):
                gw[gi * cing : (gi + 1) * cing] = np.matmul(
                    x2[:, gi * cing : (gi + 1) * cing],
                    gcols[:, gi * kg : (gi + 1) * kg].transpose(0, 2, 1),
                ).sum(axis=0)
        grads = [gx, gw.reshape(wd.shape)]
        if bias is not None:
            grads.append(g.reshape(n, cout, -1).sum(axis=(0, 2)))
        return tuple(grads)

    return _make(y, parents, vjp)


def transpose_conv3d(x, weight, bias=None, stride=1, padding=0, output_padding=0, groups=1) -> Tensor:
    """Adjoint of conv3d; weight layout (Cin, Cout/g, kh, kw, kd)."""
    return _transpose_conv_nd(x, weight, bias, stride, padding, output_padding, groups, 3)


def transpose_conv2d(x, weight, bias=None, stride=1, padding=0, output_padding=0, groups=1) -> Tensor:
    """Adjoint of conv2d; weight layout (Cin, Cout/g, ka, kb)."""
    return _transpose_conv_nd(x, weight, bias, stride, padding, output_padding, groups, 2)
