"""Volumetric and sequence layers with hand-written backward rules."""

from __future__ import annotations

import numpy as np

from .core import ShapeError, Tensor, make_result


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,D,H,W]`` with ``w[K,C,kd,kh,kw]``.

    Output spatial size is ``(in + 2*padding - k) // stride + 1`` per axis.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-d input and weight, got {x.shape} and {w.shape}")
    n, c, *spatial = x.shape
    k, cw, *ksize = w.shape
    if c != cw:
        raise ShapeError(f"conv3d: input has {c} channels but weight {w.shape} expects {cw}")
    if stride < 1:
        raise ShapeError(f"conv3d: stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({k},)")
    p, s = padding, stride
    padded = [d + 2 * p for d in spatial]
    if any(kk > d for kk, d in zip(ksize, padded)):
        raise ShapeError(f"conv3d: kernel {tuple(ksize)} larger than padded input {tuple(padded)}")
    out_sp = [(d - kk) // s + 1 for d, kk in zip(padded, ksize)]

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    do, ho, wo = out_sp
    offsets = [(a, b, e) for a in range(ksize[0]) for b in range(ksize[1]) for e in range(ksize[2])]
    nk = len(offsets)
    # column matrix [N, C, k^3, Do, Ho, Wo]; the matmul contracts C*k^3
    col = np.empty((n, c, nk, do, ho, wo), dtype=np.result_type(x.data, w.data))
    for j, (a, b, e) in enumerate(offsets):
        col[:, :, j] = xp[:, :, a:a + s * do:s, b:b + s * ho:s, e:e + s * wo:s]
    col = col.reshape(n, c * nk, do * ho * wo)
    wmat = w.data.reshape(k, c * nk)
    out = np.matmul(wmat, col)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, k, do, ho, wo)

    def backward(g):
        g2 = g.reshape(n, k, do * ho * wo)
        gw = None
        if w.requires_grad:
            gw = np.zeros((k, c * nk), dtype=g.dtype)
            for i in range(n):
                gw += g2[i] @ col[i].T
            gw = gw.reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcol = np.matmul(wmat.T, g2).reshape(n, c, nk, do, ho, wo)
            gxp = np.zeros_like(xp)
            for j, (a, b, e) in enumerate(offsets):
                gxp[:, :, a:a + s * do:s, b:b + s * ho:s, e:e + s * wo:s] += gcol[:, :, j]
            gx = gxp[:, :, p:p + spatial[0], p:p + spatial[1], p:p + spatial[2]] if p else gxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out, parents, backward, "conv3d")


def instance_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) over its spatial voxels, then apply a per-channel affine."""
    if x.ndim < 3:
        raise ShapeError(f"instance_norm: expected [N,C,...], got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or offset.shape != (c,):
        raise ShapeError(f"instance_norm: gain/offset must be ({c},), got {gain.shape}, {offset.shape}")
    axes = tuple(range(2, x.ndim))
    m = int(np.prod(x.shape[2:]))
    bshape = (1, c) + (1,) * len(axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data.reshape(bshape) + offset.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0,) + axes) if gain.requires_grad else None
        go = g.sum(axis=(0,) + axes) if offset.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * gain.data.reshape(bshape)
            s1 = gxh.sum(axis=axes, keepdims=True)
            s2 = (gxh * xhat).sum(axis=axes, keepdims=True)
            gx = (inv / m) * (m * gxh - s1 - xhat * s2)
        return gx, gg, go

    return make_result(out.astype(x.dtype, copy=False), (x, gain, offset), backward, "instance_norm")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate every voxel ``factor**3`` times."""
    n, c, d, h, w = x.shape
    f = factor
    out = np.broadcast_to(x.data[:, :, :, None, :, None, :, None], (n, c, d, f, h, f, w, f))
    out = out.reshape(n, c, d * f, h * f, w * f)

    def backward(g):
        return (g.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)),)

    return make_result(out, (x,), backward, "upsample_nearest")


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., Cin] @ w[Cin, Cout] (+ bias)``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        gb = g.reshape(-1, w.shape[1]).sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out, parents, backward, "linear")


def causal_conv1d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution over the sequence axis of ``x[N,L,C]`` with ``w[C,K]``."""
    n, length, c = x.shape
    if w.shape[0] != c or bias.shape != (c,):
        raise ShapeError(f"causal_conv1d: input {x.shape}, weight {w.shape}, bias {bias.shape}")
    k = w.shape[1]
    xp = np.pad(x.data, ((0, 0), (k - 1, 0), (0, 0)))
    out = np.broadcast_to(bias.data, x.shape).copy()
    for j in range(k):
        out += xp[:, j:j + length, :] * w.data[:, j]

    def backward(g):
        gw = np.stack([(g * xp[:, j:j + length, :]).sum(axis=(0, 1)) for j in range(k)], axis=1)
        gb = g.sum(axis=(0, 1))
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j:j + length, :] += g * w.data[:, j]
        return np.ascontiguousarray(gxp[:, k - 1:, :]), gw, gb

    return make_result(out, (x, w, bias), backward, "causal_conv1d")


def filter1d_valid(x: Tensor, kernel: np.ndarray, axis: int) -> Tensor:
    """Correlate ``x`` with a fixed 1-d kernel along ``axis`` (valid region only)."""
    kernel = np.asarray(kernel, dtype=x.dtype)
    k = kernel.size
    n = x.shape[axis]
    if n < k:
        raise ShapeError(f"filter1d_valid: axis {axis} has {n} samples, kernel needs {k}")
    m = n - k + 1
    xm = np.moveaxis(x.data, axis, 0)
    out = kernel[0] * xm[0:m]
    for i in range(1, k):
        out = out + kernel[i] * xm[i:i + m]
    out = np.ascontiguousarray(np.moveaxis(out, 0, axis))

    def backward(g):
        gm = np.moveaxis(g, axis, 0)
        gx = np.zeros((n,) + gm.shape[1:], dtype=g.dtype)
        for i in range(k):
            gx[i:i + m] += kernel[i] * gm
        return (np.ascontiguousarray(np.moveaxis(gx, 0, axis)),)

    return make_result(out, (x,), backward, "filter1d_valid")


def separable_filter3d(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Apply the same 1-d kernel along the last three axes (valid region)."""
    for axis in (-3, -2, -1):
        x = filter1d_valid(x, kernel, x.ndim + axis)
    return x
