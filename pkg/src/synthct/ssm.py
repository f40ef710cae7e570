"""Selective state-space (Mamba-style) block over flattened 3D feature maps.

The recurrence per channel ``c`` and state index ``n`` is::

    h[t] = exp(delta[t, c] * A[c, n]) * h[t-1] + delta[t, c] * B[t, n] * x[t, c]
    y[t, c] = sum_n C[t, n] * h[t] + D[c] * x[t, c]

with ``h[-1] = 0``. A is zero-order-hold discretized, B uses the Euler rule.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .layers import Linear, Module, kaiming
from .tensor import ShapeError, Tensor
from .tensor.core import make_result as _make

FORWARD_RASTER = "forward_raster"
REVERSE_RASTER = "reverse_raster"


def discretize(delta: np.ndarray, A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Abar, Bbar)`` for per-step ``delta[..., C]``, ``A[C, N]`` and ``B[..., N]``.

    Shapes broadcast to ``[..., C, N]``.
    """
    delta = np.asarray(delta)[..., None]
    Abar = np.exp(delta * A)
    Bbar = delta * np.asarray(B)[..., None, :]
    return Abar, Bbar


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Sequential selective scan.

    Shapes: ``u, delta: [batch, L, C]``, ``A: [C, N]``, ``B, C: [batch, L, N]``,
    ``D: [C]``. Returns ``y: [batch, L, C]``. The backward pass runs the
    reverse-time adjoint of the recurrence.
    """
    nb, length, ch = u.shape
    nstate = A.shape[1]
    if delta.shape != u.shape or A.shape != (ch, nstate) or D.shape != (ch,):
        raise ShapeError(f"selective_scan: u {u.shape}, delta {delta.shape}, A {A.shape}, D {D.shape}")
    if B.shape != (nb, length, nstate) or C.shape != (nb, length, nstate):
        raise ShapeError(f"selective_scan: B {B.shape} / C {C.shape} must be {(nb, length, nstate)}")

    dl = delta.data[..., None]
    dA = np.exp(dl * A.data)                      # [b, L, C, N]
    dBu = dl * B.data[:, :, None, :] * u.data[..., None]
    hs = np.empty_like(dA)
    h = np.zeros((nb, ch, nstate), dtype=dA.dtype)
    for t in range(length):
        h = dA[:, t] * h + dBu[:, t]
        hs[:, t] = h
    y = np.einsum("blcn,bln->blc", hs, C.data) + u.data * D.data

    def backward(gy):
        gD = (gy * u.data).sum(axis=(0, 1))
        gC = np.einsum("blcn,blc->bln", hs, gy)
        direct = gy[..., None] * C.data[:, :, None, :]
        lam = np.empty_like(hs)
        carry = np.zeros((nb, ch, nstate), dtype=hs.dtype)
        for t in range(length - 1, -1, -1):
            carry = direct[:, t] + carry
            lam[:, t] = carry
            carry = dA[:, t] * carry
        h_prev = np.zeros_like(hs)
        h_prev[:, 1:] = hs[:, :-1]
        g_logA = lam * h_prev * dA               # d/d(delta*A)
        g_dBu = lam
        gdelta = (g_logA * A.data).sum(axis=-1) + (g_dBu * B.data[:, :, None, :]).sum(axis=-1) * u.data
        gA = (g_logA * dl).sum(axis=(0, 1))
        gB = (g_dBu * dl * u.data[..., None]).sum(axis=2)
        gu = gy * D.data + (g_dBu * B.data[:, :, None, :]).sum(axis=-1) * delta.data
        return gu, gdelta, gA, gB, gC, gD

    return _make(y, (u, delta, A, B, C, D), backward, "selective_scan")


def flatten_volume(x: Tensor) -> Tensor:
    """``[N, C, D, H, W]`` -> ``[N, D*H*W, C]`` in (z, y, x) raster order."""
    n, c = x.shape[:2]
    return T.transpose(T.reshape(x, (n, c, -1)), (0, 2, 1))


def unflatten_volume(seq: Tensor, spatial: tuple[int, int, int]) -> Tensor:
    n, _, c = seq.shape
    return T.reshape(T.transpose(seq, (0, 2, 1)), (n, c) + tuple(spatial))


class MambaBlock(Module):
    """Residual selective-SSM block: in-proj, causal conv + silu, scan, silu gate, out-proj."""

    def __init__(
        self,
        rng: np.random.Generator,
        channels: int,
        state_dim: int = 8,
        expand: int = 2,
        conv_width: int = 4,
        orientations: tuple[str, ...] = (FORWARD_RASTER,),
    ):
        for o in orientations:
            if o not in (FORWARD_RASTER, REVERSE_RASTER):
                raise ValueError(f"unknown scan orientation {o!r}")
        inner = expand * channels
        self.channels = channels
        self.state_dim = state_dim
        self.inner = inner
        self.dt_rank = max(1, math.ceil(channels / 16))
        self.orientations = tuple(orientations)

        self.in_proj = Linear(rng, channels, 2 * inner, bias=False)
        self.conv_weight = kaiming(rng, (inner, conv_width), conv_width)
        self.conv_bias = Tensor(np.zeros(inner), requires_grad=True)
        self.x_proj = Linear(rng, inner, self.dt_rank + 2 * state_dim, bias=False)
        self.dt_proj = Linear(rng, self.dt_rank, inner, bias=True)
        # A = -exp(A_log) starts in [-1, -0.1]
        self.A_log = Tensor(np.log(rng.uniform(0.1, 1.0, size=(inner, state_dim))), requires_grad=True)
        self.D = Tensor(np.ones(inner), requires_grad=True)
        self.out_proj = Linear(rng, inner, channels, bias=False)

    def mix(self, seq: Tensor) -> Tensor:
        """Sequence mixer on ``[N, L, C]`` without the residual."""
        xz = self.in_proj(seq)
        xs = xz[:, :, : self.inner]
        z = xz[:, :, self.inner:]
        xs = T.silu(T.causal_conv1d(xs, self.conv_weight, self.conv_bias))
        proj = self.x_proj(xs)
        r, n = self.dt_rank, self.state_dim
        delta = T.softplus(self.dt_proj(proj[:, :, :r]))
        Bm = proj[:, :, r:r + n]
        Cm = proj[:, :, r + n:]
        A = -T.exp(self.A_log)
        y = selective_scan(xs, delta, A, Bm, Cm, self.D)
        return self.out_proj(y * T.silu(z))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeError(f"MambaBlock({self.channels}): bad input shape {x.shape}")
        spatial = x.shape[2:]
        seq = flatten_volume(x)
        out = None
        for o in self.orientations:
            if o == FORWARD_RASTER:
                branch = self.mix(seq)
            else:
                branch = T.flip(self.mix(T.flip(seq, 1)), 1)
            out = branch if out is None else out + branch
        return x + unflatten_volume(out, spatial)
