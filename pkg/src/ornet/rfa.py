"""Region-adaptive frequency aggregation.

Enhanced bands are upsampled to full resolution and concatenated into the
omni-frequency tensor. A 1x1 embedding predicts softmax coefficients over
``m`` basis kernels at every position; the blended kernel is applied as a
position-specific k x k convolution and squashed by a sigmoid into a
per-channel attention map that gates the omni features.

Because the blended kernel is linear in the basis, the production path
runs ``m`` ordinary convolutions and blends their outputs with the
coefficients. :func:`attention_map_positionwise` assembles each kernel
explicitly and is kept as a reference for tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .tensor import (
    Conv2dParams,
    Tensor,
    _make,
    bilinear_upsample,
    col2im,
    concat_channels,
    conv2d,
    im2col,
    mul,
    sigmoid,
    softmax_channels,
)


@dataclass
class KernelPool:
    """Basis bank of shape (m, in, c, k, k), shared bias (c,) and 1x1 embedding in -> m."""

    basis: Tensor
    bias: Tensor
    embedding: Conv2dParams

    def __post_init__(self):
        if self.basis.ndim != 5 or self.basis.shape[3] != self.basis.shape[4]:
            raise DimensionError(f"basis must be (m, in, c, k, k), got {self.basis.shape}")
        m, cin, c, _, _ = self.basis.shape
        if self.bias.shape != (c,):
            raise DimensionError(f"pool bias must be ({c},), got {self.bias.shape}")
        if self.embedding.kernel_size != 1 or self.embedding.out_channels != m or self.embedding.in_channels != cin:
            raise DimensionError("embedding must be a 1x1 convolution from in to m channels")

    @property
    def m(self) -> int:
        return self.basis.shape[0]

    @property
    def in_channels(self) -> int:
        return self.basis.shape[1]

    @property
    def out_channels(self) -> int:
        return self.basis.shape[2]

    @property
    def kernel_size(self) -> int:
        return self.basis.shape[3]

    def tensors(self) -> list[Tensor]:
        return [self.basis, self.bias] + self.embedding.tensors()


@dataclass
class AttentionMap:
    """Gate tensor ``A`` (N, c, H, W), the coefficients that built it, and band channel ranges."""

    A: Tensor
    alpha: Tensor
    band_slices: list[tuple[int, int]]

    def band(self, index: int) -> np.ndarray:
        start, stop = self.band_slices[index]
        return self.A.data[:, start:stop]

    @property
    def A_l(self) -> np.ndarray:
        return self.band(0)

    @property
    def A_h(self) -> np.ndarray:
        return self.band(len(self.band_slices) - 1)


def assemble_omni(bands: Sequence[Tensor]) -> tuple[Tensor, list[tuple[int, int]]]:
    """Concatenate enhanced bands (coarsest first) at the finest resolution.

    Each band is upsampled by repeated x2 steps, so the coarsest of three
    bands goes through two x2 upsamplings rather than one x4.
    """
    if not bands:
        raise DimensionError("assemble_omni: no bands")
    finest = bands[-1]
    levels = len(bands)
    parts, slices, offset = [], [], 0
    for i, band in enumerate(bands):
        steps = levels - 1 - i
        if band.ndim != 4 or band.shape[0] != finest.shape[0] or \
                band.shape[2] * 2 ** steps != finest.shape[2] or band.shape[3] * 2 ** steps != finest.shape[3]:
            raise DimensionError(f"assemble_omni: band {i} shape {band.shape} inconsistent with {finest.shape}")
        for _ in range(steps):
            band = bilinear_upsample(band, 2)
        parts.append(band)
        slices.append((offset, offset + band.shape[1]))
        offset += band.shape[1]
    return concat_channels(parts), slices


def coefficient_field(omni: Tensor, pool: KernelPool) -> Tensor:
    """Softmax-normalized per-position basis weights, shape (N, m, H, W)."""
    if omni.ndim != 4 or omni.shape[1] != pool.in_channels:
        raise DimensionError(f"coefficient_field: expected {pool.in_channels} channels, got {omni.shape}")
    return softmax_channels(conv2d(omni, pool.embedding))


def synthesize_kernel(alpha_at, pool: KernelPool) -> np.ndarray:
    """Blend the basis with a length-m weight vector into one (in, c, k, k) kernel."""
    a = np.asarray(alpha_at.data if isinstance(alpha_at, Tensor) else alpha_at, dtype=np.float64).reshape(-1)
    if a.shape[0] != pool.m:
        raise DimensionError(f"synthesize_kernel: {a.shape[0]} coefficients for {pool.m} basis kernels")
    return np.tensordot(a, pool.basis.data, axes=(0, 0))


def _basis_weights(pool: KernelPool) -> np.ndarray:
    """Basis as one stacked correlation weight of shape (m*c, in, k, k)."""
    m, cin, c, k, _ = pool.basis.shape
    return pool.basis.data.transpose(0, 2, 1, 3, 4).reshape(m * c, cin, k, k)


def dynamic_conv(omni: Tensor, alpha: Tensor, pool: KernelPool) -> Tensor:
    """Position-adaptive convolution ``sum_n alpha_n * (omni conv K_n) + bias``.

    Pre-activation of the attention map; same padding, stride 1.
    """
    m, cin, c, k, _ = pool.basis.shape
    if omni.ndim != 4 or omni.shape[1] != cin:
        raise DimensionError(f"dynamic_conv: expected {cin} input channels, got {omni.shape}")
    n, _, h, w = omni.shape
    if alpha.shape != (n, m, h, w):
        raise DimensionError(f"dynamic_conv: alpha shape {alpha.shape}, expected {(n, m, h, w)}")
    pad = k // 2
    wall = _basis_weights(pool).reshape(m * c, cin * k * k)
    cols, _, _ = im2col(omni.data, k, 1, pad)
    outs = np.matmul(wall, cols).reshape(n, m, c, h * w)
    a = alpha.data.reshape(n, m, 1, h * w)
    y = (outs * a).sum(axis=1)
    y += pool.bias.data.reshape(1, c, 1)
    xdata = omni.data
    del cols

    def grad_fn(g):
        g = g.reshape(n, 1, c, h * w)
        g_omni = g_alpha = g_basis = g_bias = None
        if alpha.requires_grad:
            g_alpha = (g * outs).sum(axis=2).reshape(n, m, h, w)
        per_basis = (g * a).reshape(n, m * c, h * w)
        if omni.requires_grad:
            g_omni = col2im(np.matmul(wall.T, per_basis), xdata.shape, k, 1, pad, h, w)
        if pool.basis.requires_grad:
            cols_b = im2col(xdata, k, 1, pad)[0]
            gw = np.matmul(per_basis, cols_b.transpose(0, 2, 1)).sum(axis=0)
            g_basis = gw.reshape(m, c, cin, k, k).transpose(0, 2, 1, 3, 4)
        if pool.bias.requires_grad:
            g_bias = g.sum(axis=(0, 1, 3))
        return g_omni, g_alpha, g_basis, g_bias

    return _make(y.reshape(n, c, h, w), (omni, alpha, pool.basis, pool.bias), grad_fn)


def attention_map(omni: Tensor, pool: KernelPool,
                  band_slices: list[tuple[int, int]] | None = None) -> AttentionMap:
    alpha = coefficient_field(omni, pool)
    A = sigmoid(dynamic_conv(omni, alpha, pool))
    return AttentionMap(A=A, alpha=alpha, band_slices=band_slices or [(0, A.shape[1])])


def attention_map_positionwise(omni: Tensor, pool: KernelPool) -> np.ndarray:
    """Reference evaluation: build the blended kernel at every pixel and apply it there."""
    alpha = coefficient_field(Tensor(omni.data), pool).data
    k = pool.kernel_size
    pad = k // 2
    n, cin, h, w = omni.shape
    xp = np.pad(omni.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty((n, pool.out_channels, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                kernel = synthesize_kernel(alpha[b, :, i, j], pool)
                window = xp[b, :, i:i + k, j:j + k]
                out[b, :, i, j] = np.einsum("iuv,icuv->c", window, kernel)
    out += pool.bias.data.reshape(1, -1, 1, 1)
    return 1.0 / (1.0 + np.exp(-out))


def aggregate(A: AttentionMap | Tensor, omni: Tensor) -> Tensor:
    gate = A.A if isinstance(A, AttentionMap) else A
    if gate.shape != omni.shape:
        raise DimensionError(f"aggregate: attention {gate.shape} vs features {omni.shape}")
    return mul(gate, omni)
