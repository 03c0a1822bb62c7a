"""Dense float32 building blocks for the bypass adapters.

Conventions used throughout the package:

* a *feature grid* is a ``(channels, height, width)`` float32 array;
* a *token sequence* is a ``(N + 1, dim)`` float32 array whose row 0 is the
  class token and rows ``1..N`` are patch tokens in row-major grid order.

Everything here is a pure function of its inputs. Dot products longer than
``WIDE_ACCUMULATION`` terms accumulate in float64 before the result is cast
back to float32.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, InputError, ShapeError

WIDE_ACCUMULATION = 256
LAYER_NORM_EPS = 1e-6
# Tap offsets are signed 32-bit quantities in the weight file format.
MAX_DILATION = 2**31 - 1


def check_grid(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 3:
        raise ShapeError(f"feature grid must be (C, H, W), got shape {grid.shape}")
    if grid.shape[1] < 1 or grid.shape[2] < 1:
        raise ShapeError("feature grid needs at least one spatial position")
    if not np.all(np.isfinite(grid)):
        raise InputError("feature grid contains non-finite values")
    return grid


def check_tokens(tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float32)
    if tokens.ndim != 2:
        raise ShapeError(f"token sequence must be (N+1, D), got shape {tokens.shape}")
    if tokens.shape[0] < 2:
        raise ShapeError("token sequence needs a class token and at least one patch")
    if not np.all(np.isfinite(tokens)):
        raise InputError("token sequence contains non-finite values")
    return tokens


def patch_side(tokens: np.ndarray) -> int:
    """Side length of the square patch grid behind a token sequence."""
    n = tokens.shape[0] - 1
    side = math.isqrt(n)
    if side * side != n:
        raise ShapeError(f"patch count {n} is not a perfect square")
    return side


def tokens_to_grid(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split off the class token and fold patch tokens into a (D, s, s) grid."""
    tokens = check_tokens(tokens)
    side = patch_side(tokens)
    grid = tokens[1:].T.reshape(tokens.shape[1], side, side)
    return tokens[0].copy(), np.ascontiguousarray(grid)


def grid_to_tokens(cls_token: np.ndarray, grid: np.ndarray) -> np.ndarray:
    channels = grid.shape[0]
    patches = grid.reshape(channels, -1).T
    return np.concatenate([cls_token[None, :], patches], axis=0).astype(np.float32, copy=False)


def _matmul(a: np.ndarray, b: np.ndarray, inner: int) -> np.ndarray:
    if inner > WIDE_ACCUMULATION:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    return (a @ b).astype(np.float32, copy=False)


def depthwise_conv3x3(grid: np.ndarray, kernels: np.ndarray, dilation: int = 1) -> np.ndarray:
    """Per-channel dilated 3x3 correlation with zero padding ("same" output size)."""
    grid = check_grid(grid)
    kernels = np.asarray(kernels, dtype=np.float32)
    channels, height, width = grid.shape
    if kernels.shape != (channels, 3, 3):
        raise ConfigError(
            f"expected {channels} depth-wise 3x3 kernels, got array of shape {kernels.shape}"
        )
    dilation = int(dilation)
    if dilation < 1:
        raise ConfigError("dilation must be >= 1")
    if dilation > MAX_DILATION:
        raise ConfigError(f"dilation {dilation} exceeds the supported maximum {MAX_DILATION}")

    out = np.zeros_like(grid)
    for ki in range(3):
        di = (ki - 1) * dilation
        if abs(di) >= height:
            continue
        for kj in range(3):
            dj = (kj - 1) * dilation
            if abs(dj) >= width:
                continue
            # out[:, i, j] += k * grid[:, i + di, j + dj] wherever the source is in range
            oi = slice(max(0, -di), height - max(0, di))
            oj = slice(max(0, -dj), width - max(0, dj))
            si = slice(max(0, di), height - max(0, -di))
            sj = slice(max(0, dj), width - max(0, -dj))
            out[:, oi, oj] += kernels[:, ki, kj, None, None] * grid[:, si, sj]
    return out


def pointwise_conv(grid: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """1x1 convolution: a per-pixel affine map across channels."""
    grid = check_grid(grid)
    weights = np.asarray(weights, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    channels, height, width = grid.shape
    if weights.ndim != 2 or weights.shape[1] != channels:
        raise ConfigError(f"point-wise weights {weights.shape} do not accept {channels} channels")
    if bias.shape != (weights.shape[0],):
        raise ConfigError(f"point-wise bias {bias.shape} does not match {weights.shape[0]} outputs")
    flat = _matmul(weights, grid.reshape(channels, -1), channels)
    flat += bias[:, None]
    return flat.reshape(weights.shape[0], height, width)


def linear_project(tokens: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Apply a bias-free linear layer with ``weights`` of shape (D_out, D_in) to every token."""
    tokens = np.asarray(tokens, dtype=np.float32)
    weights = np.asarray(weights, dtype=np.float32)
    if tokens.ndim != 2:
        raise ShapeError(f"token sequence must be 2-D, got shape {tokens.shape}")
    if weights.ndim != 2 or weights.shape[1] != tokens.shape[1]:
        raise ConfigError(f"projection {weights.shape} does not accept dim {tokens.shape[1]}")
    return _matmul(tokens, weights.T, tokens.shape[1])


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    x = np.asarray(x, dtype=np.float32)
    wide = x.astype(np.float64)
    return (0.5 * wide * (1.0 + erf(wide / math.sqrt(2.0)))).astype(np.float32)


def layer_norm(tokens: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Per-token normalization to zero mean and unit variance, without affine terms."""
    wide = np.asarray(tokens, dtype=np.float64)
    mean = wide.mean(axis=-1, keepdims=True)
    var = ((wide - mean) ** 2).mean(axis=-1, keepdims=True)
    return ((wide - mean) / np.sqrt(var + eps)).astype(np.float32)


def scaled_norm_input(tokens: np.ndarray, s1: float, s2: float) -> np.ndarray:
    """Adapter input ``s1 * LN(x) + s2 * x``."""
    tokens = np.asarray(tokens, dtype=np.float32)
    s1 = np.float32(s1)
    s2 = np.float32(s2)
    return s1 * layer_norm(tokens) + s2 * tokens


def channel_variance(grid: np.ndarray) -> np.ndarray:
    """Population variance (divide by H*W) of each channel's spatial values."""
    grid = check_grid(grid)
    flat = grid.reshape(grid.shape[0], -1).astype(np.float64)
    mean = flat.mean(axis=1, keepdims=True)
    return ((flat - mean) ** 2).mean(axis=1).astype(np.float32)
