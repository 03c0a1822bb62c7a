"""Dual bypass-adapter branches running beside a frozen backbone.

Each backbone block ``l`` has one adapter per branch. A branch carries its own
running output and never writes back into the backbone stream::

    carried_0 = 0
    carried_l = adapter_l(x_{l-1} + carried_{l-1})

and a single adapter computes::

    x0 + U(gelu(M * f_pw(f_dw(D(s1 * LN(x0) + s2 * x0)))))

where ``f(x) = x + conv(x)`` for both convolutions and ``M`` is the optional
center-weighted mask.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .formats import F32, BinaryReader, f32_bytes, write_atomic
from .tensor import (
    channel_variance,
    check_tokens,
    depthwise_conv3x3,
    gelu,
    grid_to_tokens,
    linear_project,
    pointwise_conv,
    scaled_norm_input,
    tokens_to_grid,
)

WEIGHTS_MAGIC = b"HEVA"
WEIGHTS_VERSION = 1
INIT_SCALE = 0.02


class BranchId(enum.Enum):
    HE = "he"
    VPR = "vpr"

    @property
    def seed_code(self) -> int:
        return 0 if self is BranchId.HE else 1


@dataclass(frozen=True, eq=False)
class AdapterParams:
    """Weights of one bypass adapter.

    down_proj is (bottleneck, dim), up_proj is (dim, bottleneck); the two
    convolutions act on ``bottleneck`` channels.
    """

    down_proj: np.ndarray
    up_proj: np.ndarray
    dw_kernels: np.ndarray
    pw_weights: np.ndarray
    pw_bias: np.ndarray
    dw_dilation: int = 1
    s1: float = 1.0
    s2: float = 1.0
    mask_enabled: bool = False

    def __post_init__(self):
        for name in ("down_proj", "up_proj", "dw_kernels", "pw_weights", "pw_bias"):
            arr = np.array(getattr(self, name), dtype=np.float32)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "s1", float(np.float32(self.s1)))
        object.__setattr__(self, "s2", float(np.float32(self.s2)))
        object.__setattr__(self, "dw_dilation", int(self.dw_dilation))

        bottleneck, dim = self.down_proj.shape if self.down_proj.ndim == 2 else (-1, -1)
        if self.down_proj.ndim != 2 or bottleneck >= dim:
            raise ConfigError(
                f"down projection must be (bottleneck, dim) with bottleneck < dim, "
                f"got {self.down_proj.shape}"
            )
        expected = {
            "up_proj": (dim, bottleneck),
            "dw_kernels": (bottleneck, 3, 3),
            "pw_weights": (bottleneck, bottleneck),
            "pw_bias": (bottleneck,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.dw_dilation < 1:
            raise ConfigError("dilation must be >= 1")
        for name in ("down_proj", "up_proj", "dw_kernels", "pw_weights", "pw_bias"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigError(f"{name} contains non-finite values")
        if not (np.isfinite(self.s1) and np.isfinite(self.s2)):
            raise ConfigError("s1 and s2 must be finite")

    @property
    def dim(self) -> int:
        return self.down_proj.shape[1]

    @property
    def bottleneck(self) -> int:
        return self.down_proj.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AdapterParams):
            return NotImplemented
        arrays = ("down_proj", "up_proj", "dw_kernels", "pw_weights", "pw_bias")
        return (
            all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and (self.dw_dilation, self.s1, self.s2, self.mask_enabled)
            == (other.dw_dilation, other.s1, other.s2, other.mask_enabled)
        )


@dataclass
class BranchState:
    carried: np.ndarray
    block_index: int = 0

    @classmethod
    def initial(cls, like: np.ndarray) -> "BranchState":
        return cls(carried=np.zeros_like(np.asarray(like, dtype=np.float32)), block_index=0)


def init_adapter_params(
    dim: int,
    bottleneck: int,
    *,
    dilation: int = 1,
    seed: int = 0,
    branch: BranchId = BranchId.VPR,
    block: int = 0,
    mask_enabled: bool | None = None,
) -> AdapterParams:
    """Seeded uniform(-0.02, 0.02) weights for one adapter; s1 = s2 = 1."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, branch.seed_code, block]))

    def draw(*shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(np.float32)

    if mask_enabled is None:
        mask_enabled = branch is BranchId.VPR
    return AdapterParams(
        down_proj=draw(bottleneck, dim),
        dw_kernels=draw(bottleneck, 3, 3),
        pw_weights=draw(bottleneck, bottleneck),
        pw_bias=draw(bottleneck),
        up_proj=draw(dim, bottleneck),
        dw_dilation=dilation,
        mask_enabled=mask_enabled,
    )


def init_branch_params(
    num_blocks: int,
    dim: int,
    bottleneck: int,
    *,
    dilation: int = 1,
    seed: int = 0,
    branch: BranchId = BranchId.VPR,
    mask_enabled: bool | None = None,
) -> list[AdapterParams]:
    return [
        init_adapter_params(
            dim,
            bottleneck,
            dilation=dilation,
            seed=seed,
            branch=branch,
            block=block,
            mask_enabled=mask_enabled,
        )
        for block in range(num_blocks)
    ]


def center_mask(height: int, width: int, variances) -> np.ndarray:
    """Center-weighted mask of shape (C, H, W).

    ``M[c, i, j] = exp(-((j - W/2)^2 + (i - H/2)^2) / (2 (max(H, W)/2)^2) * var[c])``.
    Values that would underflow are clamped to the smallest normal float32 so the
    mask stays strictly positive.
    """
    if height < 1 or width < 1:
        raise InputError("mask dimensions must be >= 1")
    variances = np.atleast_1d(np.asarray(variances, dtype=np.float64))
    if np.any(variances < 0) or not np.all(np.isfinite(variances)):
        raise InputError("variances must be finite and non-negative")
    i = np.arange(height, dtype=np.float64)[:, None]
    j = np.arange(width, dtype=np.float64)[None, :]
    radial = ((j - width / 2) ** 2 + (i - height / 2) ** 2) / (2.0 * (max(height, width) / 2) ** 2)
    mask = np.exp(-radial[None, :, :] * variances[:, None, None])
    return np.maximum(mask, np.finfo(np.float32).tiny).astype(np.float32)


def adapter_forward(x0: np.ndarray, params: AdapterParams) -> np.ndarray:
    """One bypass adapter applied to its input token sequence ``x0``."""
    x0 = check_tokens(x0)
    if x0.shape[1] != params.dim:
        raise ConfigError(f"token dim {x0.shape[1]} does not match adapter dim {params.dim}")

    hidden = linear_project(scaled_norm_input(x0, params.s1, params.s2), params.down_proj)
    cls_token, grid = tokens_to_grid(hidden)
    grid = grid + depthwise_conv3x3(grid, params.dw_kernels, params.dw_dilation)
    grid = grid + pointwise_conv(grid, params.pw_weights, params.pw_bias)
    if params.mask_enabled:
        grid = grid * center_mask(grid.shape[1], grid.shape[2], channel_variance(grid))
    # The class token has no spatial position: it skips both convolutions and the mask.
    activated = gelu(grid_to_tokens(cls_token, grid))
    return x0 + linear_project(activated, params.up_proj)


def branch_step(state: BranchState, backbone_out: np.ndarray, params: AdapterParams) -> BranchState:
    backbone_out = check_tokens(backbone_out)
    if backbone_out.shape != state.carried.shape:
        raise ConfigError(
            f"backbone features {backbone_out.shape} do not match carried state {state.carried.shape}"
        )
    carried = adapter_forward(backbone_out + state.carried, params)
    return BranchState(carried=carried, block_index=state.block_index + 1)


def run_branch(backbone_stream: Sequence[np.ndarray], branch_params: Sequence[AdapterParams]) -> np.ndarray:
    """Fold the adapter recurrence over the L block inputs ``x_0 .. x_{L-1}``."""
    if len(backbone_stream) != len(branch_params):
        raise ConfigError(
            f"stream has {len(backbone_stream)} blocks but {len(branch_params)} adapters were given"
        )
    if not backbone_stream:
        raise ConfigError("a branch needs at least one block")
    state = BranchState.initial(backbone_stream[0])
    for x, params in zip(backbone_stream, branch_params):
        state = branch_step(state, x, params)
    return state.carried


def save_adapter_weights(path: str | os.PathLike, branch_params: Sequence[AdapterParams]) -> None:
    if not branch_params:
        raise ConfigError("cannot save an empty branch")
    first = branch_params[0]
    for p in branch_params:
        if (p.dim, p.bottleneck, p.dw_dilation) != (first.dim, first.bottleneck, first.dw_dilation):
            raise ConfigError("all blocks of a branch must share dim, bottleneck and dilation")
    parts = [
        WEIGHTS_MAGIC,
        struct.pack(
            "<IIIII", WEIGHTS_VERSION, len(branch_params), first.dim, first.bottleneck, first.dw_dilation
        ),
    ]
    for p in branch_params:
        for arr in (p.down_proj, p.dw_kernels, p.pw_weights, p.pw_bias, p.up_proj):
            parts.append(f32_bytes(arr))
        parts.append(f32_bytes([p.s1, p.s2]))
    write_atomic(path, b"".join(parts))


def load_adapter_weights(path: str | os.PathLike, *, mask_enabled: bool = False) -> list[AdapterParams]:
    """Read an adapter weight file. The mask flag is a branch property, not stored on disk."""
    with open(path, "rb") as fh:
        reader = BinaryReader(fh.read(), name=str(path))
    reader.expect_header(WEIGHTS_MAGIC, WEIGHTS_VERSION)
    num_blocks, dim, bottleneck, dilation = reader.unpack("IIII")
    params = []
    for _ in range(num_blocks):
        down = reader.array(F32, bottleneck * dim).reshape(bottleneck, dim)
        dw = reader.array(F32, bottleneck * 9).reshape(bottleneck, 3, 3)
        pw = reader.array(F32, bottleneck * bottleneck).reshape(bottleneck, bottleneck)
        pw_bias = reader.array(F32, bottleneck)
        up = reader.array(F32, dim * bottleneck).reshape(dim, bottleneck)
        s1, s2 = reader.array(F32, 2)
        params.append(
            AdapterParams(
                down_proj=down,
                up_proj=up,
                dw_kernels=dw,
                pw_weights=pw,
                pw_bias=pw_bias,
                dw_dilation=dilation,
                s1=float(s1),
                s2=float(s2),
                mask_enabled=mask_enabled,
            )
        )
    if reader.remaining:
        raise InputError(f"{path}: {reader.remaining} trailing bytes after the last block")
    return params
