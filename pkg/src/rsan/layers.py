"""Network building blocks: DropBlock, spatial attention, residual blocks.

Layers are plain objects owning their ``Parameter`` tensors; forward methods
compose the ops module. Stochastic layers draw from an explicitly passed
numpy Generator so the single training thread controls every stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Fan-in-scaled normal init for conv kernels."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# DropBlock


@dataclass
class DropBlockConfig:
    """Structured-dropout settings: square side and unit keep probability."""

    block_size: int = 7
    keep_prob: float = 0.85

    def __post_init__(self):
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ConfigError(f"block_size must be odd and >= 1, got {self.block_size}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must be in (0, 1], got {self.keep_prob}")


def dropblock_gamma(h: int, w: int, block_size: int, keep_prob: float) -> float:
    """Seed rate that drops ~(1-keep_prob) of units when seeds stamp full squares."""
    vh = h - block_size + 1
    vw = w - block_size + 1
    return (1.0 - keep_prob) / block_size**2 * (h * w) / (vh * vw)


def dropblock_draw(n: int, h: int, w: int, cfg: DropBlockConfig,
                   rng: np.random.Generator):
    """Sample n independent masks.

    Returns ``(seeds, masks)``: seeds is a bool (n, H-bs+1, W-bs+1) grid of
    Bernoulli draws over the valid interior (centers where a full block fits);
    masks is float32 (n, h, w) where every seed has zeroed its centered
    block_size square and survivors carry the total/kept rescale factor.
    """
    bs = cfg.block_size
    if bs > h or bs > w:
        raise ShapeError(f"block_size {bs} exceeds feature dims {h}x{w}")
    vh, vw = h - bs + 1, w - bs + 1
    if cfg.keep_prob >= 1.0:
        return np.zeros((n, vh, vw), dtype=bool), np.ones((n, h, w), dtype=np.float32)
    gamma = dropblock_gamma(h, w, bs, cfg.keep_prob)
    seeds = rng.random((n, vh, vw)) < gamma
    off = bs // 2
    grid = np.zeros((n, h, w), dtype=bool)
    grid[:, off:off + vh, off:off + vw] = seeds
    padded = np.pad(grid, ((0, 0), (off, off), (off, off)))
    zero = np.zeros((n, h, w), dtype=bool)
    for di in range(bs):
        for dj in range(bs):
            zero |= padded[:, di:di + h, dj:dj + w]
    mask = (~zero).astype(np.float32)
    kept = mask.sum(axis=(1, 2))
    factor = np.where(kept > 0, (h * w) / np.maximum(kept, 1.0), 0.0).astype(np.float32)
    return seeds, mask * factor[:, None, None]


def dropblock_mask(h: int, w: int, cfg: DropBlockConfig, mode: str,
                   rng: np.random.Generator | None = None) -> Tensor:
    """One H x W x 1 mask; all ones in eval mode or at keep_prob 1."""
    if mode == "eval" or cfg.keep_prob >= 1.0:
        return Tensor(np.ones((h, w, 1), dtype=np.float32))
    if rng is None:
        raise ValueError("train-mode dropblock_mask needs an rng")
    _, masks = dropblock_draw(1, h, w, cfg, rng)
    return Tensor(masks[0][..., None])


def apply_dropblock(x: Tensor, cfg: DropBlockConfig, mode: str,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Zero random squares of each sample's feature map, rescaling survivors.

    One mask per sample, shared across channels. Identity in eval mode or at
    keep_prob 1 (no RNG draw, so parallel streams stay aligned).
    """
    if mode == "eval" or cfg.keep_prob >= 1.0:
        return x
    if rng is None:
        raise ValueError("train-mode apply_dropblock needs an rng")
    n, h, w, _ = x.shape
    _, masks = dropblock_draw(n, h, w, cfg, rng)
    mask = Tensor(masks[..., None].astype(x.data.dtype, copy=False))
    return ops.mul_broadcast(x, mask)


class DropBlock:
    """Parameter-free layer wrapper around apply_dropblock."""

    def __init__(self, cfg: DropBlockConfig):
        self.cfg = cfg

    def forward(self, x: Tensor, mode: str, rng=None) -> Tensor:
        return apply_dropblock(x, self.cfg, mode, rng)


# ---------------------------------------------------------------------------
# primitive layers


class Conv2d:
    """Stride-1 same-padding convolution layer (optional bias)."""

    def __init__(self, kh: int, kw: int, cin: int, cout: int, rng: np.random.Generator,
                 bias: bool = False, dtype=np.float32):
        self.kernel = Parameter(he_normal(rng, (kh, kw, cin, cout), kh * kw * cin, dtype), dtype=dtype)
        self.bias = Parameter(np.zeros(cout, dtype=dtype), dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.kernel, self.bias)

    def named_parameters(self, prefix: str = ""):
        yield _join(prefix, "kernel"), self.kernel
        if self.bias is not None:
            yield _join(prefix, "bias"), self.bias

    def named_buffers(self, prefix: str = ""):
        return iter(())


class ConvTranspose2d:
    """2x2 stride-2 transposed convolution (exact spatial doubling)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.kernel = Parameter(he_normal(rng, (2, 2, cin, cout), 4 * cin, dtype), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d_transpose(x, self.kernel, stride=2)

    def named_parameters(self, prefix: str = ""):
        yield _join(prefix, "kernel"), self.kernel

    def named_buffers(self, prefix: str = ""):
        return iter(())


class BatchNorm:
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9,
                 dtype=np.float32):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype), dtype=dtype)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, mode, self.momentum, self.eps)

    def named_parameters(self, prefix: str = ""):
        yield _join(prefix, "gamma"), self.gamma
        yield _join(prefix, "beta"), self.beta

    def named_buffers(self, prefix: str = ""):
        yield _join(prefix, "running_mean"), self.running_mean
        yield _join(prefix, "running_var"), self.running_var


# ---------------------------------------------------------------------------
# attention and residual blocks


class SpatialAttention:
    """Pixelwise gate from channel-pooled descriptors via a 7x7 conv and sigmoid.

    The conv sees only the stacked per-pixel channel max and mean, so the layer
    has exactly 7*7*2 = 98 trainable values regardless of input channel count
    (no bias term, which would break that budget).
    """

    KERNEL_SIZE = 7

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        ks = self.KERNEL_SIZE
        self.kernel = Parameter(he_normal(rng, (ks, ks, 2, 1), ks * ks * 2, dtype), dtype=dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (gate map N,H,W,1 strictly in (0,1), gated features)."""
        descriptor = ops.concat_channels(ops.channel_max(x), ops.channel_avg(x))
        gate = ops.sigmoid(ops.conv2d(descriptor, self.kernel))
        return gate, ops.mul_broadcast(x, gate)

    def named_parameters(self, prefix: str = ""):
        yield _join(prefix, "kernel"), self.kernel

    def named_buffers(self, prefix: str = ""):
        return iter(())


def spatial_attention_forward(features: Tensor, sa: SpatialAttention):
    """Functional form of the spatial-attention pass."""
    return sa.forward(features)


class PreActResidualBlock:
    """Residual block with two BN -> ReLU -> DropBlock -> conv3x3 units.

    The skip path is the identity when channel counts match, otherwise a 1x1
    projection. No activation follows the addition.
    """

    def __init__(self, cin: int, cout: int, dropblock: DropBlockConfig,
                 rng: np.random.Generator, dtype=np.float32):
        self.dropblock = dropblock
        self.bn1 = BatchNorm(cin, dtype=dtype)
        self.conv1 = Conv2d(3, 3, cin, cout, rng, dtype=dtype)
        self.bn2 = BatchNorm(cout, dtype=dtype)
        self.conv2 = Conv2d(3, 3, cout, cout, rng, dtype=dtype)
        self.projection = Conv2d(1, 1, cin, cout, rng, dtype=dtype) if cin != cout else None

    def branch(self, x: Tensor, mode: str, rng=None) -> Tensor:
        h = self.conv1.forward(apply_dropblock(ops.relu(self.bn1.forward(x, mode)),
                                               self.dropblock, mode, rng))
        return self.conv2.forward(apply_dropblock(ops.relu(self.bn2.forward(h, mode)),
                                                  self.dropblock, mode, rng))

    def skip(self, x: Tensor) -> Tensor:
        return x if self.projection is None else self.projection.forward(x)

    def forward(self, x: Tensor, mode: str, rng=None) -> Tensor:
        return ops.add(self.branch(x, mode, rng), self.skip(x))

    def named_parameters(self, prefix: str = ""):
        yield from self.bn1.named_parameters(_join(prefix, "bn1"))
        yield from self.conv1.named_parameters(_join(prefix, "conv1"))
        yield from self.bn2.named_parameters(_join(prefix, "bn2"))
        yield from self.conv2.named_parameters(_join(prefix, "conv2"))
        if self.projection is not None:
            yield from self.projection.named_parameters(_join(prefix, "projection"))

    def named_buffers(self, prefix: str = ""):
        yield from self.bn1.named_buffers(_join(prefix, "bn1"))
        yield from self.bn2.named_buffers(_join(prefix, "bn2"))


class RSAB:
    """Residual block whose branch output is gated by spatial attention.

    Placement 'branch' gates the residual function before the skip addition
    (keeps the identity path untouched); 'post' gates the post-addition sum.
    """

    def __init__(self, cin: int, cout: int, dropblock: DropBlockConfig,
                 rng: np.random.Generator, sa_placement: str = "branch",
                 dtype=np.float32):
        if sa_placement not in ("branch", "post"):
            raise ConfigError(f"sa_placement must be 'branch' or 'post', got {sa_placement!r}")
        self.sa_placement = sa_placement
        self.block = PreActResidualBlock(cin, cout, dropblock, rng, dtype=dtype)
        self.sa = SpatialAttention(rng, dtype=dtype)

    def forward(self, x: Tensor, mode: str, rng=None) -> Tensor:
        branch = self.block.branch(x, mode, rng)
        skip = self.block.skip(x)
        if self.sa_placement == "branch":
            _, gated = self.sa.forward(branch)
            return ops.add(gated, skip)
        _, gated = self.sa.forward(ops.add(branch, skip))
        return gated

    def named_parameters(self, prefix: str = ""):
        yield from self.block.named_parameters(_join(prefix, "block"))
        yield from self.sa.named_parameters(_join(prefix, "sa"))

    def named_buffers(self, prefix: str = ""):
        yield from self.block.named_buffers(_join(prefix, "block"))


def rsab_forward(x: Tensor, blk: RSAB, mode: str, rng=None) -> Tensor:
    """Functional form of the RSAB pass."""
    return blk.forward(x, mode, rng)


def preact_residual_forward(x: Tensor, blk: PreActResidualBlock, mode: str, rng=None) -> Tensor:
    """Functional form of the residual-block pass."""
    return blk.forward(x, mode, rng)


def parameter_count(layer) -> int:
    """Total trainable scalar count of a layer (buffers excluded)."""
    return sum(p.data.size for _, p in layer.named_parameters())
