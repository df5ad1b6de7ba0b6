"""Encoder-decoder assembly of the three network variants, plus checkpointing.

Topology: three encoder stages with 2x max pooling between them, a bottleneck
stage, and three decoder stages that upsample with 2x2 transposed convolutions
and concatenate the matching pre-pooling encoder output. Every stage runs a
pre-activation residual block, then either an attention block (rsan variant)
or a second residual block, then BN and ReLU. The head is a biased 1x1
convolution into a sigmoid, so the output is an N x H x W x 1 probability map.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .errors import CheckpointError, ConfigError, PaddingRequiredError, ShapeError
from .layers import (RSAB, BatchNorm, Conv2d, ConvTranspose2d, DropBlockConfig,
                     PreActResidualBlock, _join)
from .tensor import Tensor

VARIANTS = ("backbone", "backbone_dropblock", "rsan")

CHECKPOINT_MAGIC = b"RSAN"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    """Declarative description of one network variant."""

    variant: str = "rsan"
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    input_channels: int = 3
    dropblock: DropBlockConfig = field(default_factory=DropBlockConfig)
    sa_placement: str = "branch"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if isinstance(self.dropblock, dict):
            self.dropblock = DropBlockConfig(**self.dropblock)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.stage_channels) != 4:
            raise ConfigError(f"need 4 stage widths (3 stages + bottleneck), got {self.stage_channels}")
        if any(a >= b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError(f"stage_channels must be strictly increasing, got {self.stage_channels}")
        if min(self.stage_channels) < 1 or self.input_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.sa_placement not in ("branch", "post"):
            raise ConfigError(f"sa_placement must be 'branch' or 'post', got {self.sa_placement!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class _Stage:
    """residual block -> (RSAB | second residual block) -> BN -> ReLU."""

    def __init__(self, cin: int, cout: int, config: NetworkConfig,
                 rng: np.random.Generator, dtype=np.float32):
        db = config.dropblock
        self.block = PreActResidualBlock(cin, cout, db, rng, dtype=dtype)
        if config.variant == "rsan":
            self.second = RSAB(cout, cout, db, rng, config.sa_placement, dtype=dtype)
        else:
            self.second = PreActResidualBlock(cout, cout, db, rng, dtype=dtype)
        self.bn = BatchNorm(cout, eps=config.bn_eps, momentum=config.bn_momentum, dtype=dtype)

    def forward(self, x: Tensor, mode: str, rng) -> Tensor:
        h = self.block.forward(x, mode, rng)
        h = self.second.forward(h, mode, rng)
        return ops.relu(self.bn.forward(h, mode))

    def named_parameters(self, prefix: str = ""):
        yield from self.block.named_parameters(_join(prefix, "block"))
        yield from self.second.named_parameters(_join(prefix, "second"))
        yield from self.bn.named_parameters(_join(prefix, "bn"))

    def named_buffers(self, prefix: str = ""):
        yield from self.block.named_buffers(_join(prefix, "block"))
        yield from self.second.named_buffers(_join(prefix, "second"))
        yield from self.bn.named_buffers(_join(prefix, "bn"))


class Network:
    """A built variant: ordered named parameters plus the stage graph."""

    DOWNSAMPLE_FACTOR = 8  # three 2x poolings

    def __init__(self, config: NetworkConfig, seed: int, dtype=np.float32):
        # the backbone ablation is the same graph with DropBlock forced off
        if config.variant == "backbone":
            config = replace(config, dropblock=replace(config.dropblock, keep_prob=1.0))
        self.config = config
        self.seed = seed
        self.dtype = dtype
        init_ss, drop_ss = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(init_ss)
        self.rng = np.random.default_rng(drop_ss)  # dropblock stream; train() reseeds

        c0, c1, c2, c3 = config.stage_channels
        self.encoders = [
            _Stage(config.input_channels, c0, config, rng, dtype),
            _Stage(c0, c1, config, rng, dtype),
            _Stage(c1, c2, config, rng, dtype),
        ]
        self.bottleneck = _Stage(c2, c3, config, rng, dtype)
        self.upsamples = [
            ConvTranspose2d(c3, c2, rng, dtype),
            ConvTranspose2d(c2, c1, rng, dtype),
            ConvTranspose2d(c1, c0, rng, dtype),
        ]
        self.decoders = [
            _Stage(2 * c2, c2, config, rng, dtype),
            _Stage(2 * c1, c1, config, rng, dtype),
            _Stage(2 * c0, c0, config, rng, dtype),
        ]
        self.head = Conv2d(1, 1, c0, 1, rng, bias=True, dtype=dtype)

        self._params = dict(self._walk_parameters())
        seen = set()
        for name, p in self._params.items():
            if name in seen:
                raise ConfigError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name
        self._buffers = dict(self._walk_buffers())

    def _modules(self):
        for i, enc in enumerate(self.encoders):
            yield f"enc{i}", enc
        yield "bottleneck", self.bottleneck
        for i, (up, dec) in enumerate(zip(self.upsamples, self.decoders)):
            yield f"up{i}", up
            yield f"dec{i}", dec
        yield "head", self.head

    def _walk_parameters(self):
        for prefix, module in self._modules():
            yield from module.named_parameters(prefix)

    def _walk_buffers(self):
        for prefix, module in self._modules():
            yield from module.named_buffers(prefix)

    def named_parameters(self):
        return self._params.items()

    def named_buffers(self):
        return self._buffers.items()

    @property
    def parameters(self) -> list:
        return list(self._params.values())

    def rsab_count(self) -> int:
        return sum(1 for _, m in self._modules() if isinstance(m, _Stage)
                   and isinstance(m.second, RSAB))

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        if x.data.ndim != 4 or x.shape[3] != self.config.input_channels:
            raise ShapeError(
                f"expected N,H,W,{self.config.input_channels} input, got shape {x.shape}")
        n, h, w, _ = x.shape
        f = self.DOWNSAMPLE_FACTOR
        if h % f or w % f:
            raise PaddingRequiredError(
                f"input H,W must be divisible by {f} (three poolings), got {h}x{w}; pad first")
        skips = []
        out = x
        for enc in self.encoders:
            out = enc.forward(out, mode, self.rng)
            skips.append(out)
            out = ops.maxpool2d(out, 2)
        out = self.bottleneck.forward(out, mode, self.rng)
        for up, dec, skip in zip(self.upsamples, self.decoders, reversed(skips)):
            out = up.forward(out)
            out = ops.concat_channels(out, skip)
            out = dec.forward(out, mode, self.rng)
        return ops.sigmoid(self.head.forward(out))


def build(config: NetworkConfig, seed: int) -> Network:
    """Deterministically initialize a network: same seed, bit-identical weights."""
    return Network(config, seed)


def parameter_count(net: Network) -> int:
    """Total trainable scalar count (running statistics excluded)."""
    return sum(p.data.size for p in net.parameters)


def state_records(net: Network) -> list[tuple[str, np.ndarray]]:
    """Parameters followed by running-stat buffers, in walk order."""
    records = [(name, p.data) for name, p in net.named_parameters()]
    records.extend(net.named_buffers())
    return records


def _write_u32(f, v: int):
    f.write(struct.pack("<I", v))


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(b)}")
    return b


def save_checkpoint(net: Network, path) -> None:
    """Bit-exact snapshot: config JSON plus raw float32 parameter payloads."""
    save_state(net.config, state_records(net), path)


def save_state(config: NetworkConfig, records, path) -> None:
    payload = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    records = list(records)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        _write_u32(f, len(payload))
        f.write(payload)
        _write_u32(f, len(records))
        for name, arr in records:
            nb = name.encode("utf-8")
            _write_u32(f, len(nb))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                _write_u32(f, dim)
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Network:
    """Rebuild a network whose parameters, config, and BN stats match the file."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<B", _read_exact(f, 1))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (json_len,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            cfg_dict = json.loads(_read_exact(f, json_len).decode("utf-8"))
            config = NetworkConfig.from_dict(cfg_dict)
        except (ValueError, TypeError, ConfigError) as e:
            raise CheckpointError(f"bad config payload: {e}") from e
        net = Network(config, seed=0)
        targets = dict(net.named_parameters())
        buffers = dict(net.named_buffers())
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        loaded = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1))
            shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank))
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(f, 4 * n_items)
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            if name in targets:
                dest = targets[name].data
            elif name in buffers:
                dest = buffers[name]
            else:
                raise CheckpointError(f"unknown parameter name {name!r}")
            if dest.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: file {arr.shape} vs network {dest.shape}")
            dest[...] = arr
            loaded.add(name)
        missing = (set(targets) | set(buffers)) - loaded
        if missing:
            raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
        if f.read(1):
            raise CheckpointError("trailing bytes after last parameter record")
    return net
