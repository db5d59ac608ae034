"""Small conv-relu-dropout segmentation network, RNG streams and checkpoints."""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor, conv2d, dropout, relu

# Purpose labels for independent random streams. The gradient-path dropout
# ("dropout") and the no-grad uncertainty sampling ("sample") never share a
# stream, so toggling sampling cannot shift the gradient path's randomness.
STREAM_IDS = {
    "init": 1,
    "dropout": 2,
    "augment": 3,
    "datagen": 4,
    "sample": 5,
    "shuffle": 6,
    "eval": 7,
}


@dataclass
class RngStream:
    """Counter-based random stream keyed by (seed, purpose, counter).

    Every ``generator()`` call hands out a fresh numpy Generator for the
    current counter and then advances it, so identical (seed, stream,
    counter) states always reproduce identical draws.
    """

    seed: int
    stream: str
    counter: int = 0

    def __post_init__(self):
        if self.stream not in STREAM_IDS:
            raise ConfigError(f"unknown stream id {self.stream!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.seed), spawn_key=(STREAM_IDS[self.stream], self.counter))
        self.counter += 1
        return np.random.Generator(np.random.PCG64(seq))

    def fork(self) -> "RngStream":
        return copy.copy(self)


@dataclass
class NetworkConfig:
    num_classes: int
    in_channels: int = 3
    block_channels: List[int] = field(default_factory=lambda: [16, 32, 32, 16])
    kernel_size: int = 3
    dropout_ratio: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")
        if not self.block_channels or any(c < 1 for c in self.block_channels):
            raise ConfigError("block_channels must be a non-empty list of positive ints")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ConfigError("dropout_ratio must lie in [0, 1)")


@dataclass
class Block:
    weight: Tensor
    bias: Tensor
    dropout_ratio: float


class SegNet:
    """Conv blocks (conv -> relu -> dropout) followed by a 1x1 conv head."""

    def __init__(self, blocks: List[Block], head_weight: Tensor, head_bias: Tensor):
        self.blocks = blocks
        self.head_weight = head_weight
        self.head_bias = head_bias

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.blocks[0].weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.blocks[0].weight.shape[2]

    @property
    def dropout_ratio(self) -> float:
        return self.blocks[0].dropout_ratio

    def set_dropout(self, ratio: float) -> None:
        for block in self.blocks:
            block.dropout_ratio = float(ratio)

    def forward(self, images: Tensor, rng: Optional[RngStream] = None) -> Tensor:
        """Logits [N,C,H,W]. Dropout is active only when ``rng`` is given."""
        if images.ndim != 4 or images.shape[1] != self.in_channels:
            raise DimensionError(
                f"expected images [N,{self.in_channels},H,W], got {images.shape}"
            )
        k = self.kernel_size
        if images.shape[2] < k or images.shape[3] < k:
            raise DimensionError(f"spatial size must be at least {k}x{k}")
        x = images
        for block in self.blocks:
            x = relu(conv2d(x, block.weight, block.bias))
            x = dropout(x, block.dropout_ratio, rng, active=rng is not None)
        return conv2d(x, self.head_weight, self.head_bias)

    __call__ = forward

    def named_parameters(self) -> list:
        """``(name, tensor, group)`` in stable checkpoint order."""
        out = []
        for i, block in enumerate(self.blocks):
            out.append((f"blocks.{i}.weight", block.weight, "backbone"))
            out.append((f"blocks.{i}.bias", block.bias, "backbone"))
        out.append(("head.weight", self.head_weight, "head"))
        out.append(("head.bias", self.head_bias, "head"))
        return out

    def parameters(self) -> list:
        return [(t, group) for _, t, group in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t, _ in self.parameters())

    def zero_grad(self) -> None:
        for t, _ in self.parameters():
            t.zero_grad()

    def astype(self, dtype) -> "SegNet":
        """Copy with parameters cast to ``dtype`` (e.g. float64 for gradient checks)."""
        blocks = [
            Block(b.weight.astype(dtype), b.bias.astype(dtype), b.dropout_ratio) for b in self.blocks
        ]
        return SegNet(blocks, self.head_weight.astype(dtype), self.head_bias.astype(dtype))


def build(config: NetworkConfig) -> SegNet:
    """He fan-in initialised network, deterministic in ``config.seed``."""
    config.validate()
    gen = RngStream(config.seed, "init").generator()
    k = config.kernel_size
    blocks = []
    cin = config.in_channels
    for cout in config.block_channels:
        std = np.sqrt(2.0 / (cin * k * k))
        w = (gen.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
        blocks.append(
            Block(
                Tensor(w, requires_grad=True),
                Tensor(np.zeros(cout, np.float32), requires_grad=True),
                float(config.dropout_ratio),
            )
        )
        cin = cout
    std = np.sqrt(2.0 / cin)
    hw = (gen.standard_normal((config.num_classes, cin, 1, 1)) * std).astype(np.float32)
    return SegNet(
        blocks,
        Tensor(hw, requires_grad=True),
        Tensor(np.zeros(config.num_classes, np.float32), requires_grad=True),
    )


# -- checkpoint file --------------------------------------------------------

MAGIC = b"UCESEG1\n"


def save_checkpoint(net: SegNet, path) -> None:
    """Write parameters as little-endian float32 records after the magic header."""
    chunks = [MAGIC]
    for name, t, _ in net.named_parameters():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict:
    """Parse a checkpoint into an ordered ``{name: float32 array}`` mapping."""
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise FormatError(f"{path}: bad checkpoint magic")
    pos = len(MAGIC)
    params = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(buf):
                raise FormatError(f"{path}: truncated data for {name}")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            params[name] = arr.astype(np.float32)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint ({exc})") from exc
    return params


def load_checkpoint(path, dropout_ratio: float = 0.0) -> SegNet:
    """Rebuild a SegNet from a checkpoint; the architecture is read off the shapes."""
    params = read_checkpoint(path)
    blocks = []
    i = 0
    while f"blocks.{i}.weight" in params:
        w = params[f"blocks.{i}.weight"]
        b = params.get(f"blocks.{i}.bias")
        if b is None or w.ndim != 4 or b.shape != (w.shape[0],):
            raise FormatError(f"{path}: inconsistent block {i}")
        blocks.append(
            Block(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), float(dropout_ratio))
        )
        i += 1
    if not blocks or "head.weight" not in params or "head.bias" not in params:
        raise FormatError(f"{path}: missing block or head parameters")
    if len(params) != 2 * len(blocks) + 2:
        raise FormatError(f"{path}: unexpected parameter names")
    return SegNet(
        blocks,
        Tensor(params["head.weight"], requires_grad=True),
        Tensor(params["head.bias"], requires_grad=True),
    )
