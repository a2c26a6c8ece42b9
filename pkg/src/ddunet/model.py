"""DDU-Net: weight-shared encoder-decoder clones joined by a bottleneck network.

One :class:`DDUNet` holds a single parameter set. Every subimage is
processed by an invocation ("clone") of the same encoder and decoder
modules, so sharing is by identity rather than by copying.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Context, ConvBNReLU, Conv2d, ConvSpec, ConvTranspose2d, DoubleConv, Module, maxpool2d
from .partition import PartitionLayout, concat_grid, partition, split_grid, stitch
from .tensor import Tensor, concat_channels, slice_channels


def unet_channels(in_channels: int, base: int, depth: int, num_classes: int) -> tuple[int, ...]:
    """Channel list ``in-b-2b-...-b*2^D-b*2^D-...-b-K`` (base doubles per level)."""
    enc = [base * 2**d for d in range(depth + 1)]
    return (in_channels, *enc, *reversed(enc), num_classes)


@dataclass(frozen=True)
class ModelConfig:
    """DDU-Net(D, F, C) plus the channel distribution.

    ``channels`` lists, in order: input channels, input-block output, the
    D encoder outputs, the bottleneck width again, the D decoder outputs and
    the class count, e.g. ``1-4-8-16-32-32-16-8-4-3`` for D=3.
    """

    depth: int
    comm_maps: int
    comm: bool
    channels: tuple[int, ...]
    dropout: float = 0.1

    def __post_init__(self):
        D = self.depth
        if D < 1:
            raise ValueError("depth must be at least 1")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 2 * D + 4:
            raise ValueError(f"depth {D} needs {2 * D + 4} channel entries, got {len(self.channels)}")
        if min(self.channels) <= 0:
            raise ValueError("channel counts must be positive")
        if self.channels[D + 1] != self.channels[D + 2]:
            raise ValueError("bottleneck width must repeat at the start of the decoder list")
        if self.comm_maps < 0:
            raise ValueError("comm_maps must be non-negative")
        if self.comm_maps > self.bottleneck_channels:
            raise ValueError(f"F={self.comm_maps} exceeds the {self.bottleneck_channels} bottleneck channels")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def synthetic(cls, depth: int, comm_maps: int, comm: bool = True, dropout: float = 0.1) -> "ModelConfig":
        """Grayscale-in, three-class networks with base width 4."""
        return cls(depth, comm_maps, comm, unet_channels(1, 4, depth, 3), dropout)

    @property
    def in_channels(self) -> int:
        return self.channels[0]

    @property
    def num_classes(self) -> int:
        return self.channels[-1]

    @property
    def input_block_channels(self) -> int:
        return self.channels[1]

    @property
    def encoder_channels(self) -> tuple[int, ...]:
        return self.channels[2:self.depth + 2]

    @property
    def decoder_channels(self) -> tuple[int, ...]:
        return self.channels[self.depth + 3:2 * self.depth + 3]

    @property
    def bottleneck_channels(self) -> int:
        return self.channels[self.depth + 1]

    @property
    def level_channels(self) -> tuple[int, ...]:
        """Output widths of the input block and encoder blocks 1..D-1 (skip sources)."""
        return self.channels[1:self.depth + 1]

    @property
    def name(self) -> str:
        return f"DDU-Net({self.depth},{self.comm_maps},{'Y' if self.comm else 'N'})"


class EncoderBlock(Module):
    """maxpool followed by a double conv."""

    def __init__(self, in_ch: int, out_ch: int, dropout: float):
        self.conv = DoubleConv(in_ch, out_ch, dropout)

    def children(self):
        return [("conv", self.conv)]

    def init(self, rng):
        self.conv.init(rng)

    def __call__(self, x: Tensor, ctx: Context | None = None) -> Tensor:
        return self.conv(maxpool2d(x), ctx)


class DecoderBlock(Module):
    """Transposed conv, concat with the skip tensor, double conv."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, dropout: float):
        self.up = ConvTranspose2d(in_ch, out_ch)
        self.conv = DoubleConv(out_ch + skip_ch, out_ch, dropout)

    def children(self):
        return [("up", self.up), ("conv", self.conv)]

    def init(self, rng):
        self.up.init(rng)
        self.conv.init(rng)

    def __call__(self, x: Tensor, skip: Tensor, ctx: Context | None = None) -> Tensor:
        return self.conv(concat_channels([self.up(x), skip]), ctx)


class CommNet(Module):
    """Three 5x5 conv (with bias) + BatchNorm + ReLU units, F -> F channels."""

    def __init__(self, maps: int):
        self.maps = maps
        self.units = [ConvBNReLU(maps, maps, kernel=5, bias=True) for _ in range(3)] if maps else []

    def children(self):
        return [(f"layer{i + 1}", u) for i, u in enumerate(self.units)]

    def init(self, rng):
        for u in self.units:
            u.init(rng)

    def __call__(self, x: Tensor, ctx: Context | None = None) -> Tensor:
        for u in self.units:
            x = u(x, ctx)
        return x


class DDUNet(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        D, p = config.depth, config.dropout
        ch = config.channels
        self.input_block = DoubleConv(config.in_channels, config.input_block_channels, p)
        self.encoders = [EncoderBlock(ch[d + 1], ch[d + 2], p) for d in range(D)]
        self.comm_net = CommNet(config.comm_maps)
        prev = config.bottleneck_channels
        self.decoders = []
        for t, out in enumerate(config.decoder_channels):
            skip = config.level_channels[D - 1 - t]
            self.decoders.append(DecoderBlock(prev, skip, out, p))
            prev = out
        self.output = Conv2d(ConvSpec(prev, config.num_classes, kernel=1, has_bias=True))
        self.assign_paths()

    # canonical order: input, encoders, comm net, decoders, output
    def children(self):
        out = [("input_block", self.input_block)]
        out += [(f"encoder{d + 1}", e) for d, e in enumerate(self.encoders)]
        out += [("comm_net", self.comm_net)]
        out += [(f"decoder{t + 1}", dec) for t, dec in enumerate(self.decoders)]
        out += [("output", self.output)]
        return out

    def init(self, rng: np.random.Generator) -> None:
        for _, child in self.children():
            child.init(rng)

    def blocks(self) -> list[tuple[str, Module]]:
        """Human-readable block names, in parameter order."""
        out = [("input block", self.input_block)]
        out += [(f"encoder block {d + 1}", e) for d, e in enumerate(self.encoders)]
        out += [("communication network", self.comm_net)]
        out += [(f"decoder block {t + 1}", dec) for t, dec in enumerate(self.decoders)]
        out += [("output block", self.output)]
        return out

    # -- clone pieces ------------------------------------------------------
    def encode(self, x: Tensor, ctx: Context | None = None) -> tuple[Tensor, list[Tensor]]:
        """Run one encoder clone: returns the bottleneck and the D skip tensors."""
        h = self.input_block(x, ctx)
        levels = [h]
        for enc in self.encoders:
            h = enc(h, ctx)
            levels.append(h)
        return levels[-1], levels[:-1]

    def split_bottleneck(self, b: Tensor) -> tuple[Tensor | None, Tensor | None]:
        """(kept channels, last F channels) of a bottleneck tensor."""
        c, F = b.shape[1], self.config.comm_maps
        if F == 0:
            return b, None
        kept = slice_channels(b, 0, c - F) if F < c else None
        sent = slice_channels(b, c - F, c) if F > 0 else None
        return kept, sent

    def merge_bottleneck(self, kept: Tensor | None, returned: Tensor | None) -> Tensor:
        """Substitute the communication output for the last F channels."""
        parts = [t for t in (kept, returned) if t is not None]
        return parts[0] if len(parts) == 1 else concat_channels(parts)

    def communicate(self, maps: list[list[Tensor]], layout: PartitionLayout,
                    ctx: Context | None = None) -> list[list[Tensor]]:
        """Process the F-channel maps of every cell through the comm net.

        With communication the maps are laid out on the grid and processed as
        one image; without it each cell passes through independently.
        """
        if self.config.comm_maps == 0:
            return maps
        if self.config.comm:
            return split_grid(self.comm_net(concat_grid(maps, layout), ctx), layout)
        return [[self.comm_net(m, ctx) for m in row] for row in maps]

    def decode(self, z: Tensor, skips: list[Tensor], ctx: Context | None = None) -> Tensor:
        h = z
        for t, dec in enumerate(self.decoders):
            h = dec(h, skips[len(skips) - 1 - t], ctx)
        return self.output(h)

    # -- whole model ---------------------------------------------------------
    def check_layout(self, image_shape: tuple[int, ...], layout: PartitionLayout) -> None:
        if tuple(image_shape[-2:]) != (layout.H, layout.W):
            raise ValueError(f"image {image_shape[-2:]} does not match layout {layout.H}x{layout.W}")
        if image_shape[1] != self.config.in_channels:
            raise ValueError(f"model expects {self.config.in_channels} input channels, got {image_shape[1]}")
        q = 2**self.config.depth
        bad = [s for s in layout.heights + layout.widths if s % q]
        if bad:
            raise ValueError(f"subimage sizes {sorted(set(bad))} are not divisible by 2^D = {q}")
        if self.config.comm and self.config.comm_maps and not layout.is_uniform():
            raise ValueError("communication needs equally sized subimages")

    def forward(self, image: Tensor, layout: PartitionLayout, ctx: Context | None = None) -> Tensor:
        """Logits ``(n, K, H, W)`` for a batch of full images.

        Sequential single-graph version; :mod:`ddunet.runtime` runs the same
        pieces on worker threads.
        """
        self.check_layout(image.shape, layout)
        ctx = ctx or Context()
        cells = layout.cells()
        sub = partition(image, layout)
        clone_ctx = [ctx.fork(k) for k in range(len(cells))]
        comm_ctx = ctx.fork(len(cells))
        kept, sent, skips = {}, {}, {}
        for k, (i, j) in enumerate(cells):
            b, s = self.encode(sub[i][j], clone_ctx[k])
            kept[k], sent[k] = self.split_bottleneck(b)
            skips[k] = s
        grid = [[sent[i * layout.M + j] for j in range(layout.M)] for i in range(layout.N)]
        returned = self.communicate(grid, layout, comm_ctx)
        logits = [[None] * layout.M for _ in range(layout.N)]
        for k, (i, j) in enumerate(cells):
            z = self.merge_bottleneck(kept[k], returned[i][j])
            logits[i][j] = self.decode(z, skips[k], clone_ctx[k])
        commit_contexts(comm_ctx, clone_ctx)
        return stitch(logits, layout)

    __call__ = forward


def commit_contexts(comm_ctx: Context, clone_ctx: list[Context]) -> None:
    """Apply deferred BatchNorm updates: comm net first, then clones row-major."""
    comm_ctx.commit()
    for c in clone_ctx:
        c.commit()


def build(config: ModelConfig, seed: int = 0) -> DDUNet:
    """Construct and He-initialize a model."""
    model = DDUNet(config)
    model.init(np.random.default_rng(seed))
    return model


def parameter_table(model: DDUNet) -> list[tuple[str, int]]:
    """Trainable parameter count per block, in canonical order."""
    return [(name, block.num_parameters()) for name, block in model.blocks()]


class UNet:
    """Plain U-Net forward over a :class:`DDUNet`'s encoder/decoder weights.

    Written without partitioning or the comm net; used as the reference the
    DDU-Net(D, 0, .) 1x1-layout path must reproduce.
    """

    def __init__(self, model: DDUNet):
        self.m = model

    def __call__(self, x: Tensor, ctx: Context | None = None) -> Tensor:
        m = self.m
        ctx = ctx or Context()
        local = ctx.fork(0)
        skips = [m.input_block(x, local)]
        for enc in m.encoders[:-1]:
            skips.append(enc(skips[-1], local))
        h = m.encoders[-1](skips[-1], local)
        for dec in m.decoders:
            h = dec(h, skips.pop(), local)
        out = m.output(h)
        local.commit()
        return out
