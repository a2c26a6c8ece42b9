"""Closed-form receptive field, activation memory, weight counts and comm volume.

Nothing here builds a model: weight counts come from layer formulas so they
can be cross-checked against the parameters of an actual :class:`DDUNet`.
"""

from __future__ import annotations

import io as _io
import csv
import math
from dataclasses import dataclass

from .model import ModelConfig

MIB = 2**20


# ---------------------------------------------------------------------------
# receptive field
# ---------------------------------------------------------------------------
def _conv(r: int, k: int) -> int:
    return r + (k - 1)


def receptive_field(config: ModelConfig) -> tuple[int, int]:
    """Theoretical receptive field of one output pixel, walking output -> input."""
    r = 1  # 1x1 output conv
    for _ in range(config.depth):  # decoder blocks, last to first
        r = _conv(_conv(r, 3), 3)
        r = math.ceil(r / 2)  # 2x2 stride-2 transposed conv
    if config.comm and config.comm_maps > 0:
        for _ in range(3):
            r = _conv(r, 5)
    for _ in range(config.depth):  # encoder blocks, deepest first
        r = _conv(_conv(r, 3), 3)
        r = 2 * r  # 2x2 stride-2 maxpool
    r = _conv(_conv(r, 3), 3)  # input block
    return r, r


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------
def conv_weights(cin: int, cout: int, k: int, bias: bool = False) -> int:
    return k * k * cin * cout + (cout if bias else 0)


def double_conv_weights(cin: int, cout: int) -> int:
    # two bias-free 3x3 convs, each followed by BatchNorm (gamma, beta)
    return conv_weights(cin, cout, 3) + 2 * cout + conv_weights(cout, cout, 3) + 2 * cout


def comm_net_weights(F: int) -> int:
    return 3 * (conv_weights(F, F, 5, bias=True) + 2 * F) if F else 0


def block_weights(config: ModelConfig) -> list[tuple[str, int]]:
    """Per-block trainable weights in canonical block order."""
    D, ch = config.depth, config.channels
    rows = [("input block", double_conv_weights(ch[0], ch[1]))]
    for d in range(D):
        rows.append((f"encoder block {d + 1}", double_conv_weights(ch[d + 1], ch[d + 2])))
    rows.append(("communication network", comm_net_weights(config.comm_maps)))
    prev = config.bottleneck_channels
    for t, out in enumerate(config.decoder_channels):
        skip = config.level_channels[D - 1 - t]
        rows.append((f"decoder block {t + 1}", 4 * prev * out + double_conv_weights(out + skip, out)))
        prev = out
    rows.append(("output block", conv_weights(prev, config.num_classes, 1, bias=True)))
    return rows


# ---------------------------------------------------------------------------
# activation memory
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class MemoryRow:
    name: str
    size: int  # working height: pooled size for encoders, pre-upsampling size for decoders
    in_channels: int
    out_channels: int
    values: int
    mib: float
    weights: int
    weight_mib: float


def memory_table(config: ModelConfig, input_hw: tuple[int, int], grid: tuple[int, int] = (1, 1),
                 bytes_per_value: int = 4) -> list[MemoryRow]:
    """Stored activation values and weights per block for one clone.

    ``input_hw`` is the size of one subimage; ``grid`` only affects the
    communication network, which sees all ``N*M`` bottlenecks at once.
    Counting convention: every pool, conv, BatchNorm, transposed-conv and
    channel-concat output is stored once; ReLU and dropout are in-place.
    The output block stores its conv output.
    """
    H, W = input_hw
    D, ch = config.depth, config.channels
    q = 2**D
    if H % q or W % q:
        raise ValueError(f"input {H}x{W} is not divisible by 2^D = {q}")
    weights = dict(block_weights(config))

    def row(name, size, cin, cout, values, bpv=bytes_per_value):
        w = weights.get(name, 0)
        return MemoryRow(name, size, cin, cout, values, values * bpv / MIB, w, w * bytes_per_value / MIB)

    hw = H * W
    rows = [row("input", H, ch[0], ch[0], ch[0] * hw)]
    rows.append(row("input block", H, ch[0], ch[1], 4 * ch[1] * hw))
    for d in range(D):
        cin, cout = ch[d + 1], ch[d + 2]
        a = hw // 4 ** (d + 1)
        rows.append(row(f"encoder block {d + 1}", H >> (d + 1), cin, cout, cin * a + 4 * cout * a))
    F = config.comm_maps
    if F:
        N, M = grid if config.comm else (1, 1)
        a = N * M * (hw // 4**D) if config.comm else hw // 4**D
        rows.append(row("communication network", H >> D, F, F, 7 * F * a))
    prev = config.bottleneck_channels
    for t, out in enumerate(config.decoder_channels):
        skip = config.level_channels[D - 1 - t]
        a = hw // 4 ** (D - 1 - t)
        values = out * a + (out + skip) * a + 4 * out * a
        rows.append(row(f"decoder block {t + 1}", H >> (D - t), prev, out, values))
        prev = out
    rows.append(row("output block", H, prev, config.num_classes, config.num_classes * hw))
    rows.append(row("labels", H, config.num_classes, config.num_classes, hw, bpv=8))
    return rows


# ---------------------------------------------------------------------------
# communication volume
# ---------------------------------------------------------------------------
def comm_volume(config: ModelConfig, grid: tuple[int, int], input_hw: tuple[int, int],
                batch: int = 1) -> dict[str, int]:
    """Values crossing the clone/coordinator boundary per training step.

    Gather plus scatter of ``F`` bottleneck maps per subimage in the forward
    pass, and the same again for their gradients.
    """
    N, M = grid
    H, W = input_hw
    q = 2**config.depth
    fwd = 2 * batch * N * M * config.comm_maps * (H // q) * (W // q)
    return {"forward": fwd, "backward": fwd, "total": 2 * fwd}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------
MEMORY_HEADER = ("block", "size", "in_channels", "out_channels", "values", "mib", "weights", "weight_mib")


def report(config: ModelConfig, input_hw: tuple[int, int], grid: tuple[int, int]) -> tuple[str, str]:
    """(aligned text, CSV) summary of one configuration."""
    r, _ = receptive_field(config)
    rows = memory_table(config, input_hw, grid)
    vol = comm_volume(config, grid, input_hw)
    total_w = sum(w for _, w in block_weights(config))

    lines = [f"{config.name}  channels {'-'.join(map(str, config.channels))}",
             f"receptive field: {r} x {r}",
             f"subimage {input_hw[0]}x{input_hw[1]}, grid {grid[0]}x{grid[1]}",
             ""]
    cells = [MEMORY_HEADER] + [(m.name, m.size, m.in_channels, m.out_channels, m.values,
                                f"{m.mib:.2f}", m.weights, f"{m.weight_mib:.2f}") for m in rows]
    widths = [max(len(str(c[i])) for c in cells) for i in range(len(MEMORY_HEADER))]
    for c in cells:
        lines.append("  ".join(str(v).ljust(w) if i == 0 else str(v).rjust(w)
                               for i, (v, w) in enumerate(zip(c, widths))))
    lines += ["",
              f"total parameters: {total_w}",
              f"comm values per image (forward gather+scatter): {vol['forward']}",
              f"comm values per image (forward+backward): {vol['total']}"]

    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MEMORY_HEADER)
    for m in rows:
        w.writerow([m.name, m.size, m.in_channels, m.out_channels, m.values, repr(m.mib),
                    m.weights, repr(m.weight_mib)])
    w.writerow(["receptive_field", r, "", "", "", "", "", ""])
    w.writerow(["comm_volume", "", "", "", vol["total"], "", "", ""])
    return "\n".join(lines) + "\n", buf.getvalue()
