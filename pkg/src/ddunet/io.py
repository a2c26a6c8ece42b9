"""File formats: binary PGM, model checkpoints, CSV reports, key=value metadata.

Checkpoint layout (all little-endian)::

    b"DDUN"            magic
    u32                format version
    u32 D, u32 F, u8 C
    u32 len, u32[len]  channel list
    f64                dropout
    u64                trainable parameter count
    u64                blob length (float32 values)
    f32[blob length]   parameters and BatchNorm running stats, canonical order
"""

from __future__ import annotations

import csv
import re
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"DDUN"
VERSION = 1


class FormatError(ValueError):
    """Malformed or incompatible file."""


# ---------------------------------------------------------------------------
# PGM (binary P5, maxval 255)
# ---------------------------------------------------------------------------
def encode_pgm(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    if a.min(initial=0) < 0 or a.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + a.astype(np.uint8).tobytes()


def write_pgm(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(array))


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_pgm(raw: bytes) -> np.ndarray:
    if raw[:2] != b"P5":
        raise FormatError(f"unsupported PGM variant {raw[:2]!r}; only binary P5 is read")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise FormatError("truncated PGM header")
        try:
            fields.append(int(m.group(1)))
        except ValueError as exc:
            raise FormatError(f"bad PGM header field {m.group(1)!r}") from exc
        pos = m.end()
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header")
    pos += 1
    payload = raw[pos:pos + w * h]
    if len(payload) != w * h:
        raise FormatError(f"truncated PGM data: expected {w * h} bytes, got {len(payload)}")
    return np.frombuffer(payload, np.uint8).reshape(h, w).copy()


def read_pgm(path: str | Path) -> np.ndarray:
    """uint8 array of shape (height, width)."""
    return decode_pgm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def state_arrays(model) -> list[tuple[str, np.ndarray]]:
    out = []
    for path, owner, attr in model.named_state():
        value = getattr(owner, attr)
        out.append((path, value if isinstance(value, np.ndarray) else value.data))
    return out


def state_size(model) -> int:
    return sum(a.size for _, a in state_arrays(model))


def save_checkpoint(model, path: str | Path) -> None:
    cfg = model.config
    blob = np.concatenate([a.astype("<f4").ravel() for _, a in state_arrays(model)])
    head = MAGIC + struct.pack("<IIIB", VERSION, cfg.depth, cfg.comm_maps, int(cfg.comm))
    head += struct.pack("<I", len(cfg.channels)) + struct.pack(f"<{len(cfg.channels)}I", *cfg.channels)
    head += struct.pack("<dQQ", cfg.dropout, model.num_parameters(), blob.size)
    Path(path).write_bytes(head + blob.tobytes())


def read_checkpoint(path: str | Path):
    """(ModelConfig, declared trainable count, float32 blob)."""
    from .model import ModelConfig

    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError("not a DDU-Net checkpoint (bad magic)")
    try:
        version, D, F, C = struct.unpack_from("<IIIB", raw, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 4 + 13
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        channels = struct.unpack_from(f"<{n}I", raw, pos)
        pos += 4 * n
        dropout, n_params, n_blob = struct.unpack_from("<dQQ", raw, pos)
        pos += 24
    except struct.error as exc:
        raise FormatError("truncated checkpoint header") from exc
    blob = np.frombuffer(raw, "<f4", offset=pos)
    if blob.size != n_blob:
        raise FormatError(f"blob holds {blob.size} values, header declares {n_blob}")
    return ModelConfig(D, F, bool(C), tuple(channels), dropout), n_params, blob


def load_checkpoint(path: str | Path, model=None):
    """Load into ``model`` (config must match) or build a fresh model."""
    from .model import DDUNet

    cfg, n_params, blob = read_checkpoint(path)
    if model is None:
        model = DDUNet(cfg)
    elif model.config != cfg:
        raise FormatError(f"checkpoint is {cfg.name} {cfg.channels}, model is "
                          f"{model.config.name} {model.config.channels}")
    if n_params != model.num_parameters():
        raise FormatError(f"checkpoint declares {n_params} parameters, config implies {model.num_parameters()}")
    if blob.size != state_size(model):
        raise FormatError(f"blob holds {blob.size} values, config implies {state_size(model)}")
    pos = 0
    for _, owner, attr in model.named_state():
        value = getattr(owner, attr)
        arr = value if isinstance(value, np.ndarray) else value.data
        chunk = blob[pos:pos + arr.size].reshape(arr.shape).astype(arr.dtype)
        pos += arr.size
        if isinstance(value, np.ndarray):
            setattr(owner, attr, chunk)
        else:
            value.data[...] = chunk
    return model


# ---------------------------------------------------------------------------
# CSV and metadata
# ---------------------------------------------------------------------------
def write_csv(path: str | Path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([format_value(v) for v in row])


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_meta(path: str | Path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()))


def read_keyvalue(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
