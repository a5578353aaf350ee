"""Binary weights container.

Layout (little-endian)::

    b"ESRW" | u32 version (=1) | u32 tensor count
    repeated: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 data
"""
from __future__ import annotations

import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np

from .network import EDGE_CHANNELS, ConfigError, Network, NetworkConfig, param_shapes

MAGIC = b"ESRW"
VERSION = 1


class WeightsFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class WeightsValidationError(ValueError):
    pass


def encode_weights(net: Network) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(net.params))]
    for name, arr in net.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_weights(net: Network, path) -> None:
    """Write ``net`` atomically (temp file + rename)."""
    path = Path(path)
    data = encode_weights(net)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise WeightsFormatError(f"truncated file while reading {what}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise WeightsFormatError("bad magic, not an ESRW weights file", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise WeightsFormatError(f"unsupported version {version}", 4)

    tensors = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise WeightsFormatError("tensor name is not valid UTF-8", start + 2) from None
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4").reshape(dims)
        if name in tensors:
            raise WeightsFormatError(f"duplicate tensor {name!r}", start)
        tensors[name] = arr.astype(np.float32)
    if pos != len(data):
        raise WeightsFormatError("trailing bytes after last tensor", pos)
    return tensors


def infer_config(tensors: dict[str, np.ndarray]) -> NetworkConfig:
    if "sfe.w" not in tensors:
        raise WeightsValidationError("missing tensor 'sfe.w'")
    filters, in_ch = tensors["sfe.w"].shape[:2]
    modes = {3 + v: k for k, v in EDGE_CHANNELS.items()}
    if in_ch not in modes:
        raise WeightsValidationError(f"sfe.w has unsupported input channel count {in_ch}")
    blocks = {int(m.group(1)) for k in tensors if (m := re.match(r"block(\d+)\.", k))}
    variant = "edsr" if "body.w" in tensors else "esrpcb"
    try:
        return NetworkConfig(n_blocks=max(blocks) + 1 if blocks else 0, filters=int(filters),
                             edge_mode=modes[in_ch], variant=variant)
    except ConfigError as exc:
        raise WeightsValidationError(str(exc)) from None


def load_weights(path, config: NetworkConfig | None = None) -> Network:
    """Read a weights file; validate against ``config`` when given, else infer it."""
    tensors = decode_tensors(Path(path).read_bytes())
    if config is None:
        config = infer_config(tensors)
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise WeightsValidationError(f"missing tensor {name!r} required by config")
        if tensors[name].shape != shape:
            raise WeightsValidationError(f"tensor {name!r} has shape {tensors[name].shape}, "
                                         f"expected {shape}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise WeightsValidationError(f"unexpected tensor {extra[0]!r} not in config")
    return Network(config, {k: tensors[k] for k in expected})
