"""Model checkpoints: network spec plus parameters in one little-endian file.

Layout: 16-byte magic, version byte, ``u32`` length + UTF-8 JSON header
(network spec and metadata), ``u32`` tensor count, then per tensor a dtype
byte (0 = float32, 1 = float64), a rank byte, ``u32`` dims and the raw data.
Tensors are the flattened parameters followed by the optional per-channel
input scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import BadMagic, DimensionMismatch, TruncatedFile
from .network import NetworkSpec, flatten_params, unflatten_params

CKPT_MAGIC = b"C2G-CHECKPOINT\r\n"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass(eq=False)
class Checkpoint:
    spec: NetworkSpec
    params: list
    input_scale: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def prepare(self, x: np.ndarray) -> np.ndarray:
        """Apply the stored per-channel input scaling."""
        x = np.asarray(x, dtype=np.float32)
        return x * self.input_scale if self.input_scale is not None else x


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = flatten_params(ckpt.params)
    header = {"network": ckpt.spec.to_dict(), "meta": ckpt.meta, "has_input_scale": ckpt.input_scale is not None}
    if ckpt.input_scale is not None:
        tensors = tensors + [np.asarray(ckpt.input_scale)]
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(hbytes)), hbytes, struct.pack("<I", len(tensors))]
    for t in tensors:
        t = np.asarray(t)
        code = _CODES[t.dtype]
        parts.append(struct.pack(f"<BB{t.ndim}I", code, t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise BadMagic("not a checkpoint file")
    try:
        off = len(CKPT_MAGIC)
        version, hlen = struct.unpack_from("<BI", buf, off)
        if version != CKPT_VERSION:
            raise BadMagic(f"unsupported checkpoint version {version}")
        off += 5
        if len(buf) < off + hlen:
            raise TruncatedFile("checkpoint header truncated")
        header = json.loads(buf[off : off + hlen].decode())
        off += hlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = []
        for _ in range(count):
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(shape))
            if len(buf) < off + n * dt.itemsize:
                raise TruncatedFile("checkpoint tensor data truncated")
            tensors.append(np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape).astype(dt.newbyteorder("=")))
            off += n * dt.itemsize
    except struct.error as exc:
        raise TruncatedFile(f"checkpoint truncated: {exc}") from None
    if off != len(buf):
        raise DimensionMismatch("trailing bytes after checkpoint tensors")

    spec = NetworkSpec.from_dict(header["network"])
    scale = tensors.pop() if header["has_input_scale"] else None
    expected = [s for shapes in spec.param_shapes() for s in shapes]
    if [t.shape for t in tensors] != [tuple(s) for s in expected]:
        raise DimensionMismatch("checkpoint tensors do not match the network spec")
    return Checkpoint(spec, unflatten_params(spec, tensors), scale, header.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
