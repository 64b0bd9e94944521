"""
Binary checkpoint format shared by all model families.

Layout (little-endian): magic ``SGV1``, version u16, then entries until EOF:
name length u16, UTF-8 name, rank u8, one u32 per dimension, float64
payload in row-major order.
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np

from src.utils.errors import FormatError
from src.utils.logging import logger

MAGIC = b"SGV1"
VERSION = 1


def encode_checkpoint(state: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, value in state.items():
        array = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes(order="C"))
    return b"".join(chunks)


def decode_checkpoint(payload: bytes) -> Dict[str, np.ndarray]:
    if payload[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {payload[:4]!r}")
    if len(payload) < 6:
        raise FormatError("checkpoint header truncated")
    (version,) = struct.unpack_from("<H", payload, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")

    state: Dict[str, np.ndarray] = {}
    offset = 6
    try:
        while offset < len(payload):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            end = offset + 8 * count
            if end > len(payload):
                raise FormatError(f"checkpoint entry {name!r} truncated")
            state[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset = end
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"checkpoint truncated or corrupt at byte {offset}") from exc
    return state


def save_checkpoint(path, state: Mapping[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write ``state``; ``meta`` goes to a JSON sidecar ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(state))
    if meta is not None:
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    logger.info(f"Wrote checkpoint {path} ({len(state)} tensors)")
    return path


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint_meta(path) -> Dict[str, Any]:
    sidecar = meta_path(path)
    if not sidecar.exists():
        raise FormatError(f"checkpoint metadata not found: {sidecar}")
    return json.loads(sidecar.read_text())
