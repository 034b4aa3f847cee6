"""Flat binary parameter container.

Layout: magic ``APLS``, format version u32, then one record per entry in
sorted name order: name length u32, UTF-8 name bytes, rank u32, one u32
extent per axis, then the row-major float64 payload. All integers little
endian.

Text metadata (run config, training class list) rides along as reserved
``meta.*`` entries whose payload is the UTF-8 byte sequence widened to
float64, so the container stays single-format.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"APLS"
VERSION = 1
META_PREFIX = "meta."


def _text_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _array_to_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    metadata: dict[str, str] | None = None) -> None:
    """Write parameters (and optional text metadata) to one binary file."""
    entries: dict[str, np.ndarray] = {}
    for name, arr in params.items():
        if name.startswith(META_PREFIX):
            raise CheckpointError(f"parameter name {name!r} collides with the metadata prefix")
        # np.ascontiguousarray would widen rank-0 to rank-1; np.array keeps it
        entries[name] = np.array(arr, dtype=np.float64, order="C")
    for key, text in (metadata or {}).items():
        entries[META_PREFIX + key] = _text_to_array(text)

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(entries):
            arr = entries[name]
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a container back into (parameters, metadata)."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {blob[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")

    params: dict[str, np.ndarray] = {}
    metadata: dict[str, str] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        if name.startswith(META_PREFIX):
            metadata[name[len(META_PREFIX):]] = _array_to_text(payload)
        else:
            params[name] = payload.astype(np.float64)
    return params, metadata
