"""Binary checkpoint format.

Layout: magic ``RLARCKPT1``; array count (u32 LE); per array: name length
(u16 LE) + UTF-8 name + rank (u8) + dims (u32 LE each) + float32 LE payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RLARCKPT1"


class CheckpointError(Exception):
    pass


def save_arrays(path: str, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f4").tobytes())


def load_arrays(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (count,) = take("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<B")
        shape = tuple(take(f"<{rank}I")) if rank else ()
        n = int(np.prod(shape)) if shape else 1
        if len(raw) - pos < 4 * n:
            raise CheckpointError(f"{path}: truncated payload for {name}")
        payload = np.frombuffer(raw, dtype="<f4", count=n, offset=pos)
        pos += 4 * n
        arrays[name] = payload.reshape(shape).astype(np.float64)
    return arrays
