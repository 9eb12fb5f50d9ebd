"""Binary parameter checkpoints.

Layout: magic b"TCKP", version u16 little-endian, then one record per tensor:
name length u32, UTF-8 name, rank u32, dims u64[rank], float64 payload
(row-major, little-endian). Records run to EOF and are written in sorted name
order so identical parameter sets produce byte-identical files. Scalar
metadata (dims, flags such as frozen markers) is stored as ordinary tensors
under the "meta/" prefix.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TCKP"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray],
                    meta: dict[str, float] | None = None) -> None:
    records = {name: np.asarray(arr, dtype=np.float64) for name, arr in params.items()}
    for key, value in (meta or {}).items():
        records[f"meta/{key}"] = np.asarray([float(value)])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        for name in sorted(records):
            arr = records[name]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 6
    params: dict[str, np.ndarray] = {}
    meta: dict[str, float] = {}
    while pos < len(raw):
        try:
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if len(raw) - pos < name_len:
                raise struct.error("short name")
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            payload = raw[pos:pos + 8 * count]
            if len(payload) < 8 * count:
                raise struct.error("short payload")
            pos += 8 * count
        except struct.error as exc:
            raise CheckpointError(f"{path}: truncated record ({exc})") from exc
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
        if name.startswith("meta/"):
            meta[name[len("meta/"):]] = float(arr.reshape(-1)[0])
        else:
            params[name] = arr
    return params, meta
