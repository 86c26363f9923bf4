"""Binary checkpoint container for named float64 tensors.

Layout, per entry, back to back until end of file (all integers are 64-bit
little-endian unsigned):

    name_length | name (UTF-8) | rank | extent_0 .. extent_{rank-1} | values

Values are row-major float64. A JSON sidecar next to the container records
hyperparameters (schedule, optimizer), configs, and flags such as which
tensors are frozen. Writes are atomic: temp file then rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

_U64 = struct.Struct("<Q")


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(Path(path), text.encode("utf-8"))


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    parts: list[bytes] = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(_U64.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U64.pack(arr.ndim))
        for extent in arr.shape:
            parts.append(_U64.pack(extent))
        # ascontiguousarray would promote 0-d to 1-d, so serialize via tobytes
        parts.append(arr.tobytes(order="C"))
    _atomic_write_bytes(path, b"".join(parts))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    out: dict[str, np.ndarray] = {}
    pos = 0
    end = len(raw)

    def read_u64() -> int:
        nonlocal pos
        if pos + 8 > end:
            raise ValueError(f"truncated checkpoint {path} at byte {pos}")
        (value,) = _U64.unpack_from(raw, pos)
        pos += 8
        return value

    while pos < end:
        name_len = read_u64()
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = read_u64()
        shape = tuple(read_u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if pos + nbytes > end:
            raise ValueError(f"truncated tensor data for {name!r} in {path}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += nbytes
        out[name] = arr.astype(np.float64)
    return out


def save_sidecar(path: str | Path, payload: dict) -> None:
    atomic_write_text(Path(path), json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_sidecar(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def save_checkpoint(base_path: str | Path, tensors: dict[str, np.ndarray],
                    sidecar: dict) -> tuple[Path, Path]:
    """Write <base>.bin plus <base>.json; returns both paths."""
    base = Path(base_path)
    bin_path = base.with_suffix(".bin")
    json_path = base.with_suffix(".json")
    save_tensors(bin_path, tensors)
    save_sidecar(json_path, sidecar)
    return bin_path, json_path


def load_checkpoint(base_path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    base = Path(base_path)
    return load_tensors(base.with_suffix(".bin")), load_sidecar(base.with_suffix(".json"))
