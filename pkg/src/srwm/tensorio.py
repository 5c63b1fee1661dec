"""Binary tensor files and dataset manifests.

Tensor file layout (all integers little-endian):

    magic   4 bytes  b"FWTN"
    version u8       1
    dtype   u8       0 = float32, 1 = float64, 2 = uint8
    rank    u8
    dims    u32 * rank
    payload raw row-major values, little-endian

A dataset manifest is UTF-8 text with one entry per line:

    class_name<TAB>relative_path
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FWTN"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


class TensorFormatError(ValueError):
    """Raised for malformed tensor files."""


def tensor_to_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _CODES_BY_KIND:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    code = _CODES_BY_KIND[arr.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(_DTYPE_CODES[code], copy=False).tobytes()
    return header + payload


def tensor_from_bytes(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor record; returns (array, offset past the record)."""
    start = offset
    if blob[offset : offset + 4] != MAGIC:
        raise TensorFormatError(f"bad magic bytes at offset {start}")
    offset += 4
    if offset + 3 > len(blob):
        raise TensorFormatError(f"truncated header at offset {offset}")
    version, code, rank = struct.unpack_from("<BBB", blob, offset)
    offset += 3
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version} at offset {start}")
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code} at offset {start}")
    if offset + 4 * rank > len(blob):
        raise TensorFormatError(f"truncated dims at offset {offset}")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(blob):
        raise TensorFormatError(
            f"truncated payload at offset {offset}: need {nbytes} bytes"
        )
    arr = np.frombuffer(blob[offset : offset + nbytes], dtype=dtype).reshape(dims)
    return arr.copy(), offset + nbytes


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"tensor file not found: {path}")
    try:
        arr, end = tensor_from_bytes(path.read_bytes())
    except TensorFormatError as err:
        raise TensorFormatError(f"{path}: {err}") from None
    return arr


def write_manifest(path: str | Path, entries: list[tuple[str, str]]) -> None:
    """Entries are (class_name, relative_path) pairs."""
    lines = [f"{cls}\t{rel}" for cls, rel in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, list[str]]:
    """Parse a manifest into class_name -> list of relative paths."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    classes: dict[str, list[str]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise TensorFormatError(
                f"{path}:{lineno}: expected 'class<TAB>path', got {line!r}"
            )
        cls, rel = line.split("\t", 1)
        classes.setdefault(cls, []).append(rel)
    return classes
