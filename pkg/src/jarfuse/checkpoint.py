"""Flat binary tensor checkpoints.

File layout (the on-disk contract, also described in the README):

    line 1:      ``tensors-v1``
    line 2:      ascii integer, the number of entries
    next lines:  one per entry, ``<name> <dim0> <dim1> ...`` (ascii, space
                 separated; a 0-d entry lists no dims)
    next line:   ``DATA``
    payload:     raw little-endian float64 values, entries concatenated in
                 header order, row-major within each entry

Header lines end with ``\\n``.  Names may not contain whitespace.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensor import ContractError, ParamStore

MAGIC = b"tensors-v1"


class CheckpointError(ValueError):
    """The file does not match the documented checkpoint layout."""


def save_tensors(path: str | Path, entries: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays in the flat binary format."""
    lines = [MAGIC, str(len(entries)).encode()]
    for name, arr in entries.items():
        if any(ch.isspace() for ch in name):
            raise ContractError(f"checkpoint name may not contain whitespace: {name!r}")
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {dims}".rstrip().encode())
    lines.append(b"DATA")
    with open(path, "wb") as fh:
        fh.write(b"\n".join(lines) + b"\n")
        for arr in entries.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into name -> float64 array (header order)."""
    raw = Path(path).read_bytes()
    header_end = raw.find(b"\nDATA\n")
    if header_end < 0:
        raise CheckpointError(f"{path}: missing DATA marker")
    header = raw[:header_end].split(b"\n")
    if not header or header[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, expected {MAGIC.decode()!r}")
    try:
        count = int(header[1])
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable entry count") from exc
    if len(header) != 2 + count:
        raise CheckpointError(
            f"{path}: header lists {len(header) - 2} entries, expected {count}"
        )
    entries: dict[str, np.ndarray] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    total = 0
    for line in header[2:]:
        parts = line.decode().split()
        name, dims = parts[0], tuple(int(d) for d in parts[1:])
        if name in entries:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        entries[name] = None  # type: ignore[assignment]
        shapes.append((name, dims))
        total += int(np.prod(dims)) if dims else 1
    payload = raw[header_end + len(b"\nDATA\n") :]
    if len(payload) != total * 8:
        raise CheckpointError(
            f"{path}: payload holds {len(payload)} bytes, expected {total * 8}"
        )
    offset = 0
    for name, dims in shapes:
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset * 8)
        entries[name] = arr.reshape(dims).astype(np.float64)
        offset += n
    return entries


def save_params(path: str | Path, store: ParamStore) -> None:
    save_tensors(path, {name: t.data for name, t in store.items()})


def load_params(path: str | Path, store: ParamStore) -> None:
    """Load values into an existing store; names and shapes must match."""
    entries = load_tensors(path)
    if set(entries) != set(store.names()):
        missing = set(store.names()) - set(entries)
        extra = set(entries) - set(store.names())
        raise CheckpointError(
            f"{path}: parameter names differ (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})"
        )
    for name, arr in entries.items():
        t = store[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arr.shape}, store expects {t.data.shape}"
            )
        t.data[...] = arr
