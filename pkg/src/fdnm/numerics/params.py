"""Named parameter collections and the FDNM1 checkpoint format.

Layout of a checkpoint file::

    FDNM1\\n
    <name> <d0> <d1> ...\\n      one line per entry, in store order
    \\n                          blank line ends the header
    <little-endian float32 payload, entries concatenated in header order>
"""
from __future__ import annotations

import io
import os
from collections import OrderedDict
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"FDNM1\n"


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered ``name -> Tensor`` table of learnable parameters."""

    def __init__(self) -> None:
        self._entries: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value, dtype=np.float64) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if any(ch.isspace() for ch in name) or not name:
            raise ValueError(f"parameter name {name!r} must be non-empty without whitespace")
        t = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def names(self) -> list[str]:
        return list(self._entries)

    def num_scalars(self) -> int:
        return int(sum(t.size for t in self._entries.values()))

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self._entries.items())

    def load_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        for name, t in self._entries.items():
            if name not in arrays:
                if strict:
                    raise CheckpointError(f"checkpoint is missing parameter {name!r}")
                continue
            src = np.asarray(arrays[name])
            if src.shape != t.shape:
                raise CheckpointError(
                    f"parameter {name!r}: checkpoint shape {src.shape} != model shape {t.shape}"
                )
            t.data = src.astype(t.dtype).copy()


def write_checkpoint(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(arrays))


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    header = io.StringIO()
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"entry name {name!r} contains whitespace")
        shape = arr.shape if arr.ndim else (1,)
        header.write(name + " " + " ".join(str(d) for d in shape) + "\n")
    header.write("\n")
    payload = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in arrays.values()
    )
    return MAGIC + header.getvalue().encode("utf-8") + payload


def read_checkpoint(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        return decode_checkpoint(blob)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def decode_checkpoint(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad magic, expected FDNM1")
    end = blob.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        raise CheckpointError("header is not terminated by a blank line")
    header = blob[len(MAGIC):end + 1].decode("utf-8")
    offset = end + 2
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for lineno, line in enumerate(header.splitlines(), start=2):
        if not line:
            continue
        name, *dims = line.split(" ")
        try:
            shape = tuple(int(d) for d in dims)
        except ValueError:
            raise CheckpointError(f"header line {lineno}: bad shape {dims!r}") from None
        if not shape or any(d < 1 for d in shape):
            raise CheckpointError(f"header line {lineno}: shape must have positive extents")
        count = int(np.prod(shape))
        nbytes = 4 * count
        if offset + nbytes > len(blob):
            raise CheckpointError(
                f"payload truncated at byte {len(blob)} while reading {name!r} (needs {offset + nbytes})"
            )
        out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after payload")
    return out
