"""Little-endian tensor entry encoding shared by checkpoints and raw tensor files.

One entry is::

    u32 name length | UTF-8 name | u8 dtype tag | u32 rank | u32 extents... | payload

Dtype tags: 0 = float32, 1 = float64, 2 = uint8. A raw tensor file is exactly
one entry and nothing else.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


def pack_u32(n: int) -> bytes:
    return struct.pack("<I", n)


def pack_entry(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array)
    tag = TAG_OF.get(array.dtype)
    if tag is None:
        raise ValueError(f"cannot serialize dtype {array.dtype}")
    encoded = name.encode("utf-8")
    head = pack_u32(len(encoded)) + encoded + struct.pack("<B", tag) + pack_u32(array.ndim)
    head += b"".join(pack_u32(n) for n in array.shape)
    return head + np.ascontiguousarray(array, dtype=DTYPE_TAGS[tag]).tobytes()


class Reader:
    """Cursor over a byte buffer; every failure reports the byte offset."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, "
                              f"{len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def entry(self) -> tuple:
        start = self.pos
        name_len = self.u32("entry name length")
        try:
            name = self.take(name_len, "entry name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not valid UTF-8", start + 4) from exc
        tag_pos = self.pos
        tag = self.u8("dtype tag")
        if tag not in DTYPE_TAGS:
            raise FormatError(f"unknown dtype tag {tag}", tag_pos)
        rank = self.u32("rank")
        shape = tuple(self.u32("extent") for _ in range(rank))
        dt = DTYPE_TAGS[tag]
        count = int(np.prod(shape, dtype=np.int64))
        payload = self.take(count * dt.itemsize, f"payload of {name!r}")
        array = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        return name, array

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} unexpected trailing bytes", self.pos)


def write_tensor_file(path, array: np.ndarray, name: str = "tensor") -> None:
    Path(path).write_bytes(pack_entry(name, array))


def read_tensor_file(path) -> tuple:
    """Return ``(name, array)`` from a single-entry raw tensor file."""
    reader = Reader(Path(path).read_bytes())
    name, array = reader.entry()
    reader.expect_end()
    return name, array
