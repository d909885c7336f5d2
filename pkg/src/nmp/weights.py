"""The "NMPW" binary archive: named, shaped little-endian float32 tensors.

Layout (all integers little-endian):

    magic   4 bytes  "NMPW"
    version u32      1
    count   u32      number of entries
    entry   repeated:
        name_len u16, name UTF-8,
        dtype    u8 (0 = float32),
        ndim     u8,
        dims     u32 * ndim,
        payload  raw little-endian float32, prod(dims) * 4 bytes

Used both for model weights and for tensor fixtures (posteriorgrams,
harmonic-stack goldens).
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"NMPW"
VERSION = 1
_DTYPE_F32 = 0


class WeightFormatError(ValueError):
    """Malformed archive; the message names the offending field."""


class WeightArchive:
    """Ordered name -> float32 array store with bit-exact round-trips."""

    def __init__(self, entries=None):
        self._entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
        if entries:
            for name, arr in (entries.items() if hasattr(entries, "items")
                              else entries):
                self[name] = arr

    def __setitem__(self, name: str, arr) -> None:
        # asarray with order="C" keeps 0-d entries 0-d
        arr = np.asarray(arr, dtype=np.float32, order="C")
        self._entries[str(name)] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def items(self):
        return self._entries.items()

    def names(self):
        return list(self._entries)

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self._entries))]
        for name, arr in self._entries.items():
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<BB", _DTYPE_F32, arr.ndim))
            parts.append(struct.pack("<%dI" % arr.ndim, *arr.shape))
            parts.append(arr.astype("<f4", copy=False).tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightArchive":
        view = memoryview(data)
        pos = 0

        def take(n, field):
            nonlocal pos
            if pos + n > len(view):
                raise WeightFormatError(
                    "truncated archive while reading %s" % field)
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4, "magic")) != MAGIC:
            raise WeightFormatError("bad magic (expected NMPW)")
        (version,) = struct.unpack("<I", take(4, "version"))
        if version != VERSION:
            raise WeightFormatError("unsupported version %d" % version)
        (count,) = struct.unpack("<I", take(4, "entry count"))

        archive = cls()
        for i in range(count):
            (name_len,) = struct.unpack("<H", take(2, "name length"))
            name = bytes(take(name_len, "name")).decode("utf-8")
            dtype_code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
            if dtype_code != _DTYPE_F32:
                raise WeightFormatError(
                    "entry %r: unsupported dtype code %d" % (name, dtype_code))
            dims = struct.unpack("<%dI" % ndim, take(4 * ndim, "dims"))
            n_bytes = int(np.prod(dims, dtype=np.int64)) * 4
            payload = take(n_bytes, "payload length (entry %r)" % name)
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            if name in archive:
                raise WeightFormatError("duplicate entry name %r" % name)
            archive._entries[name] = arr
        if pos != len(view):
            raise WeightFormatError(
                "payload length mismatch: %d trailing bytes" % (len(view) - pos))
        return archive

    @classmethod
    def load(cls, path) -> "WeightArchive":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def save_weights(archive: WeightArchive, path) -> None:
    archive.save(path)


def load_weights(path) -> WeightArchive:
    return WeightArchive.load(path)
