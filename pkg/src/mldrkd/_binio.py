"""Little-endian binary reading/writing with positioned failure messages.

Both on-disk formats in this package (checkpoints, datasets) are strict:
any truncation, bad magic, or length disagreement raises FormatError
naming the byte offset and the field being read, and never yields a
partially constructed object.
"""

import struct

import numpy as np

from .errors import FormatError


class ByteReader:
    """Sequential reader over an in-memory buffer with offset-tagged errors."""

    def __init__(self, data, source="<bytes>"):
        self._data = data
        self._source = source
        self.offset = 0

    def _take(self, n, what):
        end = self.offset + n
        if end > len(self._data):
            raise FormatError(
                f"{self._source}: truncated at byte {self.offset} while reading {what} "
                f"({n} bytes needed, {len(self._data) - self.offset} available)"
            )
        chunk = self._data[self.offset : end]
        self.offset = end
        return chunk

    def magic(self, expected, what="magic"):
        got = self._take(len(expected), what)
        if got != expected:
            raise FormatError(
                f"{self._source}: bad {what} at byte 0: expected {expected!r}, got {got!r}"
            )

    def u32(self, what):
        return struct.unpack("<I", self._take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self._take(8, what))[0]

    def u32_array(self, count, what):
        raw = self._take(4 * count, what)
        return np.frombuffer(raw, dtype="<u4").copy()

    def f64_array(self, count, what):
        raw = self._take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").copy()

    def utf8(self, what):
        n = self.u32(f"{what} length")
        raw = self._take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{self._source}: invalid utf-8 in {what} at byte {self.offset - n}: {e}") from None

    def expect_eof(self):
        extra = len(self._data) - self.offset
        if extra:
            raise FormatError(
                f"{self._source}: {extra} unexpected trailing bytes starting at byte {self.offset}"
            )


class ByteWriter:
    """Append-only builder mirroring ByteReader's field encodings."""

    def __init__(self):
        self._parts = []
        self.offset = 0

    def _put(self, b):
        self._parts.append(b)
        self.offset += len(b)

    def raw(self, b):
        self._put(bytes(b))

    def u32(self, v):
        self._put(struct.pack("<I", v))

    def u64(self, v):
        self._put(struct.pack("<Q", v))

    def u32_array(self, arr):
        self._put(np.ascontiguousarray(arr, dtype="<u4").tobytes())

    def f64_array(self, arr):
        self._put(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def utf8(self, s):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self._put(raw)

    def getvalue(self):
        return b"".join(self._parts)
