"""Checksummed binary containers for training state and deployable exports.

Both files share the same framing: a magic string, a version word, a JSON
metadata blob, typed payload records, and a trailing CRC32 of everything
before it. Truncation or corruption surfaces as CheckpointError. The exact
byte layout is documented in docs/file-formats.md.

Packed-weight sections carry a 16-byte header: u32 section magic 'PKW0',
u32 bit-width, and four u16 dimensions (O, I, Kh, Kw), followed by the
per-output-channel float32 scales and the packed code payload.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .intkernel import PackedWeights, packed_nbytes

CKPT_MAGIC = b"QSRCKPT1"
PACK_MAGIC = b"QSRPACK1"
VERSION = 1
SECTION_MAGIC = 0x30574B50  # 'PKW0' little-endian

_DTYPES = {0: np.float32, 1: np.int32, 2: np.uint8, 3: np.float64, 4: np.int64}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class _Writer:
    def __init__(self):
        self.parts = []

    def raw(self, b):
        self.parts.append(bytes(b))

    def pack(self, fmt, *vals):
        self.parts.append(struct.pack(fmt, *vals))

    def name(self, s):
        b = s.encode("utf-8")
        self.pack("<H", len(b))
        self.raw(b)

    def tensor(self, name, arr):
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float32)
        self.name(name)
        self.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        for d in arr.shape:
            self.pack("<I", d)
        self.raw(arr.tobytes())

    def finish(self, path):
        body = b"".join(self.parts)
        with open(path, "wb") as f:
            f.write(body)
            f.write(struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, path, magic):
        try:
            with open(path, "rb") as f:
                blob = f.read()
        except OSError as e:
            raise CheckpointError(f"cannot read {path}: {e}") from e
        if len(blob) < len(magic) + 8:
            raise CheckpointError(f"{path}: file too short")
        body, crc_bytes = blob[:-4], blob[-4:]
        if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
            raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
        if body[: len(magic)] != magic:
            raise CheckpointError(f"{path}: bad magic {body[:8]!r}")
        self.body = body
        self.off = len(magic)
        version = self.unpack("<I")[0]
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.body):
            raise CheckpointError("record overruns file body")
        vals = struct.unpack_from(fmt, self.body, self.off)
        self.off += size
        return vals

    def raw(self, size):
        if self.off + size > len(self.body):
            raise CheckpointError("record overruns file body")
        b = self.body[self.off : self.off + size]
        self.off += size
        return b

    def name(self):
        (n,) = self.unpack("<H")
        return self.raw(n).decode("utf-8")

    def tensor(self):
        name = self.name()
        code, ndim = self.unpack("<BB")
        shape = tuple(self.unpack("<I")[0] for _ in range(ndim))
        dtype = np.dtype(_DTYPES[code])
        data = self.raw(int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize)
        arr = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
        return name, arr


def _write_meta(w, meta):
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    w.pack("<I", len(blob))
    w.raw(blob)


def _read_meta(r):
    (n,) = r.unpack("<I")
    return json.loads(r.raw(n).decode("utf-8"))


# ---------------------------------------------------------------------------
# training checkpoints


def save_checkpoint(path, meta, tensors):
    w = _Writer()
    w.raw(CKPT_MAGIC)
    w.pack("<I", VERSION)
    _write_meta(w, meta)
    w.pack("<I", len(tensors))
    for name in sorted(tensors):
        w.tensor(name, tensors[name])
    w.finish(path)


def load_checkpoint(path):
    r = _Reader(path, CKPT_MAGIC)
    meta = _read_meta(r)
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        name, arr = r.tensor()
        tensors[name] = arr
    return meta, tensors


# ---------------------------------------------------------------------------
# packed deployable artifacts


def save_packed(path, meta, sections, tensors):
    """sections: {layer_name: PackedWeights}; tensors: FP32 remainder."""
    w = _Writer()
    w.raw(PACK_MAGIC)
    w.pack("<I", VERSION)
    _write_meta(w, meta)
    w.pack("<I", len(sections))
    for name in sorted(sections):
        pw = sections[name]
        w.name(name)
        w.pack("<II4H", SECTION_MAGIC, pw.bits, *pw.shape)
        w.raw(pw.scales.astype(np.float32).tobytes())
        w.raw(pw.packed.tobytes())
    w.pack("<I", len(tensors))
    for name in sorted(tensors):
        w.tensor(name, tensors[name])
    w.finish(path)


def load_packed(path):
    r = _Reader(path, PACK_MAGIC)
    meta = _read_meta(r)
    (n_sections,) = r.unpack("<I")
    sections = {}
    for _ in range(n_sections):
        name = r.name()
        magic, bits, o, i, kh, kw = r.unpack("<II4H")
        if magic != SECTION_MAGIC:
            raise CheckpointError(f"{path}: bad packed-section magic for {name}")
        scales = np.frombuffer(r.raw(4 * o), dtype=np.float32).copy()
        payload = np.frombuffer(
            r.raw(packed_nbytes(o * i * kh * kw, bits)), dtype=np.uint8
        ).copy()
        sections[name] = PackedWeights(
            bits=bits, shape=(o, i, kh, kw), packed=payload, scales=scales
        )
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        name, arr = r.tensor()
        tensors[name] = arr
    return meta, sections, tensors
