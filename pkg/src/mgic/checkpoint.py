"""Binary checkpoints.

Layout (all integers unsigned 32-bit little-endian)::

    b"MGIC" | version | len(arch) | arch JSON (UTF-8)
    | n_params  | records...
    | n_buffers | records...
    | CRC-32 of every preceding byte

Each record is ``len(name) | name | rank | extents... | float32 LE data``.
"""

import json
import struct
import zlib
from collections import OrderedDict

import numpy as np

from .autograd import Tensor
from .errors import CorruptionError, FormatError, VersionError

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint", "read_checkpoint",
           "encode_checkpoint", "decode_checkpoint"]

MAGIC = b"MGIC"
VERSION = 1
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


def _pack_records(items):
    out = [_U32.pack(len(items))]
    for name, array in items:
        raw = name.encode("utf-8")
        arr = np.asarray(array.data if isinstance(array, Tensor) else array)
        out.append(_U32.pack(len(raw)))
        out.append(raw)
        out.append(_U32.pack(arr.ndim))
        out.extend(_U32.pack(n) for n in arr.shape)
        out.append(arr.astype(_F32).tobytes())
    return b"".join(out)


def encode_checkpoint(arch, params, buffers):
    """Serialize an architecture dict plus ordered (name, array) pairs."""
    blob = json.dumps(arch, sort_keys=True).encode("utf-8")
    body = b"".join([
        MAGIC,
        _U32.pack(VERSION),
        _U32.pack(len(blob)),
        blob,
        _pack_records(list(params)),
        _pack_records(list(buffers)),
    ])
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptionError("unexpected end of checkpoint", offset=self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def records(self):
        out = OrderedDict()
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            shape = tuple(self.u32() for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * count), dtype=_F32).reshape(shape).copy()
        return out


def decode_checkpoint(buf):
    """Return (arch, params, buffers) after verifying magic, checksum, version."""
    if len(buf) < 16:
        raise CorruptionError("checkpoint too short", offset=len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", offset=0)
    body, stored = buf[:-4], _U32.unpack(buf[-4:])[0]
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if stored != actual:
        raise CorruptionError(
            f"checksum mismatch: stored {stored:08x}, computed {actual:08x}", offset=len(body)
        )
    reader = _Reader(body)
    reader.take(4)
    version = reader.u32()
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}", offset=4)
    arch = json.loads(reader.take(reader.u32()).decode("utf-8"))
    params = reader.records()
    buffers = reader.records()
    if reader.pos != len(body):
        raise CorruptionError("trailing bytes before checksum", offset=reader.pos)
    return arch, params, buffers


def save_checkpoint(model, path):
    """Write ``model`` (built by :func:`mgic.models.build_model`) to ``path``."""
    arch = getattr(model, "arch", None)
    if arch is None:
        raise FormatError("model has no architecture description; build it with build_model")
    data = encode_checkpoint(arch, model.named_parameters(), model.named_buffers())
    with open(path, "wb") as fh:
        fh.write(data)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def load_checkpoint(path):
    """Re-create the model stored at ``path`` with its exact weights and buffers."""
    from .models import build_model

    arch, params, buffers = read_checkpoint(path)
    model = build_model(arch, rng=np.random.default_rng(0), dtype=np.float32)
    state = OrderedDict(params)
    state.update(buffers)
    model.load_state_dict(state)
    return model
