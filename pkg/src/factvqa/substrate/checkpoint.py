"""Binary checkpoint files for parameter stores.

Layout (all integers little-endian):

    magic   "RVQC"
    u16     format version (currently 1)
    u32     config length, then that many bytes of canonical UTF-8 JSON
    repeated until end of file:
        u32     name length, then the UTF-8 parameter name
        u32     rank
        u32*rank dims
        f64*prod(dims) values

The JSON block carries the caller's config plus a "param_flags" map with
each parameter's regularizable/frozen flags. Saving is canonical (sorted
keys, compact separators), so save -> load -> save reproduces the file
byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .params import ParameterStore

MAGIC = b"RVQC"
VERSION = 1


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def save_checkpoint(path: str | Path, store: ParameterStore, config: dict):
    config = dict(config)
    config["param_flags"] = {
        name: {"regularizable": store.regularizable[name], "frozen": store.frozen[name]}
        for name in store.values
    }
    blob = canonical_json(config)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += struct.pack("<I", len(blob))
    out += blob
    for name, value in store.values.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<I", value.ndim)
        out += struct.pack(f"<{value.ndim}I", *value.shape)
        out += value.astype("<f8").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes", offset=self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict]:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}", offset=0)
    version = r.u16()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    try:
        config = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config block: {exc}", offset=10) from exc
    flags = config.get("param_flags", {})
    store = ParameterStore()
    while r.pos < len(buf):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = 1
        for d in dims:
            count *= d
        values = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).copy()
        entry = flags.get(name, {})
        store.add(name, values,
                  regularizable=bool(entry.get("regularizable", True)),
                  frozen=bool(entry.get("frozen", False)))
    return store, config
