"""Binary serialization for parameter stores and training checkpoints.

Parameter payload layout (little-endian):

    magic   4 bytes  b"FPDM"
    u32     format version (currently 1)
    u32     parameter count
    per parameter:
        u16     name length, then UTF-8 name bytes
        u8      rank
        u32[r]  extents
        f32[n]  row-major data

A training checkpoint appends an extension section:

    magic   4 bytes  b"FPDX"
    u32     extension version (currently 1)
    u64     training step count
    u64     optimizer step count
    u16     config hash length, then UTF-8 hash
    u32     config JSON length, then UTF-8 text (may be empty)
    u32     moment entry count
    per entry: name (u16 + bytes), then first and second moment arrays,
    each as u8 rank + u32 extents + f32 data.

Round trips are bit-exact: save -> load -> save reproduces the file bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import UsageError
from .params import ParamStore

MAGIC = b"FPDM"
EXT_MAGIC = b"FPDX"
FORMAT_VERSION = 1
EXT_VERSION = 1


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise UsageError(f"parameter name too long: {name[:32]!r}...")
    return struct.pack("<H", len(raw)) + raw


def _pack_array(arr: np.ndarray) -> bytes:
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    if arr32.ndim > 0xFF:
        raise UsageError(f"rank {arr32.ndim} exceeds format limit")
    head = struct.pack("<B", arr32.ndim)
    head += struct.pack(f"<{arr32.ndim}I", *arr32.shape)
    return head + arr32.tobytes()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise UsageError("truncated checkpoint payload")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def name(self) -> str:
        n = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def array(self) -> np.ndarray:
        rank = self.unpack("<B")
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank)) if rank else ()
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4")
        return np.ascontiguousarray(data.reshape(shape))

    def done(self) -> bool:
        return self.pos == len(self.blob)


def params_to_bytes(store: ParamStore) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(store))]
    for name, p in store.items():
        parts.append(_pack_name(name))
        parts.append(_pack_array(p.data))
    return b"".join(parts)


def params_from_bytes(blob: bytes) -> tuple[ParamStore, _Reader]:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise UsageError("not a parameter payload (bad magic)")
    version = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise UsageError(f"unsupported format version {version}")
    count = r.unpack("<I")
    store = ParamStore()
    for _ in range(count):
        name = r.name()
        store.create(name, r.array())
    return store, r


def save_params(store: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(store))


def load_params(path) -> ParamStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    store, reader = params_from_bytes(blob)
    if not reader.done():
        raise UsageError("trailing bytes after parameter payload")
    return store


def save_checkpoint(path, store: ParamStore, step: int, adam_step: int,
                    config_hash: str, config_json: str = "") -> None:
    """Write parameters plus optimizer state and run metadata."""
    parts = [params_to_bytes(store), EXT_MAGIC,
             struct.pack("<IQQ", EXT_VERSION, step, adam_step)]
    parts.append(_pack_name(config_hash))
    raw_cfg = config_json.encode("utf-8")
    parts.append(struct.pack("<I", len(raw_cfg)))
    parts.append(raw_cfg)
    parts.append(struct.pack("<I", len(store.moments)))
    for name in store.moments:
        m1, m2 = store.moments[name]
        parts.append(_pack_name(name))
        parts.append(_pack_array(m1))
        parts.append(_pack_array(m2))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[ParamStore, int, int, str, str]:
    """Read a checkpoint.

    Returns (store, step, adam_step, config_hash, config_json).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    store, r = params_from_bytes(blob)
    if r.done() or r.take(4) != EXT_MAGIC:
        raise UsageError("missing checkpoint extension section")
    version, step, adam_step = r.unpack("<IQQ")
    if version != EXT_VERSION:
        raise UsageError(f"unsupported checkpoint extension version {version}")
    config_hash = r.name()
    cfg_len = r.unpack("<I")
    config_json = r.take(cfg_len).decode("utf-8")
    count = r.unpack("<I")
    for _ in range(count):
        name = r.name()
        m1 = r.array()
        m2 = r.array()
        if name not in store:
            raise UsageError(f"moment entry for unknown parameter {name!r}")
        store.moments[name] = (m1, m2)
    if not r.done():
        raise UsageError("trailing bytes after checkpoint payload")
    return store, int(step), int(adam_step), config_hash, config_json
