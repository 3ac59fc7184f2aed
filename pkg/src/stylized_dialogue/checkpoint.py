"""Binary checkpoint files.

Layout (little-endian)::

    b"SDG1" | u32 version | u32 crc32(payload) | u64 len(payload) | payload

The payload is a sequence of sections ``u16 name_len | name | u64 len | body``.
Text sections (``config``, ``vocab``, ``meta``, ``rng``) are UTF-8; array
sections (``params``, ``optimizer``, ``loop``) hold named arrays as
``u16 name_len | name | u8 dtype | u8 ndim | u32 dims... | raw data``.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import dump_kv, parse_kv

MAGIC = b"SDG1"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1}


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


@dataclass
class Checkpoint:
    config: dict[str, str]
    vocab: list[str]
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)
    rng: dict[str, str] = field(default_factory=dict)
    loop: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", _CODES[np.dtype(arr.dtype.name)], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def _unpack_arrays(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    (count,) = struct.unpack_from("<I", view, 0)
    pos = 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", view, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        out[name] = np.frombuffer(view[pos : pos + n * 8], dtype=dtype).reshape(shape).copy()
        pos += n * 8
    if pos != len(data):
        raise CheckpointError("trailing bytes in array section")
    return out


def _section(name: str, body: bytes) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(body)) + body


def to_bytes(ckpt: Checkpoint) -> bytes:
    payload = b"".join(
        [
            _section("config", dump_kv(ckpt.config).encode("utf-8")),
            _section("vocab", "\n".join(ckpt.vocab).encode("utf-8")),
            _section("meta", dump_kv(ckpt.meta).encode("utf-8")),
            _section("rng", dump_kv(ckpt.rng).encode("utf-8")),
            _section("params", _pack_arrays(ckpt.params)),
            _section("optimizer", _pack_arrays(ckpt.optimizer)),
            _section("loop", _pack_arrays(ckpt.loop)),
        ]
    )
    header = MAGIC + struct.pack("<IIQ", ckpt.version, zlib.crc32(payload), len(payload))
    return header + payload


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 20 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, crc, length = struct.unpack_from("<IIQ", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    payload = data[20:]
    if len(payload) != length:
        raise CheckpointError(f"truncated checkpoint: {len(payload)} of {length} payload bytes")
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    sections: dict[str, bytes] = {}
    pos = 0
    while pos < len(payload):
        (nlen,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        name = payload[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (blen,) = struct.unpack_from("<Q", payload, pos)
        pos += 8
        sections[name] = payload[pos : pos + blen]
        pos += blen
    try:
        vocab_text = sections["vocab"].decode("utf-8")
        return Checkpoint(
            config=parse_kv(sections["config"].decode("utf-8")),
            vocab=vocab_text.split("\n") if vocab_text else [],
            meta=parse_kv(sections["meta"].decode("utf-8")),
            rng=parse_kv(sections["rng"].decode("utf-8")),
            params=_unpack_arrays(sections["params"]),
            optimizer=_unpack_arrays(sections["optimizer"]),
            loop=_unpack_arrays(sections["loop"]),
            version=version,
        )
    except KeyError as exc:
        raise CheckpointError(f"missing section {exc}") from None


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
