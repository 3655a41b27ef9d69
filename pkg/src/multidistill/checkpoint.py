"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MVKD" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | ndim u8 | dims u32 * ndim | f32 payload
    CRC32 u32 of every preceding byte

Scalars that are not tensors (step counter, config fingerprint, optimizer
kind) travel as zero-length entries whose name is ``meta/<key>=<value>``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MVKD"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class CorruptError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int = 0
    fingerprint: str = ""
    optimizer: str = "adam"
    optimizer_step: int = 0
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            (self.step, self.fingerprint, self.optimizer, self.optimizer_step)
            == (other.step, other.fingerprint, other.optimizer, other.optimizer_step)
            and _same_arrays(self.params, other.params)
            and _same_arrays(self.optimizer_state, other.optimizer_state)
        )


def _same_arrays(a: dict, b: dict) -> bool:
    if list(a) != list(b):
        return False
    for k in a:
        x = np.asarray(a[k], dtype="<f4")
        y = np.asarray(b[k], dtype="<f4")
        if x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    return True


def _entry(name: str, arr: np.ndarray | None) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"entry name too long: {name[:40]}...")
    if arr is None:
        return struct.pack("<H", len(raw)) + raw + struct.pack("<BI", 1, 0)
    # asarray, not ascontiguousarray: the latter turns 0-d scalars into shape (1,)
    a = np.asarray(arr, dtype="<f4")
    if a.ndim > 255:
        raise CheckpointError(f"{name}: too many dimensions")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def encode(ckpt: Checkpoint) -> bytes:
    entries = [
        _entry(f"meta/step={ckpt.step}", None),
        _entry(f"meta/fingerprint={ckpt.fingerprint}", None),
        _entry(f"meta/optimizer={ckpt.optimizer}", None),
        _entry(f"meta/optimizer_step={ckpt.optimizer_step}", None),
    ]
    entries += [_entry(f"param/{k}", v) for k, v in ckpt.params.items()]
    entries += [_entry(f"opt/{k}", v) for k, v in ckpt.optimizer_state.items()]
    body = MAGIC + struct.pack("<II", VERSION, len(entries)) + b"".join(entries)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file ends inside {what} at byte {self.pos} (need {n}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 4:
        raise TruncatedError("file shorter than the magic bytes")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    (count,) = r.unpack("<I", "entry count")
    ckpt = Checkpoint(params={})
    for i in range(count):
        (nlen,) = r.unpack("<H", f"entry {i} name length")
        name = r.take(nlen, f"entry {i} name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} ndim")
        dims = r.unpack(f"<{ndim}I", f"{name} dims")
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = r.take(4 * size, f"{name} payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        _store(ckpt, name, arr)
    tail = r.take(4, "CRC32")
    (crc,) = struct.unpack("<I", tail)
    if r.pos != len(buf):
        raise CorruptError(f"{len(buf) - r.pos} trailing bytes after CRC")
    if zlib.crc32(buf[: r.pos - 4]) != crc:
        raise CorruptError("CRC32 mismatch")
    return ckpt


def _store(ckpt: Checkpoint, name: str, arr: np.ndarray) -> None:
    if name.startswith("meta/"):
        key, _, value = name[5:].partition("=")
        if key == "step":
            ckpt.step = int(value)
        elif key == "fingerprint":
            ckpt.fingerprint = value
        elif key == "optimizer":
            ckpt.optimizer = value
        elif key == "optimizer_step":
            ckpt.optimizer_step = int(value)
        else:
            raise CorruptError(f"unknown metadata entry {name!r}")
    elif name.startswith("param/"):
        ckpt.params[name[6:]] = arr
    elif name.startswith("opt/"):
        ckpt.optimizer_state[name[4:]] = arr
    else:
        raise CorruptError(f"unknown entry {name!r}")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(encode(ckpt))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {p}: {e.strerror or e}") from e


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    p = Path(path)
    try:
        buf = p.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {p}: {e.strerror or e}") from e
    ckpt = decode(buf)
    if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint:
        raise FingerprintMismatchError(
            f"checkpoint {p} has config fingerprint {ckpt.fingerprint}, current config has {expected_fingerprint}"
        )
    return ckpt
