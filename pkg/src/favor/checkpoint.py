"""Sectioned binary checkpoints.

Layout (little-endian)::

    magic  b"FAVORCKP"
    u32    version
    u32    section count
    per section:
        u16 name length, name (utf-8)
        u64 payload length
        payload

A tensor-list payload is ``u32 count`` followed by ``(u16 name length, name,
tensor dump)`` per tensor. The ``config`` section is raw UTF-8 JSON instead.
Each payload is parsed against its declared length, so truncation or
corruption inside a section is reported with the section name.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .tensor import TensorFormatError, read_tensor, write_tensor

MAGIC = b"FAVORCKP"
VERSION = 1
RAW_SECTIONS = ("config",)


class CheckpointError(ValueError):
    def __init__(self, message: str, section: str | None = None):
        super().__init__(message if section is None else f"section {section!r}: {message}")
        self.section = section


def _tensor_list_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    return buf.getvalue()


def _parse_tensor_list(payload: bytes, section: str) -> dict[str, np.ndarray]:
    fh = io.BytesIO(payload)
    try:
        (count,) = struct.unpack("<I", fh.read(4))
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            name = fh.read(n).decode()
            out[name] = read_tensor(fh)
    except (struct.error, TensorFormatError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt payload ({exc})", section) from exc
    if fh.tell() != len(payload):
        raise CheckpointError("payload length does not match its contents", section)
    return out


def write_checkpoint(path, sections: dict[str, dict[str, np.ndarray] | bytes]) -> None:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(sections)))
    for name, content in sections.items():
        payload = content if isinstance(content, bytes) else _tensor_list_bytes(content)
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    Path(path).write_bytes(out.getvalue())


def read_checkpoint(path, required=()) -> dict[str, dict[str, np.ndarray] | bytes]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    fh = io.BytesIO(data)
    fh.seek(len(MAGIC))
    try:
        version, count = struct.unpack("<II", fh.read(8))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    sections: dict = {}
    for _ in range(count):
        try:
            (n,) = struct.unpack("<H", fh.read(2))
            name = fh.read(n).decode()
            (length,) = struct.unpack("<Q", fh.read(8))
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: truncated section header") from exc
        payload = fh.read(length)
        if len(payload) != length:
            raise CheckpointError(f"declared {length} bytes, found {len(payload)}", name)
        sections[name] = payload if name in RAW_SECTIONS else _parse_tensor_list(payload, name)
    if fh.read(1):
        raise CheckpointError(f"{path}: trailing bytes after last section")
    for name in required:
        if name not in sections:
            raise CheckpointError("missing from checkpoint", name)
    return sections
