"""Little-endian container shared by the checkpoint formats.

Layout: 4-byte magic, ``u32`` version, ``u32`` byte length of a UTF-8
``key=value`` block (one pair per line), then raw ``f32`` arrays back to
back. Array shapes are never stored; the reader derives them from the
config so a truncated or mismatched file is detected by length.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

VERSION = 1


def encode_config(config: dict) -> bytes:
    lines = []
    for key, value in config.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise FormatError(f"config entry {key!r} cannot be serialized")
        lines.append(f"{key}={text}")
    return "\n".join(lines).encode("utf-8")


def decode_config(raw: bytes) -> dict:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"config block is not UTF-8 at byte {exc.start}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"config line {n} has no '=': {line!r}")
        out[key.strip()] = value.strip()
    return out


def write_container(path, magic: bytes, config: dict, arrays) -> None:
    block = encode_config(config)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", VERSION, len(block)))
        fh.write(block)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_container(path, magic: bytes, shapes_for) -> tuple:
    """Return ``(config, arrays)``; ``shapes_for(config)`` lists the array shapes."""
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte 0, expected {magic!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4, expected {VERSION}")
    if 12 + n > len(raw):
        raise FormatError(f"{path}: config block runs past end of file (byte {len(raw)})")
    config = decode_config(raw[12:12 + n])
    pos = 12 + n
    arrays = []
    for shape in shapes_for(config):
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: parameter data truncated at byte {len(raw)}, needed {end}")
        arrays.append(np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).copy())
        pos = end
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after parameters at byte {pos}")
    return config, arrays
