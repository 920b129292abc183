"""Shared binary container: one JSON header line + raw little-endian f32 payload.

Grid files, flow-map sample sets, and checkpoints all use this layout so a
file can be identified by reading a single line. Headers are serialized with
sorted keys and no whitespace, which keeps writes byte-deterministic.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from .errors import FormatError

Array = np.ndarray


def encode_header(header: dict[str, Any]) -> bytes:
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def write_payload_file(path: str, header: dict[str, Any], payload: Array) -> None:
    """Atomically write header line + f32 payload (write temp, rename)."""
    data = np.ascontiguousarray(payload, dtype="<f4")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_header(header))
        fh.write(data.tobytes())
    os.replace(tmp, path)


def read_payload_file(path: str, magic: str, version: int) -> tuple[dict[str, Any], Array]:
    """Read and validate a header line, return (header, f32 payload as float64)."""
    with open(path, "rb") as fh:
        line = fh.readline()
        if not line.endswith(b"\n"):
            raise FormatError(f"{path}: missing header line")
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: malformed header: {exc}") from exc
        if header.get("magic") != magic:
            raise FormatError(f"{path}: expected magic {magic!r}, got {header.get('magic')!r}")
        if header.get("version") != version:
            raise FormatError(
                f"{path}: unsupported version {header.get('version')!r} (expected {version})"
            )
        raw = fh.read()
    payload = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return header, payload


def expect_payload_size(path: str, payload: Array, count: int) -> Array:
    if payload.size != count:
        raise FormatError(f"{path}: payload has {payload.size} floats, header declares {count}")
    return payload
