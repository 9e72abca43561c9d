"""Binary session checkpoints.

Layout, all integers big-endian:

    offset  size  field
    0       4     magic "CLPK"
    4       2     format version (u16)
    6       32    sha256 of the scenario's canonical serialization
    38      8     event sequence number (u64)
    46      4     payload length (u32)
    50      n     payload: canonical JSON of the session state
    50+n    4     CRC32 of everything before this field (u32)

A checkpoint restores only against the exact scenario document it was
written from; the embedded hash makes a mismatch a loud error instead of
a subtly corrupted session.
"""

from __future__ import annotations

import os
import struct
import zlib
from typing import Any

from .engine import SessionState, bind_scenario
from .protocol import canonical_json
from .scenario import Scenario, content_hash

MAGIC = b"CLPK"
CHECKPOINT_VERSION = 1

_HEADER = struct.Struct(">4sH32sQI")


class CheckpointError(Exception):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class HashMismatch(CheckpointError):
    """Checkpoint was written from a different scenario document."""


def write_checkpoint(state: SessionState) -> bytes:
    payload = canonical_json(state.to_dict()).encode("ascii")
    head = _HEADER.pack(
        MAGIC,
        CHECKPOINT_VERSION,
        bytes.fromhex(state.scenario_hash),
        state.event_seq,
        len(payload),
    )
    body = head + payload
    return body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)


def read_header(data: bytes) -> dict[str, Any]:
    """Parse and verify the envelope without decoding the payload."""
    if len(data) < _HEADER.size + 4:
        raise TruncatedCheckpoint(f"{len(data)} bytes is too short for a checkpoint")
    magic, version, scenario_hash, event_seq, payload_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    expected = _HEADER.size + payload_len + 4
    if len(data) != expected:
        raise TruncatedCheckpoint(f"expected {expected} bytes, got {len(data)}")
    (stored_crc,) = struct.unpack_from(">I", data, _HEADER.size + payload_len)
    actual_crc = zlib.crc32(data[: _HEADER.size + payload_len]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(f"crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    return {
        "version": version,
        "scenario_hash": scenario_hash.hex(),
        "event_seq": event_seq,
        "payload_len": payload_len,
    }


def restore_checkpoint(data: bytes, scenario: Scenario) -> SessionState:
    """Decode a checkpoint and rebind it to its scenario.

    Raises HashMismatch when the scenario is not the one the checkpoint
    was written from, and ChecksumError/TruncatedCheckpoint/VersionError/
    BadMagic for damaged or foreign files.
    """
    import json

    header = read_header(data)
    if header["scenario_hash"] != content_hash(scenario).hex():
        raise HashMismatch(
            f"checkpoint was written from scenario hash {header['scenario_hash'][:12]}..., "
            f"given scenario hashes to {content_hash(scenario).hex()[:12]}..."
        )
    payload = data[_HEADER.size : _HEADER.size + header["payload_len"]]
    state = SessionState.from_dict(json.loads(payload.decode("ascii")))
    bind_scenario(state, scenario)
    return state


def save_checkpoint_file(path: str, state: SessionState) -> None:
    """Atomic durable write: temp file, fsync, rename."""
    data = write_checkpoint(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint_file(path: str, scenario: Scenario) -> SessionState:
    with open(path, "rb") as fh:
        return restore_checkpoint(fh.read(), scenario)
