"""Wire protocol: LF-delimited JSON frames, envelopes, and pairing tokens.

Every frame is one line: a UTF-8 JSON object terminated by a single LF.
The envelope is versioned and carries a session id, a sequence number, a
type tag, and a payload object.  Framing is self-synchronizing: a corrupt
or oversized line is dropped and decoding resumes at the next LF, so one
bad client write can never wedge a connection.

Serialization is canonical (sorted keys, compact separators, ASCII-only
escapes) which makes encoded frames byte-stable across processes and
suitable for hashing in transcripts.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Any

PROTOCOL_VERSION = 1

# Glyphs chosen to survive being read aloud across a classroom: no 0/O,
# 1/I/L, 2/Z, 5/S, 8/B, G/6 or Q/O confusions.
TOKEN_ALPHABET = "ACDEFHJKLMNPRTUVWXY34679"
TOKEN_LENGTH = 4

MAX_FRAME_BYTES = 64 * 1024

# Client to server frame types.
C2S_TYPES = frozenset(
    {
        "hello",
        "bye",
        "cmd",
        "role_ack",
        "scan",
        "proximity",
        "puzzle_submit",
        "teacher_share_done",
        "challenge_scan",
        "read_done",
        "ping",
    }
)

# Server to client frame types.
S2C_TYPES = frozenset(
    {
        "welcome",
        "roster",
        "phase_change",
        "role_prompt",
        "notepad",
        "discovery",
        "pair_assign",
        "pair_confirmed",
        "puzzle_task",
        "puzzle_result",
        "group_assign",
        "group_confirmed",
        "teacher_share",
        "share_progress",
        "challenge_start",
        "challenge_progress",
        "challenge_result",
        "diary_page",
        "read_turn",
        "discussion_prompts",
        "hint",
        "error",
        "session_ended",
        "checkpoint_saved",
        "pong",
    }
)

# Stable error codes carried by error frames.
ERROR_CODES = frozenset(
    {
        "bad_frame",
        "bad_version",
        "bad_seq",
        "not_joined",
        "no_such_room",
        "unknown_identity",
        "superseded",
        "no_such_checkpoint",
        "room_full",
        "wrong_phase",
        "wrong_marker",
        "unknown_marker",
        "stale_token",
        "wrong_partner",
        "bad_code",
        "not_your_turn",
        "not_allowed",
        "duplicate",
        "paused",
    }
)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=True, separators=(",", ":"))


@dataclass(frozen=True)
class Frame:
    session: str
    seq: int
    type: str
    payload: dict[str, Any]
    v: int = PROTOCOL_VERSION

    def to_dict(self) -> dict[str, Any]:
        return {
            "v": self.v,
            "session": self.session,
            "seq": self.seq,
            "type": self.type,
            "payload": self.payload,
        }


class BadFrame(Exception):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


def encode_frame(frame: Frame) -> bytes:
    """One canonical line, LF-terminated."""
    return canonical_json(frame.to_dict()).encode("ascii") + b"\n"


def decode_frame(line: bytes) -> Frame:
    """Parse a single line (without requiring the trailing LF).

    Raises BadFrame with a machine-readable reason on any malformation;
    never raises anything else for arbitrary byte input.
    """
    if len(line) > MAX_FRAME_BYTES:
        raise BadFrame("oversize")
    try:
        doc = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise BadFrame("not_json") from None
    if not isinstance(doc, dict):
        raise BadFrame("not_object")
    for key in ("v", "session", "seq", "type", "payload"):
        if key not in doc:
            raise BadFrame(f"missing_{key}")
    if not isinstance(doc["v"], int) or isinstance(doc["v"], bool):
        raise BadFrame("bad_version")
    if doc["v"] != PROTOCOL_VERSION:
        raise BadFrame("bad_version")
    if not isinstance(doc["session"], str):
        raise BadFrame("bad_session")
    if not isinstance(doc["seq"], int) or isinstance(doc["seq"], bool) or doc["seq"] < 0:
        raise BadFrame("bad_seq")
    if not isinstance(doc["type"], str):
        raise BadFrame("bad_type")
    if not isinstance(doc["payload"], dict):
        raise BadFrame("bad_payload")
    return Frame(
        session=doc["session"],
        seq=doc["seq"],
        type=doc["type"],
        payload=doc["payload"],
        v=doc["v"],
    )


@dataclass
class FrameDecoder:
    """Incremental decoder over an arbitrary byte stream.

    feed() returns the frames completed by the new bytes.  Lines that fail
    to decode are counted and skipped; an overlong run without any LF
    drops the buffered prefix once the next LF arrives, so the stream
    re-synchronizes on line boundaries no matter what came before.
    """

    buffer: bytearray = field(default_factory=bytearray)
    dropped: int = 0
    last_error: str | None = None
    _discarding: bool = False

    def feed(self, data: bytes) -> list[Frame]:
        frames: list[Frame] = []
        self.buffer.extend(data)
        while True:
            nl = self.buffer.find(b"\n")
            if nl < 0:
                if len(self.buffer) > MAX_FRAME_BYTES:
                    self.buffer.clear()
                    self._discarding = True
                    self.dropped += 1
                    self.last_error = "oversize"
                return frames
            line = bytes(self.buffer[:nl])
            del self.buffer[: nl + 1]
            if self._discarding:
                # Tail of an oversized line already counted as dropped.
                self._discarding = False
                continue
            if not line.strip():
                continue
            try:
                frames.append(decode_frame(line))
            except BadFrame as exc:
                self.dropped += 1
                self.last_error = exc.reason


def mint_token(rng: random.Random) -> str:
    """Draw a fresh 4-glyph pairing token from the given stream."""
    return "".join(rng.choice(TOKEN_ALPHABET) for _ in range(TOKEN_LENGTH))


def normalize_token(raw: str) -> str:
    """Uppercase and strip separators a child might type ("ab-cd" -> "ABCD")."""
    return "".join(ch for ch in raw.upper() if ch not in " -_.")


def is_valid_token(token: str) -> bool:
    return len(token) == TOKEN_LENGTH and all(ch in TOKEN_ALPHABET for ch in token)
