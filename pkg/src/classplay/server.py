"""Network host: rooms served over plain TCP lines, WebSocket and admin HTTP.

One listening socket carries all three kinds of traffic, told apart by
the first line a client sends.  HTTP requests go to the small admin API
(or upgrade to a WebSocket at /ws); anything else is treated as the
LF-framed wire protocol directly over TCP.  Both transports carry
byte-identical frames.

Every room funnels client frames into a single ordered queue feeding
the engine, so the session always observes a total order of events no
matter how many sockets are talking at once.  Outgoing frames are
stamped from one per-room sequence; client frame sequence numbers are
per sender and used only to suppress duplicates.

Rooms run on a wall clock by default: a ticker turns elapsed real time
into ClockAdvance events, which also fire due timers.  A room opened
with clock="scripted" has no ticker and moves time only through
facilitator clock commands, which makes a networked session exactly
reproducible, event for event, against an in-process run.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import itertools
import json
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .checkpoint import load_checkpoint_file, save_checkpoint_file
from .engine import (
    Broadcast,
    ChallengeScan,
    ClockAdvance,
    Effect,
    Event,
    FacilitatorCmd,
    Join,
    Leave,
    Proximity,
    PuzzleSubmit,
    ReadDone,
    RoleAck,
    Scan,
    SendTo,
    TeacherShareDone,
    WriteCheckpoint,
    resync_view,
)
from .protocol import TOKEN_ALPHABET, Frame, FrameDecoder, encode_frame
from .scenario import (
    DuplicateIdError,
    Scenario,
    ScenarioReferenceError,
    ScenarioSyntaxError,
    load_scenario,
    validate_scenario,
)
from .simharness import SessionDriver

JOIN_CODE_LENGTH = 6
ROLES = ("player", "teacher", "facilitator")

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class ServerError(Exception):
    pass


class ConfigError(ServerError):
    pass


class ScenarioInvalid(ServerError):
    def __init__(self, report) -> None:
        super().__init__("scenario failed validation")
        self.report = report


class RosterInvalid(ServerError):
    pass


class CapacityExceeded(ServerError):
    pass


class NoSuchRoom(ServerError):
    pass


class UnknownIdentity(ServerError):
    pass


class NoSuchCheckpoint(ServerError):
    pass


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8437
    checkpoint_dir: str | None = None
    stride: int = 50
    tick_ms: int = 250
    max_rooms: int = 16

    def __post_init__(self) -> None:
        if not 10 <= self.tick_ms <= 1000:
            raise ConfigError("tick_ms must be within 10..1000")
        if self.stride < 1:
            raise ConfigError("stride must be at least 1")
        if not 0 <= self.port <= 65535:
            raise ConfigError("port out of range")
        if self.max_rooms < 1:
            raise ConfigError("max_rooms must be at least 1")

    @classmethod
    def load(
        cls, path: str | None = None, env: dict[str, str] | None = None
    ) -> ServerConfig:
        """Config file first, then environment overrides."""
        env = os.environ if env is None else env
        doc: dict[str, Any] = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text("utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError("config must be a JSON object")
        known = {"host", "port", "checkpoint_dir", "stride", "tick_ms", "max_rooms"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        listen = env.get("CLASSPLAY_LISTEN")
        if listen:
            host, _, port = listen.rpartition(":")
            if not host or not port.isdigit():
                raise ConfigError("CLASSPLAY_LISTEN must look like host:port")
            doc["host"], doc["port"] = host, int(port)
        if env.get("CLASSPLAY_CHECKPOINT_DIR"):
            doc["checkpoint_dir"] = env["CLASSPLAY_CHECKPOINT_DIR"]
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Roster


@dataclass(frozen=True)
class RosterEntry:
    player_id: str
    name: str
    role: str = "player"


def parse_roster(entries: list[dict[str, Any]], scenario: Scenario) -> list[RosterEntry]:
    """Check a class list: unique names, known roles, legal player count."""
    roster: list[RosterEntry] = []
    seen_ids: set[str] = set()
    seen_names: set[str] = set()
    for i, raw in enumerate(entries):
        if not isinstance(raw, dict) or not str(raw.get("name", "")).strip():
            raise RosterInvalid(f"roster entry {i} needs a name")
        name = str(raw["name"]).strip()
        role = str(raw.get("role", "player"))
        if role not in ROLES:
            raise RosterInvalid(f"roster entry '{name}' has unknown role '{role}'")
        player_id = str(raw.get("player_id", "") or f"p{i + 1:02d}")
        if player_id in seen_ids:
            raise RosterInvalid(f"duplicate player_id '{player_id}'")
        if name.casefold() in seen_names:
            raise RosterInvalid(f"duplicate name '{name}'")
        seen_ids.add(player_id)
        seen_names.add(name.casefold())
        roster.append(RosterEntry(player_id, name, role))
    players = sum(1 for e in roster if e.role == "player")
    if not any(e.role == "facilitator" for e in roster):
        raise RosterInvalid("roster needs a facilitator")
    if not scenario.min_players <= players <= scenario.max_players:
        raise RosterInvalid(
            f"{players} players outside {scenario.min_players}..{scenario.max_players}"
        )
    return roster


# ---------------------------------------------------------------------------
# WebSocket plumbing (RFC 6455, server side, text frames only)


def ws_accept_value(key: str) -> str:
    digest = hashlib.sha1((key + WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def ws_encode(payload: bytes, opcode: int = 0x1) -> bytes:
    header = bytearray([0x80 | opcode])
    n = len(payload)
    if n < 126:
        header.append(n)
    elif n < 1 << 16:
        header.append(126)
        header.extend(n.to_bytes(2, "big"))
    else:
        header.append(127)
        header.extend(n.to_bytes(8, "big"))
    return bytes(header) + payload


class WSProtocolError(Exception):
    pass


@dataclass
class WSParser:
    """Incremental client-to-server frame parser; yields whole messages."""

    buffer: bytearray = field(default_factory=bytearray)
    _fragments: list[bytes] = field(default_factory=list)
    _fragment_opcode: int | None = None

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        self.buffer.extend(data)
        out: list[tuple[int, bytes]] = []
        while True:
            parsed = self._next_frame()
            if parsed is None:
                return out
            fin, opcode, payload = parsed
            if opcode >= 0x8:
                # Control frames may not be fragmented.
                if not fin:
                    raise WSProtocolError("fragmented control frame")
                out.append((opcode, payload))
            elif opcode in (0x1, 0x2):
                if self._fragments:
                    raise WSProtocolError("new message inside a fragment run")
                if fin:
                    out.append((opcode, payload))
                else:
                    self._fragment_opcode = opcode
                    self._fragments = [payload]
            elif opcode == 0x0:
                if not self._fragments:
                    raise WSProtocolError("continuation without a start")
                self._fragments.append(payload)
                if fin:
                    assembled = b"".join(self._fragments)
                    out.append((self._fragment_opcode or 0x1, assembled))
                    self._fragments = []
                    self._fragment_opcode = None
            else:
                raise WSProtocolError(f"unsupported opcode {opcode}")

    def _next_frame(self) -> tuple[bool, int, bytes] | None:
        buf = self.buffer
        if len(buf) < 2:
            return None
        fin = bool(buf[0] & 0x80)
        opcode = buf[0] & 0x0F
        masked = bool(buf[1] & 0x80)
        if not masked:
            raise WSProtocolError("client frames must be masked")
        length = buf[1] & 0x7F
        offset = 2
        if length == 126:
            if len(buf) < 4:
                return None
            length = int.from_bytes(buf[2:4], "big")
            offset = 4
        elif length == 127:
            if len(buf) < 10:
                return None
            length = int.from_bytes(buf[2:10], "big")
            offset = 10
        if len(buf) < offset + 4 + length:
            return None
        mask = buf[offset : offset + 4]
        start = offset + 4
        payload = bytes(b ^ mask[i % 4] for i, b in enumerate(buf[start : start + length]))
        del buf[: start + length]
        return fin, opcode, payload


# ---------------------------------------------------------------------------
# Connections


class Connection:
    _ids = itertools.count(1)

    def __init__(self, writer: asyncio.StreamWriter, kind: str) -> None:
        self.id = next(self._ids)
        self.writer = writer
        self.kind = kind  # "tcp" | "ws"
        self.room: Room | None = None
        self.player_id: str | None = None
        self.last_seq = -1
        self.decoder = FrameDecoder()
        self._dropped_seen = 0
        self.closing = False

    def send(self, type_: str, payload: dict[str, Any], *, session: str = "", seq: int = 0) -> None:
        if self.closing:
            return
        data = encode_frame(Frame(session=session, seq=seq, type=type_, payload=payload))
        if self.kind == "ws":
            data = ws_encode(data)
        try:
            self.writer.write(data)
        except (ConnectionError, RuntimeError):
            self.closing = True

    def close(self) -> None:
        self.closing = True
        try:
            self.writer.close()
        except (ConnectionError, RuntimeError):
            pass


# ---------------------------------------------------------------------------
# Rooms

_EVENT_BUILDERS: dict[str, Callable[[str, dict[str, Any]], Event]] = {
    "role_ack": lambda pid, p: RoleAck(pid, int(p.get("line_index", 0))),
    "scan": lambda pid, p: Scan(pid, str(p.get("marker_id", ""))),
    "proximity": lambda pid, p: Proximity(pid, str(p.get("token", ""))),
    "puzzle_submit": lambda pid, p: PuzzleSubmit(pid, str(p.get("code", ""))),
    "teacher_share_done": lambda pid, p: TeacherShareDone(pid, str(p.get("group_id", ""))),
    "challenge_scan": lambda pid, p: ChallengeScan(pid, str(p.get("marker_id", ""))),
    "read_done": lambda pid, p: ReadDone(pid, int(p.get("order", -1))),
}


class Room:
    """One hosted session: a driver, its connections and its checkpoints."""

    def __init__(
        self,
        code: str,
        scenario: Scenario,
        roster: list[RosterEntry],
        seed: int,
        *,
        stride: int,
        tick_ms: int,
        checkpoint_dir: Path | None,
        clock: str = "wall",
    ) -> None:
        self.code = code
        self.scenario = scenario
        self.roster = {entry.player_id: entry for entry in roster}
        self.roster_by_name = {entry.name.casefold(): entry for entry in roster}
        self.seed = seed
        self.stride = stride
        self.tick_ms = tick_ms
        self.clock = clock
        self.checkpoint_dir = checkpoint_dir
        self.created_at = time.time()
        self.driver = SessionDriver(scenario, code, seed)
        self.connections: dict[str, Connection] = {}
        self.queue: asyncio.Queue[tuple[str, Any]] = asyncio.Queue()
        self._out_seq = itertools.count(1)
        self._t0 = time.monotonic()
        self._last_ckpt_seq = -1
        self._tasks: list[asyncio.Task] = []
        if checkpoint_dir is not None:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
        self._write_checkpoint("open")

    def start_tasks(self) -> None:
        loop = asyncio.get_running_loop()
        self._tasks.append(loop.create_task(self._pump()))
        if self.clock == "wall":
            self._tasks.append(loop.create_task(self._ticker()))

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except asyncio.CancelledError:
                pass
        self._tasks.clear()
        for conn in list(self.connections.values()):
            conn.close()
        self.connections.clear()

    # -- delivery ----------------------------------------------------------

    def _send_to(self, player_id: str, type_: str, payload: dict[str, Any]) -> None:
        conn = self.connections.get(player_id)
        if conn is None:
            return
        conn.send(type_, payload, session=self.code, seq=next(self._out_seq))

    def _broadcast(self, type_: str, payload: dict[str, Any]) -> None:
        seq = next(self._out_seq)
        for conn in self.connections.values():
            conn.send(type_, payload, session=self.code, seq=seq)

    def _deliver(self, effects: list[Effect]) -> None:
        for eff in effects:
            if isinstance(eff, SendTo):
                self._send_to(eff.to, eff.type, eff.payload)
            elif isinstance(eff, Broadcast):
                self._broadcast(eff.type, eff.payload)
            elif isinstance(eff, WriteCheckpoint):
                self._write_checkpoint(eff.reason)
            # Timer effects need no action: fire times live in the session
            # state and the clock events drain whatever comes due.

    # -- checkpoints -------------------------------------------------------

    def _checkpoint_name(self) -> str:
        return f"{self.driver.state.event_seq:08d}-{self.driver.state.phase}.clpk"

    def _write_checkpoint(self, reason: str) -> None:
        if self.checkpoint_dir is None:
            return
        name = self._checkpoint_name()
        save_checkpoint_file(str(self.checkpoint_dir / name), self.driver.state)
        self._last_ckpt_seq = self.driver.state.event_seq
        for entry in self.roster.values():
            if entry.role == "facilitator":
                self._send_to(
                    entry.player_id,
                    "checkpoint_saved",
                    {"name": name, "reason": reason, "event_seq": self.driver.state.event_seq},
                )

    def checkpoints(self) -> list[str]:
        if self.checkpoint_dir is None:
            return []
        return sorted(p.name for p in self.checkpoint_dir.glob("*.clpk"))

    def _do_restore(self, name: str) -> str:
        """Swap the live state for a checkpoint and reconcile connections."""
        if self.checkpoint_dir is None:
            raise NoSuchCheckpoint("room keeps no checkpoints")
        available = self.checkpoints()
        if name in ("", "latest"):
            if not available:
                raise NoSuchCheckpoint("no checkpoints written yet")
            name = available[-1]
        elif name not in available:
            raise NoSuchCheckpoint(name)
        state = load_checkpoint_file(str(self.checkpoint_dir / name), self.scenario)
        self.driver = SessionDriver.resume(self.scenario, state)
        live = set(self.connections)
        snap = {pid for pid, p in state.players.items() if p.connected}
        for pid in sorted(snap - live):
            self._deliver(self.driver.dispatch(Leave(pid)))
        for pid in sorted(live - snap):
            entry = self.roster[pid]
            self._deliver(self.driver.dispatch(Join(pid, entry.name, entry.role)))
        for pid in sorted(live & snap):
            self._deliver(resync_view(self.driver.state, pid))
        return name

    # -- the ordered heart -------------------------------------------------

    def submit(self, item: tuple[str, Any]) -> None:
        self.queue.put_nowait(item)

    def _dispatch(self, event: Event) -> None:
        self._deliver(self.driver.dispatch(event))
        if self.driver.state.event_seq - self._last_ckpt_seq >= self.stride:
            self._write_checkpoint("stride")

    async def _pump(self) -> None:
        while True:
            kind, data = await self.queue.get()
            if kind == "event":
                self._dispatch(data)
            elif kind == "hello":
                pid = data
                player = self.driver.state.players.get(pid)
                if player is not None and player.connected:
                    self._deliver(resync_view(self.driver.state, pid))
                else:
                    entry = self.roster[pid]
                    self._dispatch(Join(pid, entry.name, entry.role))
            elif kind == "resync":
                self._deliver(resync_view(self.driver.state, data))
            elif kind == "pong":
                origin, payload = data
                origin.send("pong", payload, session=self.code, seq=next(self._out_seq))
            elif kind == "restore":
                name, origin = data
                try:
                    restored = self._do_restore(name)
                except NoSuchCheckpoint as exc:
                    if isinstance(origin, asyncio.Future):
                        if not origin.done():
                            origin.set_exception(exc)
                    elif isinstance(origin, Connection):
                        origin.send(
                            "error",
                            {"code": "no_such_checkpoint", "detail": str(exc)},
                            session=self.code,
                        )
                else:
                    if isinstance(origin, asyncio.Future) and not origin.done():
                        origin.set_result(restored)

    async def _ticker(self) -> None:
        while True:
            await asyncio.sleep(self.tick_ms / 1000)
            now_ms = int((time.monotonic() - self._t0) * 1000)
            self.submit(("event", ClockAdvance(now_ms)))

    # -- introspection -----------------------------------------------------

    def info(self) -> dict[str, Any]:
        state = self.driver.state
        return {
            "join_code": self.code,
            "scenario_id": state.scenario_id,
            "phase": state.phase,
            "paused": state.paused,
            "event_seq": state.event_seq,
            "now_ms": state.now_ms,
            "clock": self.clock,
            "roster_size": len(self.roster),
            "connected": sorted(self.connections),
            "checkpoints": len(self.checkpoints()),
            "created_at": self.created_at,
            "digest": self.driver.digest(),
        }


# ---------------------------------------------------------------------------
# Server


class ClassplayServer:
    def __init__(self, config: ServerConfig) -> None:
        self.config = config
        self.rooms: dict[str, Room] = {}
        self.port: int | None = None
        self._server: asyncio.base_events.Server | None = None
        self._rng = random.Random()

    # -- lifecycle ---------------------------------------------------------

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._handle, self.config.host, self.config.port
        )
        self.port = self._server.sockets[0].getsockname()[1]

    async def stop(self) -> None:
        for room in list(self.rooms.values()):
            await room.stop()
        self.rooms.clear()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    # -- rooms -------------------------------------------------------------

    def find_room(self, code: str) -> Room | None:
        """Codes are matched case-insensitively; kids type them by hand."""
        return self.rooms.get(code.strip().casefold())

    def _mint_code(self) -> str:
        while True:
            code = "".join(self._rng.choice(TOKEN_ALPHABET) for _ in range(JOIN_CODE_LENGTH))
            if code.casefold() not in self.rooms:
                return code

    def open_room(
        self,
        scenario_text: str,
        roster_entries: list[dict[str, Any]],
        seed: int,
        *,
        join_code: str | None = None,
        clock: str = "wall",
    ) -> Room:
        if len(self.rooms) >= self.config.max_rooms:
            raise CapacityExceeded(f"at most {self.config.max_rooms} rooms")
        if clock not in ("wall", "scripted"):
            raise ConfigError("clock must be wall or scripted")
        scenario = load_scenario(scenario_text)
        report = validate_scenario(scenario)
        if not report.ok:
            raise ScenarioInvalid(report)
        roster = parse_roster(roster_entries, scenario)
        code = join_code.strip() if join_code else self._mint_code()
        if not code:
            raise ConfigError("join code must not be empty")
        if code.casefold() in self.rooms:
            raise CapacityExceeded(f"join code {code} already in use")
        ckpt_dir = None
        if self.config.checkpoint_dir is not None:
            ckpt_dir = Path(self.config.checkpoint_dir) / code
        room = Room(
            code,
            scenario,
            roster,
            seed,
            stride=self.config.stride,
            tick_ms=self.config.tick_ms,
            checkpoint_dir=ckpt_dir,
            clock=clock,
        )
        room.start_tasks()
        self.rooms[code.casefold()] = room
        return room

    # -- frame handling (both transports) ----------------------------------

    def _handle_frame(self, conn: Connection, frame: Frame) -> None:
        if frame.seq <= conn.last_seq:
            return  # duplicate suppression, per-sender counter
        conn.last_seq = frame.seq
        if frame.type == "ping":
            # Bound pings ride the room queue, so a pong proves every
            # earlier frame from this client has been applied.
            if conn.room is not None:
                conn.room.submit(("pong", (conn, {"t": frame.payload.get("t")})))
            else:
                conn.send("pong", {"t": frame.payload.get("t")})
            return
        if frame.type == "hello":
            self._attach(conn, frame)
            return
        room = conn.room
        if room is None or conn.player_id is None:
            conn.send("error", {"code": "not_joined", "detail": "say hello first"})
            return
        if frame.session and frame.session != room.code:
            conn.send(
                "error",
                {"code": "bad_frame", "detail": "wrong session"},
                session=room.code,
            )
            return
        pid = conn.player_id
        if frame.type == "bye":
            self._detach(conn, notify=True)
            conn.close()
            return
        if frame.type == "cmd":
            self._handle_cmd(conn, room, pid, frame.payload)
            return
        builder = _EVENT_BUILDERS.get(frame.type)
        if builder is None:
            conn.send(
                "error",
                {"code": "bad_frame", "detail": f"unknown type '{frame.type}'"},
                session=room.code,
            )
            return
        try:
            event = builder(pid, frame.payload)
        except (TypeError, ValueError):
            conn.send(
                "error",
                {"code": "bad_frame", "detail": "bad payload"},
                session=room.code,
            )
            return
        room.submit(("event", event))

    def _handle_cmd(self, conn: Connection, room: Room, pid: str, payload: dict[str, Any]) -> None:
        action = str(payload.get("action", ""))
        entry = room.roster.get(pid)
        if action == "restore":
            if entry is None or entry.role != "facilitator":
                conn.send(
                    "error",
                    {"code": "not_allowed", "detail": "facilitator only"},
                    session=room.code,
                )
                return
            name = str(payload.get("checkpoint", "latest"))
            room.submit(("restore", (name, conn)))
            return
        if action == "clock":
            if entry is None or entry.role != "facilitator":
                conn.send(
                    "error",
                    {"code": "not_allowed", "detail": "facilitator only"},
                    session=room.code,
                )
                return
            if room.clock != "scripted":
                conn.send(
                    "error",
                    {"code": "not_allowed", "detail": "room runs on the wall clock"},
                    session=room.code,
                )
                return
            try:
                now_ms = int(payload.get("now_ms"))
            except (TypeError, ValueError):
                conn.send(
                    "error",
                    {"code": "bad_frame", "detail": "clock needs now_ms"},
                    session=room.code,
                )
                return
            room.submit(("event", ClockAdvance(now_ms)))
            return
        args = payload.get("args", {})
        if not isinstance(args, dict):
            args = {}
        room.submit(("event", FacilitatorCmd(pid, action, args)))

    def _attach(self, conn: Connection, frame: Frame) -> None:
        code = str(frame.payload.get("room", "")).strip()
        name = str(frame.payload.get("name", "")).strip()
        room = self.find_room(code)
        if room is None:
            conn.send("error", {"code": "no_such_room", "detail": code})
            return
        entry = room.roster_by_name.get(name.casefold())
        if entry is None:
            conn.send("error", {"code": "unknown_identity", "detail": name})
            return
        if conn.room is not None and conn.room is not room:
            conn.send("error", {"code": "bad_frame", "detail": "already in a room"})
            return
        old = room.connections.get(entry.player_id)
        if old is not None and old is not conn:
            old.send(
                "error",
                {"code": "superseded", "detail": "another device took over"},
                session=room.code,
            )
            old.room = None
            old.player_id = None
            old.close()
        conn.room = room
        conn.player_id = entry.player_id
        room.connections[entry.player_id] = conn
        room.submit(("hello", entry.player_id))

    def _detach(self, conn: Connection, *, notify: bool) -> None:
        room, pid = conn.room, conn.player_id
        conn.room = None
        conn.player_id = None
        if room is None or pid is None:
            return
        if room.connections.get(pid) is conn:
            del room.connections[pid]
            if notify:
                room.submit(("event", Leave(pid)))

    # -- transport: shared entry ------------------------------------------

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            first = await reader.readline()
        except (ConnectionError, asyncio.IncompleteReadError):
            writer.close()
            return
        if not first:
            writer.close()
            return
        head = first.decode("latin-1", "replace")
        if head.split(" ", 1)[0] in ("GET", "POST", "PUT", "DELETE", "HEAD", "OPTIONS"):
            await self._serve_http(reader, writer, head.rstrip("\r\n"))
            return
        await self._serve_tcp(reader, writer, first)

    # -- transport: plain TCP ----------------------------------------------

    async def _serve_tcp(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, first: bytes
    ) -> None:
        conn = Connection(writer, "tcp")
        try:
            self._feed(conn, first)
            while not conn.closing:
                data = await reader.read(4096)
                if not data:
                    break
                self._feed(conn, data)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self._detach(conn, notify=True)
            conn.close()

    def _feed(self, conn: Connection, data: bytes) -> None:
        for frame in conn.decoder.feed(data):
            self._handle_frame(conn, frame)
        if conn.decoder.dropped > conn._dropped_seen:
            conn._dropped_seen = conn.decoder.dropped
            reason = conn.decoder.last_error or "bad_frame"
            code = "bad_version" if reason == "bad_version" else "bad_frame"
            session = conn.room.code if conn.room else ""
            conn.send("error", {"code": code, "detail": reason}, session=session)

    # -- transport: WebSocket ----------------------------------------------

    async def _serve_ws(
        self,
        reader: asyncio.StreamReader,
        writer: asyncio.StreamWriter,
        headers: dict[str, str],
    ) -> None:
        key = headers.get("sec-websocket-key", "")
        if not key:
            writer.write(b"HTTP/1.1 400 Bad Request\r\nConnection: close\r\n\r\n")
            writer.close()
            return
        writer.write(
            b"HTTP/1.1 101 Switching Protocols\r\n"
            b"Upgrade: websocket\r\n"
            b"Connection: Upgrade\r\n"
            b"Sec-WebSocket-Accept: " + ws_accept_value(key).encode("ascii") + b"\r\n\r\n"
        )
        conn = Connection(writer, "ws")
        parser = WSParser()
        try:
            while not conn.closing:
                data = await reader.read(4096)
                if not data:
                    break
                for opcode, payload in parser.feed(data):
                    if opcode == 0x8:
                        try:
                            writer.write(ws_encode(payload[:2], opcode=0x8))
                        except (ConnectionError, RuntimeError):
                            pass
                        conn.closing = True
                        break
                    if opcode == 0x9:
                        writer.write(ws_encode(payload, opcode=0xA))
                        continue
                    if opcode == 0x1:
                        self._feed(conn, payload + b"\n")
        except (ConnectionError, WSProtocolError, asyncio.IncompleteReadError):
            pass
        finally:
            self._detach(conn, notify=True)
            conn.close()

    # -- transport: admin HTTP ---------------------------------------------

    async def _serve_http(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, request_line: str
    ) -> None:
        try:
            method, path, _ = request_line.split(" ", 2)
        except ValueError:
            writer.close()
            return
        headers: dict[str, str] = {}
        while True:
            line = await reader.readline()
            if line in (b"\r\n", b"\n", b""):
                break
            name, _, value = line.decode("latin-1").partition(":")
            headers[name.strip().lower()] = value.strip()
        if path == "/ws" and headers.get("upgrade", "").lower() == "websocket":
            await self._serve_ws(reader, writer, headers)
            return
        body = b""
        length = int(headers.get("content-length", "0") or 0)
        if length:
            body = await reader.readexactly(length)
        status, doc = await self._route_admin(method, path, body)
        payload = json.dumps(doc, indent=2).encode("utf-8") + b"\n"
        writer.write(
            f"HTTP/1.1 {status}\r\n"
            f"Content-Type: application/json\r\n"
            f"Content-Length: {len(payload)}\r\n"
            f"Connection: close\r\n\r\n".encode("ascii")
        )
        writer.write(payload)
        try:
            await writer.drain()
        except ConnectionError:
            pass
        writer.close()

    async def _route_admin(self, method: str, path: str, body: bytes) -> tuple[str, Any]:
        if method == "GET" and path == "/healthz":
            return "200 OK", {"ok": True, "rooms": len(self.rooms)}
        if method == "GET" and path == "/rooms":
            return "200 OK", {"rooms": [room.info() for room in self.rooms.values()]}
        if method == "POST" and path == "/rooms":
            return await self._admin_open_room(body)
        parts = [p for p in path.split("/") if p]
        if len(parts) >= 2 and parts[0] == "rooms":
            room = self.find_room(parts[1])
            if room is None:
                return "404 Not Found", {"error": "no_such_room"}
            if method == "GET" and len(parts) == 2:
                return "200 OK", room.info()
            if method == "GET" and len(parts) == 3 and parts[2] == "checkpoints":
                return "200 OK", {"checkpoints": room.checkpoints()}
            if method == "POST" and len(parts) == 3 and parts[2] == "restore":
                return await self._admin_restore(room, body)
        return "404 Not Found", {"error": "not_found"}

    async def _admin_open_room(self, body: bytes) -> tuple[str, Any]:
        try:
            doc = json.loads(body.decode("utf-8"))
            scenario = doc["scenario"]
            roster = doc["roster"]
            seed = int(doc.get("seed", 0))
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            return "400 Bad Request", {"error": "bad_request", "detail": str(exc)}
        if isinstance(scenario, dict):
            scenario = json.dumps(scenario)
        try:
            room = self.open_room(
                str(scenario),
                roster,
                seed,
                join_code=doc.get("join_code"),
                clock=doc.get("clock", "wall"),
            )
        except (ScenarioSyntaxError, ScenarioReferenceError, DuplicateIdError) as exc:
            return "400 Bad Request", {"error": "scenario_invalid", "detail": str(exc)}
        except ScenarioInvalid as exc:
            return "400 Bad Request", {
                "error": "scenario_invalid",
                "diagnostics": [
                    {"severity": d.severity, "code": d.code, "message": d.message}
                    for d in exc.report.diagnostics
                ],
            }
        except RosterInvalid as exc:
            return "400 Bad Request", {"error": "roster_invalid", "detail": str(exc)}
        except (CapacityExceeded, ConfigError) as exc:
            return "409 Conflict", {"error": "capacity", "detail": str(exc)}
        return "201 Created", {"join_code": room.code}

    async def _admin_restore(self, room: Room, body: bytes) -> tuple[str, Any]:
        name = "latest"
        if body:
            try:
                name = str(json.loads(body.decode("utf-8")).get("checkpoint", "latest"))
            except (ValueError, UnicodeDecodeError):
                return "400 Bad Request", {"error": "bad_request"}
        fut: asyncio.Future[str] = asyncio.get_running_loop().create_future()
        room.submit(("restore", (name, fut)))
        try:
            restored = await asyncio.wait_for(fut, timeout=10)
        except NoSuchCheckpoint as exc:
            return "404 Not Found", {"error": "no_such_checkpoint", "detail": str(exc)}
        except asyncio.TimeoutError:
            return "500 Internal Server Error", {"error": "timeout"}
        return "200 OK", {"restored": restored}


async def serve_forever(config: ServerConfig) -> None:
    """Run the listener until cancelled (the CLI entry point)."""
    server = ClassplayServer(config)
    await server.start()
    try:
        await asyncio.Event().wait()
    finally:
        await server.stop()
