from __future__ import annotations

import copy
import json
from importlib import resources

import pytest

from classplay.engine import (
    Broadcast,
    ChallengeScan,
    Effect,
    Event,
    FacilitatorCmd,
    Join,
    Proximity,
    PuzzleSubmit,
    ReadDone,
    RoleAck,
    Scan,
    SendTo,
    SessionState,
    TeacherShareDone,
)
from classplay.scenario import Scenario, discovery_plan, individual_plan, load_scenario
from classplay.simharness import SessionDriver


def _read_sample(name: str) -> str:
    return resources.files("classplay.scenarios").joinpath(name).read_text("utf-8")


@pytest.fixture(scope="session")
def sample_en_text() -> str:
    return _read_sample("sample_en.json")


@pytest.fixture(scope="session")
def sample_en(sample_en_text: str) -> Scenario:
    return load_scenario(sample_en_text)


@pytest.fixture(scope="session")
def sample_de() -> Scenario:
    return load_scenario(_read_sample("sample_de.json"))


@pytest.fixture
def sample_dict(sample_en_text: str) -> dict:
    """Fresh mutable copy of the shipped sample document."""
    return copy.deepcopy(json.loads(sample_en_text))


def sent(effects: list[Effect], to: str | None = None, type_: str | None = None) -> list[SendTo]:
    return [
        e
        for e in effects
        if isinstance(e, SendTo)
        and (to is None or e.to == to)
        and (type_ is None or e.type == type_)
    ]


def cast(effects: list[Effect], type_: str | None = None) -> list[Broadcast]:
    return [e for e in effects if isinstance(e, Broadcast) and (type_ is None or e.type == type_)]


class EngineHarness:
    """Step-by-step driver for engine tests.

    Plays the host and all clients at once: events go straight into a
    SessionDriver and helper methods walk whole phases using only state
    a host legitimately holds.
    """

    def __init__(self, scenario: Scenario, n_players: int = 6, seed: int = 0):
        self.scn = scenario
        self.driver = SessionDriver(scenario, "t-session", seed)
        self.n = n_players
        self.pids = [f"p{i + 1}" for i in range(n_players)]

    @property
    def state(self) -> SessionState:
        return self.driver.state

    def do(self, *events: Event) -> list[Effect]:
        out: list[Effect] = []
        for event in events:
            out.extend(self.driver.dispatch(event))
        return out

    # -- phase walkers -----------------------------------------------------

    def join_all(self) -> list[Effect]:
        out = self.do(Join("fac", "Faye", "facilitator"), Join("t1", "Ms. Keller", "teacher"))
        for i, pid in enumerate(self.pids):
            out.extend(self.do(Join(pid, f"Kid {i + 1}", "player")))
        return out

    def start(self, force: bool = False) -> list[Effect]:
        args = {"force": True} if force else {}
        return self.do(FacilitatorCmd("fac", "start", args))

    def do_roleplay(self) -> list[Effect]:
        out = self.do(RoleAck("t1", 0))
        for pid in self.pids:
            out.extend(self.do(RoleAck(pid, 1)))
        for pid in [p.player_id for p in self.state.connected_players()]:
            out.extend(self.do(RoleAck(pid, 2)))
        return out

    def confirm_notepads(self) -> list[Effect]:
        out: list[Effect] = []
        for p in list(self.state.connected_players()):
            out.extend(self.do(RoleAck(p.player_id, 0)))
        return out

    def run_discovery(self) -> list[Effect]:
        out: list[Effect] = []
        for p in list(self.state.connected_players()):
            plan = individual_plan(self.scn, p.track)
            while p.plan_index < len(plan):
                out.extend(self.do(Scan(p.player_id, plan[p.plan_index])))
        return out

    def confirm_pairs(self) -> list[Effect]:
        out: list[Effect] = []
        for unit in list(self.state.pair_units.values()):
            for pid in unit.receiver_ids:
                if self.state.players[pid].connected and pid not in unit.confirmed:
                    out.extend(self.do(Proximity(pid, unit.token)))
        return out

    def solve_pairs(self) -> list[Effect]:
        out: list[Effect] = []
        for unit in list(self.state.pair_units.values()):
            if not unit.code_accepted:
                entry = next(iter(self.scn.pair_code_table))
                out.extend(self.do(PuzzleSubmit(unit.sender_id, entry.code)))
            if not unit.unlock_done and unit.unlocks_marker is not None:
                for pid in unit.member_ids:
                    member = self.state.players[pid]
                    if not member.connected or member.track is None:
                        continue
                    plan = discovery_plan(self.scn, member.track)
                    if member.plan_index < len(plan) and plan[member.plan_index] == unit.unlocks_marker:
                        out.extend(self.do(Scan(pid, unit.unlocks_marker)))
                        break
        return out

    def confirm_groups(self) -> list[Effect]:
        out: list[Effect] = []
        for group in list(self.state.groups.values()):
            for pid in group.member_ids[1:]:
                if self.state.players[pid].connected and pid not in group.confirmed:
                    out.extend(self.do(Proximity(pid, group.token)))
        return out

    def solve_groups(self) -> list[Effect]:
        out: list[Effect] = []
        tasks = {t.task_id: t for t in self.scn.group_tasks}
        for group in list(self.state.groups.values()):
            if not group.solved:
                out.extend(self.do(PuzzleSubmit(group.anchor_id, tasks[group.task_id].answer_code)))
        return out

    def run_share(self) -> list[Effect]:
        out: list[Effect] = []
        for gid in sorted(self.state.groups):
            if gid not in self.state.share_visited:
                out.extend(self.do(TeacherShareDone("t1", gid)))
        return out

    def run_challenge(self) -> list[Effect]:
        out: list[Effect] = []
        for marker in self.scn.markers:
            if self.state.phase != "TimedChallenge":
                break
            out.extend(self.do(ChallengeScan(self.pids[0], marker.marker_id)))
        return out

    def run_diary(self) -> list[Effect]:
        out: list[Effect] = []
        total = sum(len(self.state.players[pid].pages) for pid in self.state.join_order)
        while self.state.read_cursor < total:
            order = self.state.read_cursor
            holder = next(
                pid for pid in self.state.join_order if order in self.state.players[pid].pages
            )
            out.extend(self.do(ReadDone(holder, order)))
        return out

    _STEPS = (
        ("Lobby", "join_all"),
        ("Lobby", "start"),
        ("RegisterRoleplay", "do_roleplay"),
        ("NotepadDiscovery", "confirm_notepads"),
        ("IndividualDiscovery", "run_discovery"),
        ("PairFormation", "confirm_pairs"),
        ("PairPuzzle", "solve_pairs"),
        ("GroupFormation", "confirm_groups"),
        ("GroupPuzzle", "solve_groups"),
        ("TeacherShare", "run_share"),
        ("TimedChallenge", "run_challenge"),
        ("DiaryCircle", "run_diary"),
    )

    def to_phase(self, target: str) -> EngineHarness:
        """Play forward until the session sits in the target phase."""
        for phase, step in self._STEPS:
            if self.state.phase == target:
                return self
            if self.state.phase == phase:
                getattr(self, step)()
        if self.state.phase == "Discussion" and target == "Ended":
            self.do(FacilitatorCmd("fac", "skip_phase"))
        assert self.state.phase == target, f"stuck in {self.state.phase} before {target}"
        return self


@pytest.fixture
def harness(sample_en: Scenario):
    def make(n_players: int = 6, seed: int = 0) -> EngineHarness:
        return EngineHarness(sample_en, n_players=n_players, seed=seed)

    return make


# ---------------------------------------------------------------------------
# Network helpers shared by the server and acceptance tests


async def admin_request(
    port: int, method: str, path: str, body: dict | None = None
) -> tuple[int, dict]:
    """One-shot JSON request against the admin API."""
    import asyncio

    reader, writer = await asyncio.open_connection("127.0.0.1", port)
    data = b"" if body is None else json.dumps(body).encode("utf-8")
    writer.write(
        f"{method} {path} HTTP/1.1\r\nHost: t\r\nContent-Length: {len(data)}\r\n\r\n".encode()
        + data
    )
    await writer.drain()
    raw = await reader.read()
    writer.close()
    head, _, payload = raw.partition(b"\r\n\r\n")
    status = int(head.split(b" ", 2)[1])
    return status, json.loads(payload)


class Wire:
    """One framed TCP client connection with its own seq counter."""

    def __init__(self, reader, writer):
        self.reader = reader
        self.writer = writer
        self.session = ""
        self.seq = 0

    @classmethod
    async def connect(cls, port: int) -> "Wire":
        import asyncio

        reader, writer = await asyncio.open_connection("127.0.0.1", port)
        return cls(reader, writer)

    async def send(self, type_: str, payload: dict, *, seq: int | None = None) -> None:
        from classplay.protocol import Frame, encode_frame

        if seq is None:
            self.seq += 1
            seq = self.seq
        self.writer.write(encode_frame(Frame(self.session, seq, type_, payload)))
        await self.writer.drain()

    async def recv(self, timeout: float = 2.0):
        import asyncio

        from classplay.protocol import decode_frame

        line = await asyncio.wait_for(self.reader.readline(), timeout)
        if not line:
            raise ConnectionError("server closed the connection")
        return decode_frame(line)

    async def recv_type(self, type_: str, timeout: float = 2.0):
        """Skip frames until one of the wanted type arrives."""
        while True:
            frame = await self.recv(timeout)
            if frame.type == type_:
                return frame

    async def hello(self, room: str, name: str):
        await self.send("hello", {"room": room, "name": name})
        frame = await self.recv_type("welcome")
        self.session = frame.session
        return frame

    async def fence(self) -> None:
        """Returns once the room has applied everything sent before it."""
        self.seq += 1
        await self.send("ping", {"t": self.seq}, seq=self.seq)
        while True:
            frame = await self.recv_type("pong")
            if frame.payload.get("t") == self.seq:
                return

    def close(self) -> None:
        self.writer.close()


def roster_from_events(events) -> list[dict]:
    """Rebuild the class list a recorded session joined with."""
    roster: list[dict] = []
    seen: set[str] = set()
    for event in events:
        if isinstance(event, Join) and event.player_id not in seen:
            seen.add(event.player_id)
            roster.append(
                {"player_id": event.player_id, "name": event.name, "role": event.role}
            )
    return roster


def explicit_script(events) -> list[Event]:
    """Strip auto-fired timer events; hosts regenerate those themselves."""
    from classplay.engine import TimerFired

    return [e for e in events if not isinstance(e, TimerFired)]


def reference_replay(
    scenario: Scenario, session_id: str, seed: int, script: list[Event]
) -> tuple[SessionDriver, list[int]]:
    """Replay a script in process; returns the driver and the event_seq
    expected after each step (auto-fired timers included)."""
    driver = SessionDriver(scenario, session_id, seed)
    expected: list[int] = []
    for event in script:
        driver.dispatch(event)
        expected.append(driver.state.event_seq)
    return driver, expected


async def replay_over_tcp(
    port: int,
    code: str,
    script: list[Event],
    expected_seq: list[int],
    facilitator_id: str,
) -> dict:
    """Feed a recorded script through real sockets, one event at a time.

    Every step waits until the room's event_seq reaches the value the
    in-process reference saw, which both serializes the steps and checks
    that the server generated exactly the same auto events.  Returns the
    room info document captured before the connections drop.
    """
    import asyncio
    import time

    from classplay.engine import (
        ChallengeScan,
        ClockAdvance,
        FacilitatorCmd,
        Join,
        Leave,
        Proximity,
        PuzzleSubmit,
        ReadDone,
        RoleAck,
        Scan,
        TeacherShareDone,
    )

    wires: dict[str, Wire] = {}

    async def wait_seq(target: int) -> None:
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            _, doc = await admin_request(port, "GET", f"/rooms/{code}")
            if doc["event_seq"] >= target:
                assert doc["event_seq"] == target, (
                    f"server ran ahead: {doc['event_seq']} > {target}"
                )
                return
            await asyncio.sleep(0.001)
        raise TimeoutError(f"event_seq stuck below {target}")

    for event, target in zip(script, expected_seq):
        if isinstance(event, Join):
            wire = await Wire.connect(port)
            wire.session = code
            wires[event.player_id] = wire
            await wire.send("hello", {"room": code, "name": event.name})
        elif isinstance(event, Leave):
            await wires[event.player_id].send("bye", {})
        elif isinstance(event, ClockAdvance):
            await wires[facilitator_id].send(
                "cmd", {"action": "clock", "now_ms": event.now_ms}
            )
        elif isinstance(event, FacilitatorCmd):
            await wires[event.actor_id].send(
                "cmd", {"action": event.action, "args": event.args}
            )
        elif isinstance(event, RoleAck):
            await wires[event.player_id].send(
                "role_ack", {"line_index": event.line_index}
            )
        elif isinstance(event, Scan):
            await wires[event.player_id].send("scan", {"marker_id": event.marker_id})
        elif isinstance(event, Proximity):
            await wires[event.player_id].send("proximity", {"token": event.token})
        elif isinstance(event, PuzzleSubmit):
            await wires[event.player_id].send("puzzle_submit", {"code": event.code})
        elif isinstance(event, TeacherShareDone):
            await wires[event.actor_id].send(
                "teacher_share_done", {"group_id": event.group_id}
            )
        elif isinstance(event, ChallengeScan):
            await wires[event.player_id].send(
                "challenge_scan", {"marker_id": event.marker_id}
            )
        elif isinstance(event, ReadDone):
            await wires[event.player_id].send("read_done", {"order": event.order})
        else:
            raise AssertionError(f"script has no wire mapping for {event!r}")
        await wait_seq(target)

    _, doc = await admin_request(port, "GET", f"/rooms/{code}")
    for wire in wires.values():
        wire.close()
    return doc
