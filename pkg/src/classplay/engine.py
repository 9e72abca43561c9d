"""Server-authoritative session engine.

The engine is a deterministic state machine over an event log.  A host
(network server or simulation harness) feeds it one event at a time;
handle_event mutates the session state in place and returns the effects
the host must perform: frames to deliver, timers to arm or cancel, and
checkpoint requests.  The engine never does I/O, never reads wall clocks,
and draws randomness only from streams derived from the session seed, so
replaying the same event log always yields the same states and effects.

Phases advance through barriers: a phase ends when every connected player
has met its obligation (or a facilitator skips, which force-completes the
obligations first so the session stays solvable).  Disconnected players
never block a barrier; reconnecting players are caught up from state.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .protocol import mint_token, normalize_token
from .scenario import (
    ArtifactDef,
    PairCodeEntry,
    Scenario,
    discovery_plan,
    gated_markers,
    individual_plan,
    matching_entries,
)

PHASES = (
    "Lobby",
    "RegisterRoleplay",
    "NotepadDiscovery",
    "IndividualDiscovery",
    "PairFormation",
    "PairPuzzle",
    "GroupFormation",
    "GroupPuzzle",
    "TeacherShare",
    "TimedChallenge",
    "DiaryCircle",
    "Discussion",
    "Ended",
)

GAMEPLAY_EVENTS = frozenset(
    {"role_ack", "scan", "proximity", "puzzle_submit", "teacher_share_done", "challenge_scan", "read_done"}
)

PUZZLE_NUDGE_ATTEMPTS = 3


def phase_index(phase: str) -> int:
    return PHASES.index(phase)


def next_phase(phase: str) -> str:
    return PHASES[min(phase_index(phase) + 1, len(PHASES) - 1)]


# ---------------------------------------------------------------------------
# Events


@dataclass(frozen=True)
class Join:
    player_id: str
    name: str
    role: str = "player"
    kind: str = field(default="join", init=False)


@dataclass(frozen=True)
class Leave:
    player_id: str
    kind: str = field(default="leave", init=False)


@dataclass(frozen=True)
class FacilitatorCmd:
    actor_id: str
    action: str
    args: dict = field(default_factory=dict)
    kind: str = field(default="cmd", init=False)


@dataclass(frozen=True)
class RoleAck:
    player_id: str
    line_index: int = 0
    kind: str = field(default="role_ack", init=False)


@dataclass(frozen=True)
class Scan:
    player_id: str
    marker_id: str
    kind: str = field(default="scan", init=False)


@dataclass(frozen=True)
class Proximity:
    player_id: str
    token: str
    kind: str = field(default="proximity", init=False)


@dataclass(frozen=True)
class PuzzleSubmit:
    player_id: str
    code: str
    kind: str = field(default="puzzle_submit", init=False)


@dataclass(frozen=True)
class TeacherShareDone:
    actor_id: str
    group_id: str
    kind: str = field(default="teacher_share_done", init=False)


@dataclass(frozen=True)
class ChallengeScan:
    player_id: str
    marker_id: str
    kind: str = field(default="challenge_scan", init=False)


@dataclass(frozen=True)
class ReadDone:
    player_id: str
    order: int
    kind: str = field(default="read_done", init=False)


@dataclass(frozen=True)
class TimerFired:
    timer_id: str
    kind: str = field(default="timer_fired", init=False)


@dataclass(frozen=True)
class ClockAdvance:
    now_ms: int
    kind: str = field(default="clock", init=False)


Event = (
    Join
    | Leave
    | FacilitatorCmd
    | RoleAck
    | Scan
    | Proximity
    | PuzzleSubmit
    | TeacherShareDone
    | ChallengeScan
    | ReadDone
    | TimerFired
    | ClockAdvance
)

_EVENT_TYPES: dict[str, type] = {
    "join": Join,
    "leave": Leave,
    "cmd": FacilitatorCmd,
    "role_ack": RoleAck,
    "scan": Scan,
    "proximity": Proximity,
    "puzzle_submit": PuzzleSubmit,
    "teacher_share_done": TeacherShareDone,
    "challenge_scan": ChallengeScan,
    "read_done": ReadDone,
    "timer_fired": TimerFired,
    "clock": ClockAdvance,
}


def event_to_dict(event: Event) -> dict[str, Any]:
    doc = {"kind": event.kind}
    for name in event.__dataclass_fields__:
        if name != "kind":
            doc[name] = getattr(event, name)
    return doc


def event_from_dict(doc: dict[str, Any]) -> Event:
    cls = _EVENT_TYPES[doc["kind"]]
    kwargs = {k: v for k, v in doc.items() if k != "kind"}
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# Effects


@dataclass(frozen=True)
class SendTo:
    to: str
    type: str
    payload: dict[str, Any]
    kind: str = field(default="send", init=False)


@dataclass(frozen=True)
class Broadcast:
    type: str
    payload: dict[str, Any]
    kind: str = field(default="broadcast", init=False)


@dataclass(frozen=True)
class ArmTimer:
    timer_id: str
    delay_ms: int
    kind: str = field(default="arm_timer", init=False)


@dataclass(frozen=True)
class CancelTimer:
    timer_id: str
    kind: str = field(default="cancel_timer", init=False)


@dataclass(frozen=True)
class WriteCheckpoint:
    reason: str
    kind: str = field(default="checkpoint", init=False)


Effect = SendTo | Broadcast | ArmTimer | CancelTimer | WriteCheckpoint


def effect_to_dict(effect: Effect) -> dict[str, Any]:
    doc = {"kind": effect.kind}
    for name in effect.__dataclass_fields__:
        if name != "kind":
            doc[name] = getattr(effect, name)
    return doc


# ---------------------------------------------------------------------------
# State


@dataclass
class PlayerState:
    player_id: str
    name: str
    role: str = "player"
    connected: bool = True
    track: str | None = None
    plan_index: int = 0
    found: list[str] = field(default_factory=list)
    revealed: list[str] = field(default_factory=list)
    notepad_ok: bool = False
    unit_id: str | None = None
    group_id: str | None = None
    pages: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "player_id": self.player_id,
            "name": self.name,
            "role": self.role,
            "connected": self.connected,
            "track": self.track,
            "plan_index": self.plan_index,
            "found": list(self.found),
            "revealed": list(self.revealed),
            "notepad_ok": self.notepad_ok,
            "unit_id": self.unit_id,
            "group_id": self.group_id,
            "pages": list(self.pages),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> PlayerState:
        return cls(**doc)


@dataclass
class UnitState:
    unit_id: str
    member_ids: list[str]
    token: str
    epoch: int
    confirmed: list[str] = field(default_factory=list)
    code_accepted: bool = False
    attempts: int = 0
    unlocks_marker: str | None = None
    unlock_done: bool = False

    @property
    def sender_id(self) -> str:
        return self.member_ids[0]

    @property
    def receiver_ids(self) -> list[str]:
        return self.member_ids[1:]

    @property
    def solved(self) -> bool:
        return self.code_accepted and self.unlock_done

    def to_dict(self) -> dict[str, Any]:
        return {
            "unit_id": self.unit_id,
            "member_ids": list(self.member_ids),
            "token": self.token,
            "epoch": self.epoch,
            "confirmed": list(self.confirmed),
            "code_accepted": self.code_accepted,
            "attempts": self.attempts,
            "unlocks_marker": self.unlocks_marker,
            "unlock_done": self.unlock_done,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> UnitState:
        return cls(**doc)


@dataclass
class GroupState:
    group_id: str
    member_ids: list[str]
    token: str
    epoch: int
    confirmed: list[str] = field(default_factory=list)
    task_id: str | None = None
    attempts: int = 0
    solved: bool = False

    @property
    def anchor_id(self) -> str:
        return self.member_ids[0]

    def to_dict(self) -> dict[str, Any]:
        return {
            "group_id": self.group_id,
            "member_ids": list(self.member_ids),
            "token": self.token,
            "epoch": self.epoch,
            "confirmed": list(self.confirmed),
            "task_id": self.task_id,
            "attempts": self.attempts,
            "solved": self.solved,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> GroupState:
        return cls(**doc)


@dataclass
class SessionState:
    session_id: str
    seed: int
    scenario_id: str
    scenario_hash: str
    phase: str = "Lobby"
    paused: bool = False
    now_ms: int = 0
    event_seq: int = 0
    players: dict[str, PlayerState] = field(default_factory=dict)
    join_order: list[str] = field(default_factory=list)
    role_cursor: int = 0
    role_acked: list[str] = field(default_factory=list)
    pair_units: dict[str, UnitState] = field(default_factory=dict)
    pair_run: int = 0
    groups: dict[str, GroupState] = field(default_factory=dict)
    group_run: int = 0
    token_epoch: int = 0
    stale_tokens: list[str] = field(default_factory=list)
    share_visited: list[str] = field(default_factory=list)
    share_revealed: list[str] = field(default_factory=list)
    challenge_deadline: int | None = None
    challenge_counts: dict[str, int] = field(default_factory=dict)
    challenge_done: bool = False
    read_cursor: int = 0
    timers: dict[str, int] = field(default_factory=dict)
    phase_history: list[list] = field(default_factory=list)
    scenario: Scenario | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "seed": self.seed,
            "scenario_id": self.scenario_id,
            "scenario_hash": self.scenario_hash,
            "phase": self.phase,
            "paused": self.paused,
            "now_ms": self.now_ms,
            "event_seq": self.event_seq,
            "players": {pid: p.to_dict() for pid, p in sorted(self.players.items())},
            "join_order": list(self.join_order),
            "role_cursor": self.role_cursor,
            "role_acked": list(self.role_acked),
            "pair_units": {uid: u.to_dict() for uid, u in sorted(self.pair_units.items())},
            "pair_run": self.pair_run,
            "groups": {gid: g.to_dict() for gid, g in sorted(self.groups.items())},
            "group_run": self.group_run,
            "token_epoch": self.token_epoch,
            "stale_tokens": list(self.stale_tokens),
            "share_visited": list(self.share_visited),
            "share_revealed": list(self.share_revealed),
            "challenge_deadline": self.challenge_deadline,
            "challenge_counts": dict(sorted(self.challenge_counts.items())),
            "challenge_done": self.challenge_done,
            "read_cursor": self.read_cursor,
            "timers": dict(sorted(self.timers.items())),
            "phase_history": [list(entry) for entry in self.phase_history],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> SessionState:
        state = cls(
            session_id=doc["session_id"],
            seed=doc["seed"],
            scenario_id=doc["scenario_id"],
            scenario_hash=doc["scenario_hash"],
            phase=doc["phase"],
            paused=doc["paused"],
            now_ms=doc["now_ms"],
            event_seq=doc["event_seq"],
            role_cursor=doc["role_cursor"],
            role_acked=list(doc["role_acked"]),
            pair_run=doc["pair_run"],
            group_run=doc["group_run"],
            token_epoch=doc["token_epoch"],
            stale_tokens=list(doc["stale_tokens"]),
            share_visited=list(doc["share_visited"]),
            share_revealed=list(doc["share_revealed"]),
            challenge_deadline=doc["challenge_deadline"],
            challenge_done=doc["challenge_done"],
            read_cursor=doc["read_cursor"],
        )
        state.join_order = list(doc["join_order"])
        # Player insertion order is join order; unit and group insertion
        # order follows their numeric ids, which sort lexically here.
        state.players = {
            pid: PlayerState.from_dict(doc["players"][pid])
            for pid in doc["join_order"]
            if pid in doc["players"]
        }
        state.pair_units = {
            uid: UnitState.from_dict(u) for uid, u in sorted(doc["pair_units"].items())
        }
        state.groups = {gid: GroupState.from_dict(g) for gid, g in sorted(doc["groups"].items())}
        state.challenge_counts = dict(doc["challenge_counts"])
        state.timers = dict(doc["timers"])
        state.phase_history = [list(entry) for entry in doc["phase_history"]]
        return state

    # convenience views -----------------------------------------------------

    def connected_players(self) -> list[PlayerState]:
        return [
            self.players[pid]
            for pid in self.join_order
            if self.players[pid].role == "player" and self.players[pid].connected
        ]

    def connected_teachers(self) -> list[PlayerState]:
        return [
            self.players[pid]
            for pid in self.join_order
            if self.players[pid].role == "teacher" and self.players[pid].connected
        ]


class ScenarioMismatch(Exception):
    """State refers to a different scenario than the one provided."""


def new_session(scenario: Scenario, session_id: str, seed: int) -> SessionState:
    from .scenario import content_hash

    state = SessionState(
        session_id=session_id,
        seed=seed,
        scenario_id=scenario.scenario_id,
        scenario_hash=content_hash(scenario).hex(),
        scenario=scenario,
    )
    state.phase_history.append(["Lobby", 0, 0])
    return state


def bind_scenario(state: SessionState, scenario: Scenario) -> None:
    from .scenario import content_hash

    if content_hash(scenario).hex() != state.scenario_hash:
        raise ScenarioMismatch(
            f"state was created from scenario {state.scenario_id} "
            f"({state.scenario_hash[:12]}...), got a different document"
        )
    state.scenario = scenario


# ---------------------------------------------------------------------------
# Pure grouping helpers


def partition_sizes(n: int) -> list[int]:
    """Split n players into groups of 4 and 3, preferring fours.

    Uses threes = (4 - n mod 4) mod 4 and fills the rest with fours.  The
    handful of sizes with no 3/4 split (1, 2, 5) stay together as one
    undersized or oversized group rather than stranding anyone.
    """
    if n <= 0:
        return []
    threes = (4 - (n % 4)) % 4
    if 3 * threes <= n and (n - 3 * threes) % 4 == 0:
        fours = (n - 3 * threes) // 4
        return [4] * fours + [3] * threes
    return [n]


def assign_pairs(
    track_a: list[str], track_b: list[str], unassigned: list[str], rng: random.Random
) -> list[list[str]]:
    """Form cross-track units; first member of each unit is the sender.

    Equal-sized tracks give clean pairs.  Leftover players (odd rosters,
    track imbalance, trackless late joiners) are spread over the existing
    units round-robin, producing trios rather than leaving anyone out.
    """
    a, b, rest = list(track_a), list(track_b), list(unassigned)
    rng.shuffle(a)
    rng.shuffle(b)
    rng.shuffle(rest)
    units = [[x, y] for x, y in zip(a, b)]
    leftovers = a[len(b):] + b[len(a):] + rest
    if units:
        for i, pid in enumerate(leftovers):
            units[i % len(units)].append(pid)
    else:
        units = [leftovers[i : i + 2] for i in range(0, len(leftovers), 2)]
    return [u for u in units if u]


def assign_groups(
    units: list[list[str]], sizes: list[int], rng: random.Random
) -> list[list[str]]:
    """Pack pair units into groups of the given sizes.

    Whole units are kept together whenever they fit the remaining room of
    a group; a unit is split only when no whole unit fits.
    """
    pool = [list(u) for u in units if u]
    rng.shuffle(pool)
    groups: list[list[str]] = []
    for size in sizes:
        members: list[str] = []
        while pool and len(members) < size:
            fit = next((u for u in pool if len(u) <= size - len(members)), None)
            if fit is not None:
                members.extend(fit)
                pool.remove(fit)
            else:
                take = size - len(members)
                members.extend(pool[0][:take])
                del pool[0][:take]
        groups.append(members)
    for unit in pool:  # only when sum(sizes) < total, a defensive path
        groups[-1].extend(unit)
    return groups


def _rng(state: SessionState, label: str) -> random.Random:
    return random.Random(f"{state.seed}:{label}")


# ---------------------------------------------------------------------------
# Engine entry point


def handle_event(state: SessionState, event: Event) -> list[Effect]:
    """Apply one event; returns the effects the host must carry out."""
    if state.scenario is None:
        raise ScenarioMismatch("state has no scenario bound; call bind_scenario first")
    state.event_seq += 1
    effects: list[Effect] = []
    handler = _HANDLERS[event.kind]
    handler(state, event, effects)
    return effects


# -- shared emit helpers ----------------------------------------------------


def _send(state: SessionState, effects: list[Effect], pid: str, type_: str, payload: dict) -> None:
    player = state.players.get(pid)
    if player is not None and player.connected:
        effects.append(SendTo(pid, type_, payload))


def _error(state: SessionState, effects: list[Effect], pid: str, code: str, detail: str = "") -> None:
    payload: dict[str, Any] = {"code": code}
    if detail:
        payload["detail"] = detail
    effects.append(SendTo(pid, "error", payload))


def _roster_payload(state: SessionState) -> dict[str, Any]:
    return {
        "players": [
            {
                "player_id": p.player_id,
                "name": p.name,
                "role": p.role,
                "connected": p.connected,
            }
            for p in (state.players[pid] for pid in state.join_order)
        ]
    }


def _marker_payload(state: SessionState, marker_id: str) -> dict[str, str]:
    marker = state.scenario.marker(marker_id)
    return {"marker_id": marker.marker_id, "location_label": marker.location_label}


def _names(state: SessionState, pids: list[str]) -> list[dict[str, str]]:
    return [
        {"player_id": pid, "name": state.players[pid].name}
        for pid in pids
        if pid in state.players
    ]


# -- plan helpers -----------------------------------------------------------


def _solo_len(state: SessionState, track: str) -> int:
    return len(individual_plan(state.scenario, track))


def _solo_done(state: SessionState, player: PlayerState) -> bool:
    if player.track is None:
        return True
    return player.plan_index >= _solo_len(state, player.track)


def _plan_target(state: SessionState, player: PlayerState) -> ArtifactDef | None:
    """Next artifact on the player's plan, honoring pair-code gates."""
    if player.track is None:
        return None
    plan = discovery_plan(state.scenario, player.track)
    if player.plan_index >= len(plan):
        return None
    marker_id = plan[player.plan_index]
    if marker_id in gated_markers(state.scenario):
        unit = state.pair_units.get(player.unit_id or "")
        if unit is None or not unit.code_accepted or unit.unlocks_marker != marker_id:
            return None
    return state.scenario.artifact_at_marker(marker_id)


def _notepad_payload(state: SessionState, player: PlayerState) -> dict[str, Any]:
    target = _plan_target(state, player)
    return {
        "track": player.track,
        "target": _marker_payload(state, target.marker_id) if target else None,
    }


def _discovery_payload(
    state: SessionState, artifact: ArtifactDef, next_target: ArtifactDef | None
) -> dict[str, Any]:
    scn = state.scenario
    payload: dict[str, Any] = {
        "artifact_id": artifact.artifact_id,
        "marker_id": artifact.marker_id,
        "reveal_text": artifact.reveal_text,
        "fragments": [
            {"fragment_id": fid, "text": _frag_text(scn, fid)} for fid in artifact.fragment_ids
        ],
        "next_target": _marker_payload(state, next_target.marker_id) if next_target else None,
    }
    if artifact.audio_cue is not None:
        payload["audio_cue"] = artifact.audio_cue
    return payload


def _frag_text(scn: Scenario, fragment_id: str) -> str:
    for f in scn.fragments:
        if f.fragment_id == fragment_id:
            return f.text
    raise KeyError(fragment_id)


def _reveal_next(state: SessionState, player: PlayerState, effects: list[Effect]) -> ArtifactDef:
    """Advance the player's plan by one and emit the discovery."""
    artifact = _plan_target(state, player)
    assert artifact is not None
    player.plan_index += 1
    player.found.append(artifact.artifact_id)
    if artifact.artifact_id not in player.revealed:
        player.revealed.append(artifact.artifact_id)
    _send(
        state,
        effects,
        player.player_id,
        "discovery",
        _discovery_payload(state, artifact, _plan_target(state, player)),
    )
    return artifact


def _grant_solo(state: SessionState, player: PlayerState, effects: list[Effect]) -> None:
    while not _solo_done(state, player):
        _reveal_next(state, player, effects)


def _share_with_unit(
    state: SessionState, unit: UnitState, artifact: ArtifactDef, effects: list[Effect], skip: str
) -> None:
    """Show an unlocked artifact to the rest of the unit."""
    payload = _discovery_payload(state, artifact, None)
    for pid in unit.member_ids:
        if pid == skip:
            continue
        member = state.players.get(pid)
        if member is None:
            continue
        if artifact.artifact_id not in member.revealed:
            member.revealed.append(artifact.artifact_id)
        _send(state, effects, pid, "discovery", payload)


# -- phase machinery --------------------------------------------------------


def _arm_phase_timers(state: SessionState, effects: list[Effect]) -> None:
    policy = state.scenario.hint_entry(state.phase)
    if policy is None:
        return
    for i in range(len(policy.hints)):
        timer_id = f"hint:{state.phase}:{i}"
        delay = policy.delay_seconds * 1000 * (i + 1)
        state.timers[timer_id] = state.now_ms + delay
        effects.append(ArmTimer(timer_id, delay))


def _cancel_phase_timers(state: SessionState, effects: list[Effect], phase: str) -> None:
    doomed = [tid for tid in state.timers if tid.startswith(f"hint:{phase}:")]
    if phase == "TimedChallenge" and "challenge" in state.timers:
        doomed.append("challenge")
    for tid in doomed:
        del state.timers[tid]
        effects.append(CancelTimer(tid))


def _enter_phase(state: SessionState, phase: str, effects: list[Effect]) -> None:
    _cancel_phase_timers(state, effects, state.phase)
    state.phase = phase
    state.phase_history.append([phase, state.now_ms, state.event_seq])
    payload: dict[str, Any] = {"phase": phase, "paused": state.paused}
    if phase == "DiaryCircle":
        payload["choreography"] = "form_circle"
    effects.append(Broadcast("phase_change", payload))
    effects.append(WriteCheckpoint(f"phase:{phase}"))
    _arm_phase_timers(state, effects)
    entry = _PHASE_ENTRY.get(phase)
    if entry is not None:
        entry(state, effects)


def _barrier_met(state: SessionState) -> bool:
    phase = state.phase
    players = state.connected_players()
    if phase == "NotepadDiscovery":
        return bool(players) and all(p.notepad_ok for p in players)
    if phase == "IndividualDiscovery":
        return bool(players) and all(_solo_done(state, p) for p in players)
    if phase == "PairFormation":
        return bool(state.pair_units) and all(
            _unit_confirmed(state, u) for u in state.pair_units.values()
        )
    if phase == "PairPuzzle":
        live = [u for u in state.pair_units.values() if _unit_live(state, u)]
        return bool(live) and all(u.solved for u in live)
    if phase == "GroupFormation":
        return bool(state.groups) and all(
            _group_confirmed(state, g) for g in state.groups.values()
        )
    if phase == "GroupPuzzle":
        live = [g for g in state.groups.values() if _group_live(state, g)]
        return bool(live) and all(g.solved for g in live)
    if phase == "TeacherShare":
        return len(state.share_visited) >= len(state.groups)
    if phase == "TimedChallenge":
        return state.challenge_done
    if phase == "DiaryCircle":
        return state.read_cursor >= _total_pages(state)
    return False


def _maybe_advance(state: SessionState, effects: list[Effect]) -> None:
    for _ in range(len(PHASES)):
        if state.phase in ("Lobby", "RegisterRoleplay", "Discussion", "Ended"):
            return
        if not _barrier_met(state):
            return
        _enter_phase(state, next_phase(state.phase), effects)


def _unit_confirmed(state: SessionState, unit: UnitState) -> bool:
    return all(
        pid in unit.confirmed
        for pid in unit.receiver_ids
        if pid in state.players and state.players[pid].connected
    )


def _unit_live(state: SessionState, unit: UnitState) -> bool:
    return any(
        pid in state.players and state.players[pid].connected for pid in unit.member_ids
    )


def _group_confirmed(state: SessionState, group: GroupState) -> bool:
    return all(
        pid in group.confirmed
        for pid in group.member_ids[1:]
        if pid in state.players and state.players[pid].connected
    )


def _group_live(state: SessionState, group: GroupState) -> bool:
    return any(
        pid in state.players and state.players[pid].connected for pid in group.member_ids
    )


def _total_pages(state: SessionState) -> int:
    return sum(len(state.players[pid].pages) for pid in state.join_order)


# -- phase entry hooks ------------------------------------------------------


def _enter_roleplay(state: SessionState, effects: list[Effect]) -> None:
    state.role_cursor = 0
    state.role_acked = []
    _emit_role_line(state, effects)


def _current_roll_call(state: SessionState) -> list[str]:
    return [p.player_id for p in state.connected_players()]


def _next_speaker(state: SessionState) -> str | None:
    for pid in _current_roll_call(state):
        if pid not in state.role_acked:
            return pid
    return None


def _emit_role_line(state: SessionState, effects: list[Effect]) -> None:
    """Broadcast the current script line; auto-advance lines without acks."""
    script = state.scenario.roleplay_script
    while state.role_cursor < len(script):
        line = script[state.role_cursor]
        payload: dict[str, Any] = {
            "line_index": state.role_cursor,
            "speaker": line.speaker,
            "text": line.prompt_text,
            "ack_required": line.ack_required,
        }
        if line.speaker == "player" and line.ack_required:
            speaker_id = _next_speaker(state)
            if speaker_id is None:
                state.role_cursor += 1
                state.role_acked = []
                continue
            payload["speaker_id"] = speaker_id
        effects.append(Broadcast("role_prompt", payload))
        if line.ack_required:
            return
        state.role_cursor += 1
        state.role_acked = []
    _enter_phase(state, "NotepadDiscovery", effects)
    _maybe_advance(state, effects)


def _advance_role_line(state: SessionState, effects: list[Effect]) -> None:
    state.role_cursor += 1
    state.role_acked = []
    _emit_role_line(state, effects)


def _enter_notepad(state: SessionState, effects: list[Effect]) -> None:
    players = state.connected_players()
    order = [p.player_id for p in players]
    rng = _rng(state, "tracks")
    rng.shuffle(order)
    for i, pid in enumerate(order):
        state.players[pid].track = "A" if i % 2 == 0 else "B"
    for p in players:
        p.notepad_ok = False
        _send(state, effects, p.player_id, "notepad", _notepad_payload(state, p))


def _assign_balance_track(state: SessionState) -> str:
    counts = {"A": 0, "B": 0}
    for pid in state.join_order:
        p = state.players[pid]
        if p.role == "player" and p.connected and p.track in counts:
            counts[p.track] += 1
    return "A" if counts["A"] <= counts["B"] else "B"


def _units_in_order(state: SessionState) -> list[UnitState]:
    # Sorted by id, not insertion order: insertion order does not survive
    # a checkpoint round trip, and these iterations feed rng draws,
    # serialized lists, and effect ordering.
    return [state.pair_units[uid] for uid in sorted(state.pair_units)]


def _groups_in_order(state: SessionState) -> list[GroupState]:
    return [state.groups[gid] for gid in sorted(state.groups)]


def _form_pairs(state: SessionState, effects: list[Effect]) -> None:
    state.pair_run += 1
    state.token_epoch += 1
    for unit in _units_in_order(state):
        if unit.token not in state.stale_tokens:
            state.stale_tokens.append(unit.token)
    players = state.connected_players()
    track_a = [p.player_id for p in players if p.track == "A"]
    track_b = [p.player_id for p in players if p.track == "B"]
    rest = [p.player_id for p in players if p.track not in ("A", "B")]
    units = assign_pairs(track_a, track_b, rest, _rng(state, f"pairs:{state.pair_run}"))
    for pid in state.join_order:
        state.players[pid].unit_id = None
    state.pair_units = {}
    for i, member_ids in enumerate(units):
        unit_id = f"p{state.pair_run}.{i + 1}"
        token = mint_token(_rng(state, f"token:{state.token_epoch}:{unit_id}"))
        unit = UnitState(
            unit_id=unit_id, member_ids=member_ids, token=token, epoch=state.token_epoch
        )
        state.pair_units[unit_id] = unit
        for pid in member_ids:
            state.players[pid].unit_id = unit_id
        for pid in member_ids:
            partner_ids = [m for m in member_ids if m != pid]
            payload: dict[str, Any] = {
                "unit_id": unit_id,
                "role": "sender" if pid == unit.sender_id else "receiver",
                "partners": _names(state, partner_ids),
            }
            if pid == unit.sender_id:
                payload["token"] = token
            _send(state, effects, pid, "pair_assign", payload)


def _enter_pair_puzzle(state: SessionState, effects: list[Effect]) -> None:
    for unit in _units_in_order(state):
        _send_pair_task(state, unit, effects)


def _unit_pool(state: SessionState, unit: UnitState) -> set[str]:
    pool: set[str] = set()
    for pid in unit.member_ids:
        player = state.players.get(pid)
        if player is not None:
            pool.update(player.found)
    return pool


class NoMatchingEntry(Exception):
    """No pair code entry is satisfiable from the given artifact sets.

    Raised only for scenarios that dodged validation: PAIR-SOLVABILITY
    guarantees exactly one entry for every reachable pair state.
    """


def derive_pair_code(
    scenario: Scenario, set_a: Iterable[str], set_b: Iterable[str]
) -> PairCodeEntry:
    """Resolve the code entry a pair with these artifact sets can satisfy."""
    hits = matching_entries(scenario, set_a, set_b)
    if not hits:
        raise NoMatchingEntry(f"no entry matches {sorted(set_a)} + {sorted(set_b)}")
    return hits[0]


def _unit_entry(state: SessionState, unit: UnitState) -> PairCodeEntry | None:
    try:
        return derive_pair_code(state.scenario, _unit_pool(state, unit), ())
    except NoMatchingEntry:
        return None


def _send_pair_task(state: SessionState, unit: UnitState, effects: list[Effect]) -> None:
    entry = _unit_entry(state, unit)
    code_length = len(entry.code) if entry else max(
        (len(p.code) for p in state.scenario.pair_code_table), default=0
    )
    payload = {"kind": "pair", "unit_id": unit.unit_id, "code_length": code_length}
    for pid in unit.member_ids:
        _send(state, effects, pid, "puzzle_task", payload)


def _form_groups(state: SessionState, effects: list[Effect]) -> None:
    state.group_run += 1
    state.token_epoch += 1
    for group in _groups_in_order(state):
        if group.token not in state.stale_tokens:
            state.stale_tokens.append(group.token)
    players = state.connected_players()
    connected_ids = {p.player_id for p in players}
    units: list[list[str]] = []
    in_unit: set[str] = set()
    for unit in _units_in_order(state):
        members = [pid for pid in unit.member_ids if pid in connected_ids]
        if members:
            units.append(members)
            in_unit.update(members)
    for p in players:
        if p.player_id not in in_unit:
            units.append([p.player_id])
    sizes = partition_sizes(len(players))
    grouped = assign_groups(units, sizes, _rng(state, f"groups:{state.group_run}"))
    for pid in state.join_order:
        state.players[pid].group_id = None
    state.groups = {}
    for i, member_ids in enumerate(grouped):
        if not member_ids:
            continue
        group_id = f"g{state.group_run}.{i + 1}"
        token = mint_token(_rng(state, f"token:{state.token_epoch}:{group_id}"))
        group = GroupState(
            group_id=group_id, member_ids=member_ids, token=token, epoch=state.token_epoch
        )
        state.groups[group_id] = group
        for pid in member_ids:
            state.players[pid].group_id = group_id
        for pid in member_ids:
            payload: dict[str, Any] = {
                "group_id": group_id,
                "role": "anchor" if pid == group.anchor_id else "member",
                "members": _names(state, member_ids),
                "anchor_id": group.anchor_id,
            }
            if pid == group.anchor_id:
                payload["token"] = token
            _send(state, effects, pid, "group_assign", payload)


def _enter_group_puzzle(state: SessionState, effects: list[Effect]) -> None:
    tasks = state.scenario.group_tasks
    for i, group in enumerate(_groups_in_order(state)):
        group.task_id = tasks[i % len(tasks)].task_id
        _send_group_task(state, group, effects)


def _group_task(state: SessionState, group: GroupState):
    for task in state.scenario.group_tasks:
        if task.task_id == group.task_id:
            return task
    raise KeyError(group.task_id)


def _send_group_task(state: SessionState, group: GroupState, effects: list[Effect]) -> None:
    task = _group_task(state, group)
    payload = {
        "kind": "group",
        "group_id": group.group_id,
        "task_id": task.task_id,
        "prompt_text": task.prompt_text,
        "code_length": len(task.answer_code),
    }
    for pid in group.member_ids:
        _send(state, effects, pid, "puzzle_task", payload)


def _enter_teacher_share(state: SessionState, effects: list[Effect]) -> None:
    state.share_visited = []
    effects.append(
        Broadcast(
            "share_progress",
            {"groups_done": 0, "groups_total": len(state.groups)},
        )
    )


def _enter_challenge(state: SessionState, effects: list[Effect]) -> None:
    seconds = state.scenario.challenge_seconds
    state.challenge_deadline = state.now_ms + seconds * 1000
    state.challenge_counts = {}
    state.challenge_done = False
    state.timers["challenge"] = state.challenge_deadline
    effects.append(ArmTimer("challenge", seconds * 1000))
    effects.append(
        Broadcast(
            "challenge_start",
            {"seconds": seconds, "markers_total": len(state.scenario.markers)},
        )
    )


def _deal_diary(state: SessionState) -> None:
    players = state.connected_players()
    for pid in state.join_order:
        state.players[pid].pages = []
    if not players:
        return
    pages = sorted(d.order for d in state.scenario.diary)
    n = len(players)
    base, extra = divmod(len(pages), n)
    start = 0
    for i, player in enumerate(players):
        size = base + (1 if i < extra else 0)
        player.pages = pages[start : start + size]
        start += size


def _diary_holder(state: SessionState, order: int) -> PlayerState | None:
    for pid in state.join_order:
        if order in state.players[pid].pages:
            return state.players[pid]
    return None


def _page_text(state: SessionState, order: int) -> str:
    for d in state.scenario.diary:
        if d.order == order:
            return d.text
    raise KeyError(order)


def _enter_diary(state: SessionState, effects: list[Effect]) -> None:
    _deal_diary(state)
    state.read_cursor = 0
    for p in state.connected_players():
        _send(
            state,
            effects,
            p.player_id,
            "diary_page",
            {"pages": [{"order": o, "text": _page_text(state, o)} for o in p.pages]},
        )
    _emit_read_turn(state, effects)


def _emit_read_turn(state: SessionState, effects: list[Effect]) -> None:
    if state.read_cursor >= _total_pages(state):
        return
    holder = _diary_holder(state, state.read_cursor)
    if holder is None:
        return
    effects.append(
        Broadcast(
            "read_turn",
            {
                "order": state.read_cursor,
                "holder_id": holder.player_id,
                "holder_name": holder.name,
            },
        )
    )


def _diary_fix(state: SessionState, effects: list[Effect]) -> None:
    """Move unread pages held by disconnected players to connected ones."""
    if state.phase != "DiaryCircle":
        return
    connected = [p.player_id for p in state.connected_players()]
    if not connected:
        return
    moved = False
    for idx, pid in enumerate(state.join_order):
        player = state.players[pid]
        if player.connected or player.role != "player":
            continue
        unread = [o for o in player.pages if o >= state.read_cursor]
        if not unread:
            continue
        # Hand unread pages to the next connected player in the circle.
        later = [
            q
            for q in state.join_order[idx + 1 :] + state.join_order[: idx + 1]
            if q in connected
        ]
        heir = state.players[later[0]]
        player.pages = [o for o in player.pages if o < state.read_cursor]
        heir.pages = sorted(heir.pages + unread)
        _send(
            state,
            effects,
            heir.player_id,
            "diary_page",
            {"pages": [{"order": o, "text": _page_text(state, o)} for o in heir.pages]},
        )
        moved = True
    if moved:
        _emit_read_turn(state, effects)


def _enter_discussion(state: SessionState, effects: list[Effect]) -> None:
    for teacher in state.connected_teachers():
        _send(
            state,
            effects,
            teacher.player_id,
            "discussion_prompts",
            {"prompts": list(state.scenario.discussion_prompts)},
        )


def _session_summary(state: SessionState) -> dict[str, Any]:
    return {
        "duration_ms": state.now_ms,
        "players": len([pid for pid in state.join_order if state.players[pid].role == "player"]),
        "phases": [
            {"phase": name, "at_ms": at_ms, "event_seq": seq}
            for name, at_ms, seq in state.phase_history
        ],
        "challenge": {
            "covered": len(state.challenge_counts),
            "total": len(state.scenario.markers),
        },
    }


def _enter_ended(state: SessionState, effects: list[Effect]) -> None:
    effects.append(Broadcast("session_ended", {"summary": _session_summary(state)}))


_PHASE_ENTRY: dict[str, Callable[[SessionState, list[Effect]], None]] = {
    "RegisterRoleplay": _enter_roleplay,
    "NotepadDiscovery": _enter_notepad,
    "PairFormation": _form_pairs,
    "PairPuzzle": _enter_pair_puzzle,
    "GroupFormation": _form_groups,
    "GroupPuzzle": _enter_group_puzzle,
    "TeacherShare": _enter_teacher_share,
    "TimedChallenge": _enter_challenge,
    "DiaryCircle": _enter_diary,
    "Discussion": _enter_discussion,
    "Ended": _enter_ended,
}


# ---------------------------------------------------------------------------
# Event handlers


def _on_join(state: SessionState, event: Join, effects: list[Effect]) -> None:
    existing = state.players.get(event.player_id)
    if existing is not None:
        existing.connected = True
        effects.append(SendTo(event.player_id, "welcome", _welcome_payload(state, existing, True)))
        effects.append(Broadcast("roster", _roster_payload(state)))
        _reintegrate(state, existing, effects)
        effects.extend(context_effects(state, event.player_id))
        _diary_fix(state, effects)
        _maybe_advance(state, effects)
        return
    if event.role not in ("player", "teacher", "facilitator"):
        effects.append(SendTo(event.player_id, "error", {"code": "not_allowed", "detail": "unknown role"}))
        return
    if event.role == "player":
        player_count = sum(1 for pid in state.join_order if state.players[pid].role == "player")
        if player_count >= state.scenario.max_players:
            effects.append(SendTo(event.player_id, "error", {"code": "room_full"}))
            return
    player = PlayerState(player_id=event.player_id, name=event.name, role=event.role)
    state.players[event.player_id] = player
    state.join_order.append(event.player_id)
    effects.append(SendTo(event.player_id, "welcome", _welcome_payload(state, player, False)))
    effects.append(Broadcast("roster", _roster_payload(state)))
    if player.role != "player":
        if state.phase != "Lobby":
            effects.extend(context_effects(state, player.player_id))
        return
    phase_i = phase_index(state.phase)
    if state.phase == "RegisterRoleplay":
        _roll_call_fix(state, effects)
        effects.extend(context_effects(state, player.player_id))
    elif state.phase in ("NotepadDiscovery", "IndividualDiscovery"):
        player.track = _assign_balance_track(state)
        _send(state, effects, player.player_id, "notepad", _notepad_payload(state, player))
    elif state.phase == "PairFormation":
        player.track = _assign_balance_track(state)
        _grant_solo(state, player, effects)
        _form_pairs(state, effects)
    elif state.phase == "PairPuzzle":
        player.track = _assign_balance_track(state)
        _grant_solo(state, player, effects)
        _attach_to_unit(state, player, effects)
    elif state.phase == "GroupFormation":
        _form_groups(state, effects)
    elif state.phase == "GroupPuzzle":
        _attach_to_group(state, player, effects)
    elif phase_i >= phase_index("TeacherShare"):
        effects.extend(context_effects(state, player.player_id))
    _maybe_advance(state, effects)


def _reintegrate(state: SessionState, player: PlayerState, effects: list[Effect]) -> None:
    """Put a reconnecting player back into the running phase structure."""
    if player.role != "player":
        return
    phase = state.phase
    if phase == "RegisterRoleplay":
        _roll_call_fix(state, effects)
        return
    if phase in ("NotepadDiscovery", "IndividualDiscovery"):
        if player.track is None:
            player.track = _assign_balance_track(state)
        return
    if phase in ("PairFormation", "PairPuzzle", "GroupFormation", "GroupPuzzle"):
        # A rejoiner may have missed the discovery barrier entirely; top
        # up their solo knowledge so any pool they join stays solvable.
        if player.track is None:
            player.track = _assign_balance_track(state)
        _grant_solo(state, player, effects)
    if phase == "PairFormation":
        _form_pairs(state, effects)
    elif phase == "PairPuzzle" and player.unit_id not in state.pair_units:
        _attach_to_unit(state, player, effects)
    elif phase == "GroupFormation":
        _form_groups(state, effects)
    elif phase == "GroupPuzzle" and player.group_id not in state.groups:
        _attach_to_group(state, player, effects)


def _pool_has_track(state: SessionState, unit: UnitState, track: str | None) -> bool:
    if track is None:
        return True
    for pid in unit.member_ids:
        member = state.players.get(pid)
        if member is None:
            continue
        for aid in member.found:
            if state.scenario.artifact(aid).track == track:
                return True
    return False


def _attach_to_unit(state: SessionState, player: PlayerState, effects: list[Effect]) -> None:
    # Prefer a unit that still lacks this player's track so its artifact
    # pool becomes complete, then the smallest unit.
    units = sorted(
        state.pair_units.values(),
        key=lambda u: (_pool_has_track(state, u, player.track), len(u.member_ids), u.unit_id),
    )
    if not units:
        _form_pairs(state, effects)
        return
    unit = units[0]
    unit.member_ids.append(player.player_id)
    player.unit_id = unit.unit_id
    _send(
        state,
        effects,
        player.player_id,
        "pair_assign",
        {
            "unit_id": unit.unit_id,
            "role": "receiver",
            "partners": _names(state, [m for m in unit.member_ids if m != player.player_id]),
        },
    )
    if unit.code_accepted:
        unit.confirmed.append(player.player_id)
    _send_pair_task(state, unit, effects)


def _attach_to_group(state: SessionState, player: PlayerState, effects: list[Effect]) -> None:
    groups = sorted(state.groups.values(), key=lambda g: (len(g.member_ids), g.group_id))
    if not groups:
        _form_groups(state, effects)
        return
    group = groups[0]
    group.member_ids.append(player.player_id)
    player.group_id = group.group_id
    _send(
        state,
        effects,
        player.player_id,
        "group_assign",
        {
            "group_id": group.group_id,
            "role": "member",
            "members": _names(state, group.member_ids),
            "anchor_id": group.anchor_id,
        },
    )
    if group.solved:
        group.confirmed.append(player.player_id)
    else:
        _send_group_task(state, group, effects)


def _welcome_payload(state: SessionState, player: PlayerState, reconnect: bool) -> dict[str, Any]:
    return {
        "player_id": player.player_id,
        "name": player.name,
        "role": player.role,
        "phase": state.phase,
        "paused": state.paused,
        "scenario_id": state.scenario_id,
        "title": state.scenario.title,
        "reconnect": reconnect,
    }


def _on_leave(state: SessionState, event: Leave, effects: list[Effect]) -> None:
    player = state.players.get(event.player_id)
    if player is None or not player.connected:
        return
    player.connected = False
    effects.append(Broadcast("roster", _roster_payload(state)))
    if player.role != "player":
        return
    if state.phase == "RegisterRoleplay":
        _roll_call_fix(state, effects)
    elif state.phase == "PairFormation" and player.unit_id is not None:
        _form_pairs(state, effects)
    elif state.phase == "GroupFormation" and player.group_id is not None:
        _form_groups(state, effects)
    elif state.phase == "DiaryCircle":
        _diary_fix(state, effects)
    _maybe_advance(state, effects)


def _roll_call_fix(state: SessionState, effects: list[Effect]) -> None:
    """Recompute the current line after a roster change."""
    script = state.scenario.roleplay_script
    if state.role_cursor >= len(script):
        return
    line = script[state.role_cursor]
    if line.speaker == "player" and line.ack_required:
        if _next_speaker(state) is None:
            _advance_role_line(state, effects)
        else:
            _emit_role_line(state, effects)
    elif line.speaker == "all" and line.ack_required:
        roster = _current_roll_call(state)
        if roster and all(pid in state.role_acked for pid in roster):
            _advance_role_line(state, effects)


def _on_cmd(state: SessionState, event: FacilitatorCmd, effects: list[Effect]) -> None:
    actor = state.players.get(event.actor_id)
    if actor is None or actor.role not in ("facilitator", "teacher"):
        _error(state, effects, event.actor_id, "not_allowed", "facilitator or teacher only")
        return
    action = event.action
    if action == "start":
        _cmd_start(state, event, effects)
    elif action == "pause":
        if state.paused or state.phase in ("Lobby", "Ended"):
            _error(state, effects, event.actor_id, "wrong_phase", "cannot pause now")
            return
        state.paused = True
        effects.append(Broadcast("phase_change", {"phase": state.phase, "paused": True}))
    elif action == "resume":
        if not state.paused:
            _error(state, effects, event.actor_id, "wrong_phase", "not paused")
            return
        state.paused = False
        effects.append(Broadcast("phase_change", {"phase": state.phase, "paused": False}))
    elif action == "skip_phase":
        if state.phase in ("Lobby", "Ended"):
            _error(state, effects, event.actor_id, "wrong_phase", "nothing to skip")
            return
        _force_complete(state, effects)
        if state.phase != "Ended":
            _enter_phase(state, next_phase(state.phase), effects)
            _maybe_advance(state, effects)
    elif action == "restore":
        _error(state, effects, event.actor_id, "not_allowed", "restore is handled by the host")
    else:
        _error(state, effects, event.actor_id, "not_allowed", f"unknown action '{action}'")


def _cmd_start(state: SessionState, event: FacilitatorCmd, effects: list[Effect]) -> None:
    if state.phase != "Lobby":
        _error(state, effects, event.actor_id, "wrong_phase", "session already started")
        return
    force = bool(event.args.get("force"))
    players = state.connected_players()
    if not force:
        if len(players) < state.scenario.min_players:
            _error(
                state,
                effects,
                event.actor_id,
                "not_allowed",
                f"need {state.scenario.min_players} players, have {len(players)}",
            )
            return
        if not state.connected_teachers():
            _error(state, effects, event.actor_id, "not_allowed", "no teacher connected")
            return
    if not players:
        _error(state, effects, event.actor_id, "not_allowed", "no players connected")
        return
    _enter_phase(state, "RegisterRoleplay", effects)
    _maybe_advance(state, effects)


def _gameplay_guard(state: SessionState, pid: str, effects: list[Effect]) -> PlayerState | None:
    player = state.players.get(pid)
    if player is None:
        effects.append(SendTo(pid, "error", {"code": "not_joined"}))
        return None
    if state.paused:
        _error(state, effects, pid, "paused")
        return None
    return player


def _on_role_ack(state: SessionState, event: RoleAck, effects: list[Effect]) -> None:
    player = _gameplay_guard(state, event.player_id, effects)
    if player is None:
        return
    if state.phase == "NotepadDiscovery":
        if player.role != "player":
            _error(state, effects, player.player_id, "not_allowed")
            return
        if player.notepad_ok:
            _error(state, effects, player.player_id, "duplicate")
            return
        player.notepad_ok = True
        _maybe_advance(state, effects)
        return
    if state.phase != "RegisterRoleplay":
        _error(state, effects, player.player_id, "wrong_phase")
        return
    script = state.scenario.roleplay_script
    if state.role_cursor >= len(script):
        _error(state, effects, player.player_id, "wrong_phase")
        return
    if event.line_index != state.role_cursor:
        _error(state, effects, player.player_id, "duplicate", "stale line")
        return
    line = script[state.role_cursor]
    if line.speaker == "teacher":
        if player.role != "teacher":
            _error(state, effects, player.player_id, "not_your_turn")
            return
        _advance_role_line(state, effects)
    elif line.speaker == "player":
        expected = _next_speaker(state)
        if expected is None:
            _advance_role_line(state, effects)
            return
        if player.player_id != expected:
            _error(state, effects, player.player_id, "not_your_turn")
            return
        state.role_acked.append(player.player_id)
        if _next_speaker(state) is None:
            _advance_role_line(state, effects)
        else:
            _emit_role_line(state, effects)
    else:  # all
        if player.role != "player":
            _error(state, effects, player.player_id, "not_allowed")
            return
        if player.player_id in state.role_acked:
            _error(state, effects, player.player_id, "duplicate")
            return
        state.role_acked.append(player.player_id)
        roster = _current_roll_call(state)
        if all(pid in state.role_acked for pid in roster):
            _advance_role_line(state, effects)


def _on_scan(state: SessionState, event: Scan, effects: list[Effect]) -> None:
    player = _gameplay_guard(state, event.player_id, effects)
    if player is None:
        return
    if state.phase not in ("IndividualDiscovery", "PairPuzzle"):
        _error(state, effects, player.player_id, "wrong_phase")
        return
    scn = state.scenario
    try:
        scn.marker(event.marker_id)
    except KeyError:
        _error(state, effects, player.player_id, "unknown_marker", event.marker_id)
        return
    if player.track is None:
        _error(state, effects, player.player_id, "wrong_marker", "no search plan")
        return
    plan = discovery_plan(scn, player.track)
    scanned = plan[: player.plan_index]
    if event.marker_id in scanned:
        _error(state, effects, player.player_id, "duplicate", "already scanned")
        return
    target = _plan_target(state, player)
    if target is None or target.marker_id != event.marker_id:
        if player.plan_index < len(plan) and plan[player.plan_index] == event.marker_id:
            # Right marker, but its pair-code gate has not opened yet.
            _error(state, effects, player.player_id, "wrong_marker", "still locked")
        else:
            _error(state, effects, player.player_id, "wrong_marker", "not your station")
        return
    artifact = _reveal_next(state, player, effects)
    if state.phase == "PairPuzzle" and player.unit_id is not None:
        unit = state.pair_units.get(player.unit_id)
        if (
            unit is not None
            and unit.unlocks_marker == artifact.marker_id
            and not unit.unlock_done
        ):
            unit.unlock_done = True
            _share_with_unit(state, unit, artifact, effects, skip=player.player_id)
    _maybe_advance(state, effects)


def _token_is_stale(state: SessionState, token: str) -> bool:
    return token in state.stale_tokens


def _on_proximity(state: SessionState, event: Proximity, effects: list[Effect]) -> None:
    player = _gameplay_guard(state, event.player_id, effects)
    if player is None:
        return
    token = normalize_token(event.token)
    if state.phase == "PairFormation":
        unit = state.pair_units.get(player.unit_id or "")
        if unit is None:
            _error(state, effects, player.player_id, "wrong_phase", "not in a pair")
            return
        if player.player_id == unit.sender_id:
            _error(state, effects, player.player_id, "not_your_turn", "you show your code")
            return
        if player.player_id in unit.confirmed:
            _error(state, effects, player.player_id, "duplicate")
            return
        if token != unit.token:
            if _token_is_stale(state, token):
                _error(state, effects, player.player_id, "stale_token")
            else:
                _error(state, effects, player.player_id, "wrong_partner")
            return
        unit.confirmed.append(player.player_id)
        if _unit_confirmed(state, unit):
            payload = {"unit_id": unit.unit_id, "members": _names(state, unit.member_ids)}
            for pid in unit.member_ids:
                _send(state, effects, pid, "pair_confirmed", payload)
        _maybe_advance(state, effects)
    elif state.phase == "GroupFormation":
        group = state.groups.get(player.group_id or "")
        if group is None:
            _error(state, effects, player.player_id, "wrong_phase", "not in a group")
            return
        if player.player_id == group.anchor_id:
            _error(state, effects, player.player_id, "not_your_turn", "you show your code")
            return
        if player.player_id in group.confirmed:
            _error(state, effects, player.player_id, "duplicate")
            return
        if token != group.token:
            if _token_is_stale(state, token):
                _error(state, effects, player.player_id, "stale_token")
            else:
                _error(state, effects, player.player_id, "wrong_partner")
            return
        group.confirmed.append(player.player_id)
        if _group_confirmed(state, group):
            payload = {"group_id": group.group_id, "members": _names(state, group.member_ids)}
            for pid in group.member_ids:
                _send(state, effects, pid, "group_confirmed", payload)
        _maybe_advance(state, effects)
    else:
        _error(state, effects, player.player_id, "wrong_phase")


def _on_puzzle_submit(state: SessionState, event: PuzzleSubmit, effects: list[Effect]) -> None:
    player = _gameplay_guard(state, event.player_id, effects)
    if player is None:
        return
    code = event.code.strip()
    if state.phase == "PairPuzzle":
        unit = state.pair_units.get(player.unit_id or "")
        if unit is None:
            _error(state, effects, player.player_id, "wrong_phase", "not in a pair")
            return
        if unit.code_accepted:
            _error(state, effects, player.player_id, "duplicate", "already solved")
            return
        entry = _unit_entry(state, unit)
        if entry is not None and code == entry.code:
            unit.code_accepted = True
            unit.unlocks_marker = entry.unlocks_marker
            already = any(
                entry.unlocks_marker == state.scenario.artifact(aid).marker_id
                for pid in unit.member_ids
                if pid in state.players
                for aid in state.players[pid].found
            )
            if already:
                unit.unlock_done = True
            payload = {
                "unit_id": unit.unit_id,
                "accepted": True,
                "code": code,
                "unlocks": _marker_payload(state, entry.unlocks_marker),
            }
            for pid in unit.member_ids:
                _send(state, effects, pid, "puzzle_result", payload)
            for pid in unit.member_ids:
                member = state.players.get(pid)
                if member is None or member.track is None:
                    continue
                target = _plan_target(state, member)
                if target is not None and target.marker_id == entry.unlocks_marker:
                    _send(state, effects, pid, "notepad", _notepad_payload(state, member))
            _maybe_advance(state, effects)
            return
        unit.attempts += 1
        _error(state, effects, player.player_id, "bad_code", f"attempt {unit.attempts}")
        if unit.attempts == PUZZLE_NUDGE_ATTEMPTS:
            _nudge(state, effects, "PairPuzzle", unit.member_ids)
    elif state.phase == "GroupPuzzle":
        group = state.groups.get(player.group_id or "")
        if group is None:
            _error(state, effects, player.player_id, "wrong_phase", "not in a group")
            return
        if group.solved:
            _error(state, effects, player.player_id, "duplicate", "already solved")
            return
        task = _group_task(state, group)
        if code == task.answer_code:
            group.solved = True
            payload = {"group_id": group.group_id, "accepted": True, "code": code}
            for pid in group.member_ids:
                _send(state, effects, pid, "puzzle_result", payload)
            _maybe_advance(state, effects)
            return
        group.attempts += 1
        _error(state, effects, player.player_id, "bad_code", f"attempt {group.attempts}")
        if group.attempts == PUZZLE_NUDGE_ATTEMPTS:
            _nudge(state, effects, "GroupPuzzle", group.member_ids)
    else:
        _error(state, effects, player.player_id, "wrong_phase")


def _nudge(state: SessionState, effects: list[Effect], phase: str, member_ids: list[str]) -> None:
    policy = state.scenario.hint_entry(phase)
    if policy is None or not policy.hints:
        return
    payload = {"phase": phase, "index": 0, "text": policy.hints[0], "reason": "attempts"}
    for pid in member_ids:
        _send(state, effects, pid, "hint", payload)


def _on_share_done(state: SessionState, event: TeacherShareDone, effects: list[Effect]) -> None:
    actor = state.players.get(event.actor_id)
    if actor is None:
        effects.append(SendTo(event.actor_id, "error", {"code": "not_joined"}))
        return
    if state.paused:
        _error(state, effects, event.actor_id, "paused")
        return
    if actor.role != "teacher":
        _error(state, effects, event.actor_id, "not_allowed", "teacher only")
        return
    if state.phase != "TeacherShare":
        _error(state, effects, event.actor_id, "wrong_phase")
        return
    if event.group_id not in state.groups:
        _error(state, effects, event.actor_id, "not_allowed", f"unknown group '{event.group_id}'")
        return
    if event.group_id in state.share_visited:
        _error(state, effects, event.actor_id, "duplicate")
        return
    state.share_visited.append(event.group_id)
    _reveal_teacher_fragment(state, effects)
    effects.append(
        Broadcast(
            "share_progress",
            {"groups_done": len(state.share_visited), "groups_total": len(state.groups)},
        )
    )
    _maybe_advance(state, effects)


def _reveal_teacher_fragment(state: SessionState, effects: list[Effect]) -> None:
    scn = state.scenario
    remaining = [fid for fid in scn.teacher_fragments if fid not in state.share_revealed]
    if not remaining:
        return
    fid = remaining[0]
    state.share_revealed.append(fid)
    payload = {
        "fragment_id": fid,
        "text": _frag_text(scn, fid),
        "remaining": len(remaining) - 1,
    }
    for teacher in state.connected_teachers():
        _send(state, effects, teacher.player_id, "teacher_share", payload)


def _on_challenge_scan(state: SessionState, event: ChallengeScan, effects: list[Effect]) -> None:
    player = _gameplay_guard(state, event.player_id, effects)
    if player is None:
        return
    if state.phase != "TimedChallenge":
        _error(state, effects, player.player_id, "wrong_phase")
        return
    scn = state.scenario
    try:
        scn.marker(event.marker_id)
    except KeyError:
        _error(state, effects, player.player_id, "unknown_marker", event.marker_id)
        return
    newly = event.marker_id not in state.challenge_counts
    state.challenge_counts[event.marker_id] = state.challenge_counts.get(event.marker_id, 0) + 1
    total = len(scn.markers)
    covered = len(state.challenge_counts)
    if newly:
        effects.append(Broadcast("challenge_progress", {"covered": covered, "total": total}))
    if covered >= total and not state.challenge_done:
        state.challenge_done = True
        if "challenge" in state.timers:
            del state.timers["challenge"]
            effects.append(CancelTimer("challenge"))
        effects.append(
            Broadcast(
                "challenge_result",
                {"complete": True, "covered": covered, "total": total, "encouragement": False},
            )
        )
        _maybe_advance(state, effects)


def _on_read_done(state: SessionState, event: ReadDone, effects: list[Effect]) -> None:
    player = _gameplay_guard(state, event.player_id, effects)
    if player is None:
        return
    if state.phase != "DiaryCircle":
        _error(state, effects, player.player_id, "wrong_phase")
        return
    if event.order != state.read_cursor:
        _error(state, effects, player.player_id, "not_your_turn", "out of order")
        return
    holder = _diary_holder(state, state.read_cursor)
    if holder is None or holder.player_id != player.player_id:
        _error(state, effects, player.player_id, "not_your_turn")
        return
    state.read_cursor += 1
    if state.read_cursor >= _total_pages(state):
        _maybe_advance(state, effects)
    else:
        _emit_read_turn(state, effects)


def _on_timer_fired(state: SessionState, event: TimerFired, effects: list[Effect]) -> None:
    fire_at = state.timers.pop(event.timer_id, None)
    if fire_at is None:
        return
    if event.timer_id == "challenge":
        if state.phase != "TimedChallenge" or state.challenge_done:
            return
        total = len(state.scenario.markers)
        covered = len(state.challenge_counts)
        state.challenge_done = True
        effects.append(
            Broadcast(
                "challenge_result",
                {"complete": False, "covered": covered, "total": total, "encouragement": True},
            )
        )
        _maybe_advance(state, effects)
        return
    if event.timer_id.startswith("hint:"):
        _, phase, index = event.timer_id.split(":")
        if phase != state.phase:
            return
        policy = state.scenario.hint_entry(phase)
        if policy is None:
            return
        i = int(index)
        if i < len(policy.hints):
            effects.append(
                Broadcast("hint", {"phase": phase, "index": i, "text": policy.hints[i], "reason": "time"})
            )


def _on_clock(state: SessionState, event: ClockAdvance, effects: list[Effect]) -> None:
    if event.now_ms <= state.now_ms:
        return
    if state.paused:
        # Absorb the elapsed time: pending timers keep their remaining
        # durations, so a pause never eats into challenge or hint windows.
        delta = event.now_ms - state.now_ms
        for timer_id in state.timers:
            state.timers[timer_id] += delta
    state.now_ms = event.now_ms


_HANDLERS: dict[str, Callable[[SessionState, Any, list[Effect]], None]] = {
    "join": _on_join,
    "leave": _on_leave,
    "cmd": _on_cmd,
    "role_ack": _on_role_ack,
    "scan": _on_scan,
    "proximity": _on_proximity,
    "puzzle_submit": _on_puzzle_submit,
    "teacher_share_done": _on_share_done,
    "challenge_scan": _on_challenge_scan,
    "read_done": _on_read_done,
    "timer_fired": _on_timer_fired,
    "clock": _on_clock,
}


# ---------------------------------------------------------------------------
# Skip support


def _force_complete(state: SessionState, effects: list[Effect]) -> None:
    """Fulfil the current phase's obligations so later phases stay solvable."""
    phase = state.phase
    if phase == "RegisterRoleplay":
        state.role_cursor = len(state.scenario.roleplay_script)
    elif phase == "NotepadDiscovery":
        for p in state.connected_players():
            p.notepad_ok = True
    elif phase == "IndividualDiscovery":
        for p in state.connected_players():
            _grant_solo(state, p, effects)
    elif phase == "PairFormation":
        for unit in _units_in_order(state):
            for pid in unit.receiver_ids:
                if pid not in unit.confirmed:
                    unit.confirmed.append(pid)
    elif phase == "PairPuzzle":
        for unit in _units_in_order(state):
            if not unit.code_accepted:
                entry = _unit_entry(state, unit)
                unit.code_accepted = True
                if entry is not None:
                    unit.unlocks_marker = entry.unlocks_marker
            if not unit.unlock_done and unit.unlocks_marker is not None:
                for pid in unit.member_ids:
                    member = state.players.get(pid)
                    if member is None:
                        continue
                    target = _plan_target(state, member)
                    if target is not None and target.marker_id == unit.unlocks_marker:
                        artifact = _reveal_next(state, member, effects)
                        _share_with_unit(state, unit, artifact, effects, skip=pid)
                        break
            unit.unlock_done = True
    elif phase == "GroupFormation":
        for group in _groups_in_order(state):
            for pid in group.member_ids[1:]:
                if pid not in group.confirmed:
                    group.confirmed.append(pid)
    elif phase == "GroupPuzzle":
        for group in _groups_in_order(state):
            group.solved = True
    elif phase == "TeacherShare":
        for gid in sorted(state.groups):
            if gid not in state.share_visited:
                state.share_visited.append(gid)
                _reveal_teacher_fragment(state, effects)
    elif phase == "TimedChallenge":
        state.challenge_done = True
        if "challenge" in state.timers:
            del state.timers["challenge"]
            effects.append(CancelTimer("challenge"))
    elif phase == "DiaryCircle":
        state.read_cursor = _total_pages(state)


# ---------------------------------------------------------------------------
# Reconnect catch-up


def context_effects(state: SessionState, player_id: str) -> list[Effect]:
    """Everything a (re)connecting client needs to render the current phase.

    Only information the player is already entitled to is included, so a
    reconnect can never become an information leak.
    """
    player = state.players.get(player_id)
    if player is None or not player.connected:
        return []
    effects: list[Effect] = []
    effects.append(SendTo(player_id, "roster", _roster_payload(state)))
    scn = state.scenario
    for aid in player.revealed:
        artifact = scn.artifact(aid)
        nxt = _plan_target(state, player) if aid == (player.found[-1] if player.found else None) else None
        effects.append(SendTo(player_id, "discovery", _discovery_payload(state, artifact, nxt)))
    phase = state.phase
    if phase == "RegisterRoleplay":
        script = scn.roleplay_script
        if state.role_cursor < len(script):
            line = script[state.role_cursor]
            payload: dict[str, Any] = {
                "line_index": state.role_cursor,
                "speaker": line.speaker,
                "text": line.prompt_text,
                "ack_required": line.ack_required,
            }
            if line.speaker == "player" and line.ack_required:
                speaker_id = _next_speaker(state)
                if speaker_id is not None:
                    payload["speaker_id"] = speaker_id
            effects.append(SendTo(player_id, "role_prompt", payload))
    elif phase in ("NotepadDiscovery", "IndividualDiscovery") and player.role == "player":
        if player.track is not None:
            effects.append(SendTo(player_id, "notepad", _notepad_payload(state, player)))
    elif phase in ("PairFormation", "PairPuzzle") and player.unit_id in state.pair_units:
        unit = state.pair_units[player.unit_id]
        payload = {
            "unit_id": unit.unit_id,
            "role": "sender" if player_id == unit.sender_id else "receiver",
            "partners": _names(state, [m for m in unit.member_ids if m != player_id]),
        }
        if player_id == unit.sender_id:
            payload["token"] = unit.token
        effects.append(SendTo(player_id, "pair_assign", payload))
        if phase == "PairPuzzle":
            entry = _unit_entry(state, unit)
            code_length = len(entry.code) if entry else 0
            effects.append(
                SendTo(
                    player_id,
                    "puzzle_task",
                    {"kind": "pair", "unit_id": unit.unit_id, "code_length": code_length},
                )
            )
            if unit.code_accepted and unit.unlocks_marker:
                effects.append(
                    SendTo(
                        player_id,
                        "puzzle_result",
                        {
                            "unit_id": unit.unit_id,
                            "accepted": True,
                            "code": entry.code if entry else "",
                            "unlocks": _marker_payload(state, unit.unlocks_marker),
                        },
                    )
                )
    elif phase in ("GroupFormation", "GroupPuzzle") and player.group_id in state.groups:
        group = state.groups[player.group_id]
        payload = {
            "group_id": group.group_id,
            "role": "anchor" if player_id == group.anchor_id else "member",
            "members": _names(state, group.member_ids),
            "anchor_id": group.anchor_id,
        }
        if player_id == group.anchor_id:
            payload["token"] = group.token
        effects.append(SendTo(player_id, "group_assign", payload))
        if phase == "GroupPuzzle" and group.task_id is not None:
            task = _group_task(state, group)
            effects.append(
                SendTo(
                    player_id,
                    "puzzle_task",
                    {
                        "kind": "group",
                        "group_id": group.group_id,
                        "task_id": task.task_id,
                        "prompt_text": task.prompt_text,
                        "code_length": len(task.answer_code),
                    },
                )
            )
    elif phase == "TeacherShare":
        effects.append(
            SendTo(
                player_id,
                "share_progress",
                {"groups_done": len(state.share_visited), "groups_total": len(state.groups)},
            )
        )
        if player.role == "teacher":
            for fid in state.share_revealed:
                effects.append(
                    SendTo(
                        player_id,
                        "teacher_share",
                        {"fragment_id": fid, "text": _frag_text(scn, fid), "remaining": 0},
                    )
                )
    elif phase == "TimedChallenge":
        remaining = 0
        if state.challenge_deadline is not None:
            remaining = max(0, state.challenge_deadline - state.now_ms)
        effects.append(
            SendTo(
                player_id,
                "challenge_start",
                {
                    "seconds": remaining // 1000,
                    "markers_total": len(scn.markers),
                },
            )
        )
        effects.append(
            SendTo(
                player_id,
                "challenge_progress",
                {"covered": len(state.challenge_counts), "total": len(scn.markers)},
            )
        )
    elif phase == "DiaryCircle":
        if player.pages:
            effects.append(
                SendTo(
                    player_id,
                    "diary_page",
                    {"pages": [{"order": o, "text": _page_text(state, o)} for o in player.pages]},
                )
            )
        if state.read_cursor < _total_pages(state):
            holder = _diary_holder(state, state.read_cursor)
            if holder is not None:
                effects.append(
                    SendTo(
                        player_id,
                        "read_turn",
                        {
                            "order": state.read_cursor,
                            "holder_id": holder.player_id,
                            "holder_name": holder.name,
                        },
                    )
                )
    elif phase == "Discussion" and player.role == "teacher":
        effects.append(
            SendTo(player_id, "discussion_prompts", {"prompts": list(scn.discussion_prompts)})
        )
    elif phase == "Ended":
        effects.append(SendTo(player_id, "session_ended", {"summary": _session_summary(state)}))
    return effects


def resync_view(state: SessionState, player_id: str) -> list[Effect]:
    """Full catch-up for a live client: a welcome frame plus phase context.

    Hosts use this when a client needs the whole picture outside of a
    Join event, for example after a superseding connection or a state
    restore.
    """
    player = state.players.get(player_id)
    if player is None or not player.connected:
        return []
    welcome = SendTo(player_id, "welcome", _welcome_payload(state, player, True))
    return [welcome, *context_effects(state, player_id)]
