"""Discrete-event simulation of whole sessions with scripted participants.

A Simulation owns a SessionDriver (the same event pump a network host
uses), a virtual millisecond clock, and a cast of bots: a facilitator, a
teacher, and n player bots with behavior profiles.  Bots react to the
frames the engine addresses to them exactly as real clients would; the
only extra channel is the room "whiteboard" where a sender's pairing
token becomes audible to its receivers, standing in for a code read
aloud across a classroom.

Everything is deterministic in (scenario, n_players, seed, profiles):
the same inputs always produce the same event log, the same transcript
digest, and the same final state.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .engine import (
    Broadcast,
    ChallengeScan,
    ClockAdvance,
    Effect,
    Event,
    FacilitatorCmd,
    Join,
    Leave,
    NoMatchingEntry,
    Proximity,
    PuzzleSubmit,
    ReadDone,
    RoleAck,
    Scan,
    SendTo,
    SessionState,
    TeacherShareDone,
    TimerFired,
    WriteCheckpoint,
    bind_scenario,
    derive_pair_code,
    effect_to_dict,
    event_to_dict,
    handle_event,
    new_session,
    phase_index,
)
from .protocol import canonical_json
from .scenario import (
    Scenario,
    individual_artifact_set,
    individual_plan,
    matching_entries,
)

NAMES = (
    "Alex", "Bela", "Chris", "Dana", "Emil", "Fei", "Gala", "Hana", "Iva", "Jona",
    "Kim", "Lea", "Mio", "Nora", "Omar", "Pia", "Quinn", "Rami", "Sara", "Timo",
    "Uma", "Vera", "Wim", "Xenia", "Yara", "Zoe", "Arun", "Bente", "Ciro", "Dilara",
    "Enes", "Fritzi", "Gero", "Hilde", "Ilias", "Jule", "Kenan", "Lotte", "Mats", "Nina",
)


class SessionDriver:
    """Event pump around the engine: applies events, fires due timers.

    The driver is the single place that turns armed timers into
    TimerFired events, in (due time, timer id) order, so every host
    shares one notion of timer delivery.  A rolling sha256 digest over
    (event, effects) pairs identifies a run; replaying the recorded
    event log with auto_timers=False reproduces it bit for bit.
    """

    def __init__(
        self,
        scenario: Scenario,
        session_id: str,
        seed: int,
        *,
        keep_transcript: bool = False,
        auto_timers: bool = True,
    ) -> None:
        self.scenario = scenario
        self.state: SessionState = new_session(scenario, session_id, seed)
        self.keep_transcript = keep_transcript
        self.auto_timers = auto_timers
        self.events: list[Event] = []
        self.transcript: list[dict[str, Any]] = []
        self._digest = hashlib.sha256()

    @classmethod
    def resume(
        cls,
        scenario: Scenario,
        state: SessionState,
        *,
        keep_transcript: bool = False,
        auto_timers: bool = True,
    ) -> SessionDriver:
        """Continue from a restored state (for example a checkpoint)."""
        driver = cls.__new__(cls)
        driver.scenario = scenario
        driver.state = state
        driver.keep_transcript = keep_transcript
        driver.auto_timers = auto_timers
        driver.events = []
        driver.transcript = []
        driver._digest = hashlib.sha256()
        return driver

    def dispatch(self, event: Event) -> list[Effect]:
        effects = self._apply(event)
        if self.auto_timers:
            effects = effects + self._drain_due_timers()
        return effects

    def advance_clock(self, now_ms: int) -> list[Effect]:
        return self.dispatch(ClockAdvance(now_ms))

    def next_timer_at(self) -> int | None:
        return min(self.state.timers.values()) if self.state.timers else None

    def digest(self) -> str:
        return self._digest.hexdigest()

    def _apply(self, event: Event) -> list[Effect]:
        effects = handle_event(self.state, event)
        entry = {
            "event": event_to_dict(event),
            "effects": [effect_to_dict(e) for e in effects],
        }
        self._digest.update(canonical_json(entry).encode("ascii"))
        self._digest.update(b"\n")
        self.events.append(event)
        if self.keep_transcript:
            self.transcript.append(entry)
        return effects

    def _drain_due_timers(self) -> list[Effect]:
        out: list[Effect] = []
        while not self.state.paused:
            due = sorted(
                (fire_at, tid)
                for tid, fire_at in self.state.timers.items()
                if fire_at <= self.state.now_ms
            )
            if not due:
                break
            out.extend(self._apply(TimerFired(due[0][1])))
        return out


def replay_log(
    scenario: Scenario, session_id: str, seed: int, events: Iterable[Event]
) -> SessionDriver:
    """Re-run a recorded event log; timers come from the log itself."""
    driver = SessionDriver(scenario, session_id, seed, auto_timers=False)
    for event in events:
        driver.dispatch(event)
    return driver


# ---------------------------------------------------------------------------
# Profiles


@dataclass(frozen=True)
class BotProfile:
    kind: str = "compliant"  # compliant | slow | dropper | wrong_scanner
    speed: float = 1.0
    drop_phase: str | None = None
    rejoin_ms: int | None = 45_000


def profile_mix(
    n: int,
    slow: int = 0,
    dropper: int = 0,
    wrong_scanner: int = 0,
    drop_phase: str = "IndividualDiscovery",
    rejoin_ms: int | None = 45_000,
) -> list[BotProfile]:
    """Profiles for n players: deviants fill from the back of the roster."""
    profiles = [BotProfile() for _ in range(n)]
    i = n - 1
    for _ in range(min(slow, max(i, 0))):
        profiles[i] = BotProfile("slow", speed=3.0)
        i -= 1
    for _ in range(min(dropper, max(i, 0))):
        profiles[i] = BotProfile("dropper", drop_phase=drop_phase, rejoin_ms=rejoin_ms)
        i -= 1
    for _ in range(min(wrong_scanner, max(i, 0))):
        profiles[i] = BotProfile("wrong_scanner")
        i -= 1
    return profiles


# ---------------------------------------------------------------------------
# Metrics and results


@dataclass
class SimMetrics:
    duration_ms: int = 0
    events: int = 0
    errors: dict[str, int] = field(default_factory=dict)
    hints: int = 0
    checkpoints: int = 0
    phase_entered: dict[str, int] = field(default_factory=dict)
    idle_ms_total: int = 0
    idle_ms_max: int = 0
    idle_samples: int = 0

    @property
    def idle_ms_mean(self) -> float:
        return self.idle_ms_total / self.idle_samples if self.idle_samples else 0.0


@dataclass
class InvariantReport:
    """Live invariant checks, sampled at the phase boundaries that define them.

    None means the defining moment never occurred (the run stalled first);
    a completed run sets every field.
    """

    equal_start: bool | None = None
    complementarity: bool | None = None
    coverage: bool | None = None
    diary_order: bool | None = None
    no_leak: bool | None = None
    derive_total: bool | None = None
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(
            check is False
            for check in (
                self.equal_start,
                self.complementarity,
                self.coverage,
                self.diary_order,
                self.no_leak,
                self.derive_total,
            )
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "EQUAL-START": self.equal_start,
            "COMPLEMENTARITY": self.complementarity,
            "COVERAGE": self.coverage,
            "DIARY-ORDER": self.diary_order,
            "NO-LEAK": self.no_leak,
            "PAIR-DERIVE": self.derive_total,
        }


@dataclass
class SimResult:
    ok: bool
    ended: bool
    deadlock: bool
    blocking: str
    digest: str
    final_phase: str
    metrics: SimMetrics
    invariants: InvariantReport
    checkpoint_ok: bool | None
    driver: SessionDriver

    def summary(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "final_phase": self.final_phase,
            "deadlock": self.deadlock,
            "blocking": self.blocking,
            "digest": self.digest,
            "duration_ms": self.metrics.duration_ms,
            "events": self.metrics.events,
            "errors": dict(sorted(self.metrics.errors.items())),
            "hints": self.metrics.hints,
            "checkpoints": self.metrics.checkpoints,
            "idle_ms_mean": round(self.metrics.idle_ms_mean, 1),
            "idle_ms_max": self.metrics.idle_ms_max,
            "invariants": self.invariants.to_dict(),
            "checkpoint_ok": self.checkpoint_ok,
        }


# ---------------------------------------------------------------------------
# Bots


class Bot:
    def __init__(self, sim: Simulation, player_id: str, name: str, role: str, profile: BotProfile):
        self.sim = sim
        self.player_id = player_id
        self.name = name
        self.role = role
        self.profile = profile
        self.rng = random.Random(f"{sim.seed}:bot:{player_id}")
        self.connected = False
        self.phase = "Lobby"
        self.unit_id: str | None = None
        self.pair_role = "receiver"
        self.group_id: str | None = None
        self.group_role = "member"
        self.pending_target: str | None = None
        self.scan_scheduled: set[str] = set()
        self.once: set[tuple] = set()
        self.read_scheduled: set[int] = set()
        self.dropped = False

    # -- plumbing ----------------------------------------------------------

    def delay(self, lo: int = 1200, hi: int = 4000) -> int:
        return int(self.rng.uniform(lo, hi) * self.profile.speed)

    def later(self, delay_ms: int, fn: Callable[[], None]) -> None:
        bot = self

        def guarded() -> None:
            if bot.connected:
                fn()

        self.sim.schedule(self.sim.now + delay_ms, guarded)

    def play(self, event: Event) -> None:
        """Submit a gameplay event, politely waiting out a pause."""
        if self.sim.driver.state.paused:
            self.later(2000, lambda: self.play(event))
            return
        self.sim.submit(event)

    def first_time(self, *key: Any) -> bool:
        if key in self.once:
            return False
        self.once.add(key)
        return True

    # -- lifecycle ---------------------------------------------------------

    def join(self) -> None:
        self.connected = True
        self.sim.submit(Join(self.player_id, self.name, self.role))

    def leave(self) -> None:
        self.connected = False
        self.sim.submit(Leave(self.player_id))

    def schedule_drop(self) -> None:
        drop_in = self.delay(3000, 8000)
        self.later(drop_in, self.leave)
        if self.profile.rejoin_ms is not None:
            rejoin_at = self.sim.now + drop_in + self.profile.rejoin_ms
            bot = self

            def rejoin() -> None:
                # Anything scheduled before the drop was swallowed by the
                # connected guard, so resent tasks must fire fresh.
                bot.scan_scheduled.clear()
                bot.once = {k for k in bot.once if k[0] == "line"}
                bot.read_scheduled.clear()
                bot.join()

            self.sim.schedule(rejoin_at, rejoin)

    # -- message handling --------------------------------------------------

    def on_message(self, type_: str, payload: dict[str, Any]) -> None:
        handler = getattr(self, f"_on_{type_}", None)
        if handler is not None:
            handler(payload)

    def _on_welcome(self, p: dict) -> None:
        self.phase = p["phase"]

    def _on_phase_change(self, p: dict) -> None:
        entered = p["phase"] != self.phase
        self.phase = p["phase"]
        if not entered:
            return
        if (
            self.profile.kind == "dropper"
            and self.role == "player"
            and not self.dropped
            and self.phase == self.profile.drop_phase
        ):
            self.dropped = True
            self.schedule_drop()
        if self.phase == "IndividualDiscovery" and self.pending_target:
            self._schedule_scan(self.pending_target)
        if self.phase == "Discussion" and self.role == "facilitator":
            self.later(
                self.delay(3000, 6000),
                lambda: self.play(FacilitatorCmd(self.player_id, "skip_phase")),
            )

    def _on_role_prompt(self, p: dict) -> None:
        if not p.get("ack_required", True):
            return
        line = p["line_index"]
        ack = RoleAck(self.player_id, line)
        if p["speaker"] == "teacher":
            if self.role == "teacher" and self.first_time("line", line):
                self.later(self.delay(1500, 3500), lambda: self.play(ack))
        elif p["speaker"] == "player":
            if p.get("speaker_id") == self.player_id:
                bot = self

                def speak() -> None:
                    # The roster may have changed while we waited our turn.
                    state = bot.sim.driver.state
                    expected = next(
                        (
                            q.player_id
                            for q in state.connected_players()
                            if q.player_id not in state.role_acked
                        ),
                        None,
                    )
                    if expected == bot.player_id:
                        bot.play(ack)

                self.later(self.delay(1000, 2500), speak)
        else:  # all
            if self.role == "player" and self.first_time("line", line):
                self.later(self.delay(1500, 3500), lambda: self.play(ack))

    def _on_notepad(self, p: dict) -> None:
        target = p.get("target")
        self.pending_target = target["marker_id"] if target else None
        if self.phase == "NotepadDiscovery" and self.first_time("notepad"):
            self.later(self.delay(800, 2000), lambda: self.play(RoleAck(self.player_id, 0)))
        if self.phase in ("IndividualDiscovery", "PairPuzzle") and self.pending_target:
            self._schedule_scan(self.pending_target)

    def _schedule_scan(self, marker_id: str) -> None:
        if marker_id in self.scan_scheduled:
            return
        self.scan_scheduled.add(marker_id)
        bot = self

        def fire(marker: str) -> None:
            # The scanner closes outside discovery, and a station someone
            # already unlocked for us needs no second visit.
            if bot.phase not in ("IndividualDiscovery", "PairPuzzle"):
                return
            artifact = bot.sim.scenario.artifact_at_marker(marker)
            me = bot.sim.driver.state.players.get(bot.player_id)
            if artifact is not None and me is not None and artifact.artifact_id in me.found:
                return
            bot.play(Scan(bot.player_id, marker))

        walk = self.delay(2000, 6000)
        if self.profile.kind == "wrong_scanner":
            others = [m.marker_id for m in self.sim.scenario.markers if m.marker_id != marker_id]
            wrong = self.rng.choice(others)
            self.later(walk, lambda: self.play(Scan(self.player_id, wrong)))
            walk += self.delay(1000, 2000)
        self.later(walk, lambda: fire(marker_id))

    def _on_discovery(self, p: dict) -> None:
        target = p.get("next_target")
        if target and self.phase in ("IndividualDiscovery", "PairPuzzle"):
            self.pending_target = target["marker_id"]
            self._schedule_scan(self.pending_target)

    def _on_pair_assign(self, p: dict) -> None:
        self.unit_id = p["unit_id"]
        self.pair_role = p["role"]
        if self.pair_role == "sender":
            self.sim.whiteboard[self.unit_id] = p["token"]
        elif self.phase == "PairFormation" and self.first_time("pair_try", self.unit_id):
            self._try_proximity(self.unit_id, attempt=0, garble=self.profile.kind == "wrong_scanner")

    def _try_proximity(self, unit_id: str, attempt: int, garble: bool) -> None:
        bot = self

        def fire() -> None:
            if bot.unit_id != unit_id or attempt > 30:
                return
            token = bot.sim.whiteboard.get(unit_id)
            if token is None:
                bot._try_proximity(unit_id, attempt + 1, garble)
                return
            if garble:
                bot.play(Proximity(bot.player_id, token[::-1]))
                bot._try_proximity(unit_id, attempt + 1, garble=False)
                return
            bot.play(Proximity(bot.player_id, token))

        self.later(self.delay(1500, 4000) if attempt == 0 else 800, fire)

    def _on_puzzle_task(self, p: dict) -> None:
        if p["kind"] == "pair":
            if self.pair_role == "sender" and self.first_time("pair_code", p["unit_id"]):
                self._submit_pair_code(p["unit_id"], wrong_first=self.profile.kind == "wrong_scanner")
        else:
            if self.group_role == "anchor" and self.first_time("group_code", p["group_id"]):
                self._submit_group_code(p["group_id"], wrong_first=self.profile.kind == "wrong_scanner")

    def _submit_pair_code(self, unit_id: str, wrong_first: bool, attempt: int = 0) -> None:
        bot = self

        def fire() -> None:
            if bot.unit_id != unit_id or attempt > 30:
                return
            code = bot.sim.pair_code(unit_id)
            if code is None:
                bot._submit_pair_code(unit_id, wrong_first, attempt + 1)
                return
            if wrong_first:
                bot.play(PuzzleSubmit(bot.player_id, "0" * len(code)))
                bot.later(bot.delay(800, 1500), lambda: bot.play(PuzzleSubmit(bot.player_id, code)))
                return
            bot.play(PuzzleSubmit(bot.player_id, code))

        self.later(self.delay(4000, 9000) if attempt == 0 else 1500, fire)

    def _submit_group_code(self, group_id: str, wrong_first: bool, attempt: int = 0) -> None:
        bot = self

        def fire() -> None:
            if bot.group_id != group_id or attempt > 30:
                return
            code = bot.sim.group_answer(group_id)
            if code is None:
                bot._submit_group_code(group_id, wrong_first, attempt + 1)
                return
            if wrong_first:
                bot.play(PuzzleSubmit(bot.player_id, "0" * len(code)))
                bot.later(bot.delay(800, 1500), lambda: bot.play(PuzzleSubmit(bot.player_id, code)))
                return
            bot.play(PuzzleSubmit(bot.player_id, code))

        self.later(self.delay(5000, 12000) if attempt == 0 else 1500, fire)

    def _on_group_assign(self, p: dict) -> None:
        self.group_id = p["group_id"]
        self.group_role = p["role"]
        if self.group_role == "anchor":
            self.sim.whiteboard[self.group_id] = p["token"]
        elif self.phase == "GroupFormation" and self.first_time("group_try", self.group_id):
            self._try_group_proximity(self.group_id, attempt=0)

    def _try_group_proximity(self, group_id: str, attempt: int) -> None:
        bot = self

        def fire() -> None:
            if bot.group_id != group_id or attempt > 30:
                return
            token = bot.sim.whiteboard.get(group_id)
            if token is None:
                bot._try_group_proximity(group_id, attempt + 1)
                return
            bot.play(Proximity(bot.player_id, token))

        self.later(self.delay(1500, 4000) if attempt == 0 else 800, fire)

    def _on_share_progress(self, p: dict) -> None:
        if self.role != "teacher" or self.phase != "TeacherShare":
            return
        if not self.first_time("share_round"):
            return
        at = 0
        for gid in sorted(self.sim.driver.state.groups):
            at += self.delay(2000, 4500)
            self.later(at, lambda g=gid: self.play(TeacherShareDone(self.player_id, g)))

    def _on_challenge_start(self, p: dict) -> None:
        if self.role != "player" or not self.first_time("challenge"):
            return
        at = 0
        for marker_id in self.sim.challenge_assignment(self.player_id):
            at += self.delay(1200, 3000)
            self.later(at, lambda m=marker_id: self.play(ChallengeScan(self.player_id, m)))

    def _on_read_turn(self, p: dict) -> None:
        if p["holder_id"] != self.player_id or p["order"] in self.read_scheduled:
            return
        self.read_scheduled.add(p["order"])
        order = p["order"]
        bot = self

        def fire() -> None:
            state = bot.sim.driver.state
            holder = None
            for pid in state.join_order:
                if order in state.players[pid].pages:
                    holder = pid
                    break
            if state.read_cursor == order and holder == bot.player_id:
                bot.play(ReadDone(bot.player_id, order))

        self.later(self.delay(2500, 6000), fire)


class FacilitatorBot(Bot):
    """Starts the session and can inject pause windows per phase."""

    def __init__(self, sim: Simulation, player_id: str, name: str, pauses: dict[str, tuple[int, int]]):
        super().__init__(sim, player_id, name, "facilitator", BotProfile())
        self.pauses = pauses

    def start_session(self, force: bool) -> None:
        args = {"force": True} if force else {}
        self.sim.submit(FacilitatorCmd(self.player_id, "start", args))

    def _on_phase_change(self, p: dict) -> None:
        super()._on_phase_change(p)
        window = self.pauses.get(p["phase"])
        if window and self.first_time("pause", p["phase"]):
            offset, duration = window
            self.later(offset, lambda: self.sim.submit(FacilitatorCmd(self.player_id, "pause")))
            self.later(
                offset + duration,
                lambda: self.sim.submit(FacilitatorCmd(self.player_id, "resume")),
            )


# ---------------------------------------------------------------------------
# Simulation

BARRIER_PHASES = (
    "NotepadDiscovery",
    "IndividualDiscovery",
    "PairFormation",
    "PairPuzzle",
    "GroupFormation",
    "GroupPuzzle",
    "DiaryCircle",
)


class Simulation:
    def __init__(
        self,
        scenario: Scenario,
        n_players: int,
        seed: int,
        *,
        profiles: list[BotProfile] | None = None,
        pauses: dict[str, tuple[int, int]] | None = None,
        keep_transcript: bool = False,
        verify_checkpoints: bool = False,
        max_virtual_ms: int = 6 * 3600 * 1000,
    ) -> None:
        self.scenario = scenario
        self.seed = seed
        self.max_virtual_ms = max_virtual_ms
        self.verify_checkpoints = verify_checkpoints
        self.driver = SessionDriver(
            scenario, f"sim-{seed:04d}", seed, keep_transcript=keep_transcript
        )
        self.queue: list[tuple[int, int, Callable[[], None]]] = []
        self._order = itertools.count()
        self.whiteboard: dict[str, str] = {}
        self.metrics = SimMetrics()
        self.invariants = InvariantReport()
        self._challenge_plan: dict[str, list[str]] | None = None
        self._idle_phase: str | None = None
        self._idle_done_at: dict[str, int] = {}
        self._inv_phase = "Lobby"
        self._snapshots: list[tuple[int, dict[str, Any]]] = []

        profiles = profiles or [BotProfile() for _ in range(n_players)]
        if len(profiles) != n_players:
            raise ValueError("need one profile per player")
        self.bots: dict[str, Bot] = {}
        facilitator = FacilitatorBot(self, "fac", "Facilitator", pauses or {})
        self.bots["fac"] = facilitator
        self.bots["teach"] = Bot(self, "teach", "Ms. Keller", "teacher", BotProfile())
        for i in range(n_players):
            pid = f"s{i + 1:02d}"
            name = NAMES[i % len(NAMES)] + ("" if i < len(NAMES) else f" {i // len(NAMES) + 1}")
            self.bots[pid] = Bot(self, pid, name, "player", profiles[i])

        # Arrival: facilitator, teacher, then players trickle in.
        at = 0
        for pid in self.bots:
            self.schedule(at, self.bots[pid].join)
            at += 700
        force = n_players < scenario.min_players
        self.schedule(at + 2500, lambda: facilitator.start_session(force))

    @property
    def now(self) -> int:
        return self.driver.state.now_ms

    # -- scheduling --------------------------------------------------------

    def schedule(self, at_ms: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self.queue, (max(at_ms, 0), next(self._order), fn))

    def submit(self, event: Event) -> None:
        cursor_before = self.driver.state.read_cursor
        effects = self.driver.dispatch(event)
        self.route(effects)
        self._track_diary(event, cursor_before)
        self._check_invariants()
        self._sample_idle()

    def route(self, effects: list[Effect]) -> None:
        for eff in effects:
            if isinstance(eff, SendTo):
                if eff.type == "error":
                    code = eff.payload.get("code", "?")
                    self.metrics.errors[code] = self.metrics.errors.get(code, 0) + 1
                if eff.type == "hint":
                    self.metrics.hints += 1
                bot = self.bots.get(eff.to)
                if bot is not None and bot.connected:
                    bot.on_message(eff.type, eff.payload)
            elif isinstance(eff, Broadcast):
                if eff.type == "hint":
                    self.metrics.hints += 1
                for bot in self.bots.values():
                    if bot.connected:
                        bot.on_message(eff.type, eff.payload)
            elif isinstance(eff, WriteCheckpoint):
                self.metrics.checkpoints += 1
                if self.verify_checkpoints:
                    self._snapshots.append(
                        (len(self.driver.events), self.driver.state.to_dict())
                    )

    # -- bot knowledge helpers (the "solving aloud" channel) ---------------

    def pair_code(self, unit_id: str) -> str | None:
        unit = self.driver.state.pair_units.get(unit_id)
        if unit is None:
            return None
        pool: set[str] = set()
        for pid in unit.member_ids:
            player = self.driver.state.players.get(pid)
            if player is not None:
                pool.update(player.found)
        hits = matching_entries(self.scenario, pool, ())
        return hits[0].code if len(hits) == 1 else None

    def group_answer(self, group_id: str) -> str | None:
        group = self.driver.state.groups.get(group_id)
        if group is None or group.task_id is None:
            return None
        for task in self.scenario.group_tasks:
            if task.task_id == group.task_id:
                return task.answer_code
        return None

    def challenge_assignment(self, player_id: str) -> list[str]:
        if self._challenge_plan is None:
            players = [p.player_id for p in self.driver.state.connected_players()]
            markers = [m.marker_id for m in self.scenario.markers]
            plan: dict[str, list[str]] = {pid: [] for pid in players}
            for i, marker_id in enumerate(markers):
                if players:
                    plan[players[i % len(players)]].append(marker_id)
            self._challenge_plan = plan
        return self._challenge_plan.get(player_id, [])

    # -- idle accounting ---------------------------------------------------

    def _player_done(self, phase: str, pid: str) -> bool:
        state = self.driver.state
        p = state.players[pid]
        if phase == "NotepadDiscovery":
            return p.notepad_ok
        if phase == "IndividualDiscovery":
            if p.track is None:
                return True
            return p.plan_index >= len(individual_plan(self.scenario, p.track))
        if phase == "PairFormation":
            unit = state.pair_units.get(p.unit_id or "")
            return unit is not None and all(
                r in unit.confirmed
                for r in unit.receiver_ids
                if r in state.players and state.players[r].connected
            )
        if phase == "PairPuzzle":
            unit = state.pair_units.get(p.unit_id or "")
            return unit is not None and unit.solved
        if phase == "GroupFormation":
            group = state.groups.get(p.group_id or "")
            return group is not None and all(
                m in group.confirmed
                for m in group.member_ids[1:]
                if m in state.players and state.players[m].connected
            )
        if phase == "GroupPuzzle":
            group = state.groups.get(p.group_id or "")
            return group is not None and group.solved
        if phase == "DiaryCircle":
            return all(o < state.read_cursor for o in p.pages)
        return False

    def _sample_idle(self) -> None:
        state = self.driver.state
        if state.phase != self._idle_phase:
            if self._idle_phase in BARRIER_PHASES:
                for done_at in self._idle_done_at.values():
                    wait = state.now_ms - done_at
                    self.metrics.idle_ms_total += wait
                    self.metrics.idle_ms_max = max(self.metrics.idle_ms_max, wait)
                    self.metrics.idle_samples += 1
            self._idle_phase = state.phase
            self._idle_done_at = {}
        if state.phase in BARRIER_PHASES:
            for p in state.connected_players():
                if p.player_id not in self._idle_done_at and self._player_done(
                    state.phase, p.player_id
                ):
                    self._idle_done_at[p.player_id] = state.now_ms

    # -- invariant checks --------------------------------------------------

    def _track_diary(self, event: Event, cursor_before: int) -> None:
        cursor = self.driver.state.read_cursor
        if not isinstance(event, ReadDone) or cursor == cursor_before:
            return
        # An accepted read must advance the cursor by exactly one page and
        # carry the order that was up; anything else is an ordering breach.
        if cursor != cursor_before + 1 or event.order != cursor_before:
            self.invariants.diary_order = False
            self.invariants.problems.append(
                f"DIARY-ORDER: read order={event.order} moved cursor "
                f"{cursor_before}->{cursor}"
            )

    def _check_invariants(self) -> None:
        state = self.driver.state
        if state.phase == self._inv_phase:
            return
        old_i = phase_index(self._inv_phase)
        new_i = phase_index(state.phase)
        self._inv_phase = state.phase
        if old_i < phase_index("RegisterRoleplay") <= new_i:
            self._check_equal_start()
        if old_i < phase_index("PairPuzzle") <= new_i:
            self._check_complementarity()
        if state.phase == "Ended":
            self._check_end()

    def _check_equal_start(self) -> None:
        bad = [
            p.player_id
            for p in self.driver.state.players.values()
            if p.found or p.revealed
        ]
        self.invariants.equal_start = not bad
        if bad:
            self.invariants.problems.append(
                f"EQUAL-START: discovered sets not empty for {bad}"
            )

    def _check_complementarity(self) -> None:
        state = self.driver.state
        comp_ok = True
        derive_ok = True
        for unit in state.pair_units.values():
            side_a: set[str] = set()
            side_b: set[str] = set()
            for pid in unit.member_ids:
                player = state.players.get(pid)
                if player is None:
                    continue
                (side_a if player.track == "A" else side_b).update(player.found)
            if (side_a & side_b) or not side_a or not side_b:
                comp_ok = False
                self.invariants.problems.append(
                    f"COMPLEMENTARITY: {unit.unit_id} sides A={sorted(side_a)} "
                    f"B={sorted(side_b)}"
                )
            try:
                derive_pair_code(self.scenario, side_a, side_b)
            except NoMatchingEntry:
                derive_ok = False
                self.invariants.problems.append(
                    f"PAIR-DERIVE: no code entry for {unit.unit_id}"
                )
        self.invariants.complementarity = comp_ok
        self.invariants.derive_total = derive_ok

    def _check_end(self) -> None:
        state = self.driver.state
        scn = self.scenario

        known: set[str] = set()
        for player in state.players.values():
            for artifact_id in player.revealed:
                for artifact in scn.artifacts:
                    if artifact.artifact_id == artifact_id:
                        known.update(artifact.fragment_ids)
        known.update(scn.teacher_fragments)
        for page in scn.diary:
            known.update(page.fragment_ids)
        missing = {f.fragment_id for f in scn.fragments} - known
        self.invariants.coverage = not missing
        if missing:
            self.invariants.problems.append(f"COVERAGE: never surfaced {sorted(missing)}")

        total_pages = len(scn.diary)
        if state.read_cursor != total_pages:
            self.invariants.diary_order = False
            self.invariants.problems.append(
                f"DIARY-ORDER: cursor ended at {state.read_cursor}/{total_pages}"
            )
        elif self.invariants.diary_order is None:
            self.invariants.diary_order = True

        # Solo artifacts of the other track must stay private; only gated
        # unlocks travel across a pair.
        leaks = []
        solo = {"A": individual_artifact_set(scn, "A"), "B": individual_artifact_set(scn, "B")}
        for player in state.players.values():
            if player.track not in ("A", "B"):
                continue
            other = "B" if player.track == "A" else "A"
            hit = set(player.revealed) & solo[other]
            if hit:
                leaks.append(f"{player.player_id} sees {sorted(hit)}")
        self.invariants.no_leak = not leaks
        if leaks:
            self.invariants.problems.append("NO-LEAK: " + "; ".join(leaks))

    def _verify_snapshots(self) -> bool | None:
        """Replay the tail of the event log from every checkpoint snapshot.

        Each restored run must land on the exact final state of the live
        run, which is the restorability contract checkpoints promise.
        """
        if not self.verify_checkpoints:
            return None
        final = self.driver.state.to_dict()
        for n_events, snapshot in self._snapshots:
            state = SessionState.from_dict(snapshot)
            bind_scenario(state, self.scenario)
            restored = SessionDriver.resume(self.scenario, state, auto_timers=False)
            for event in self.driver.events[n_events:]:
                restored.dispatch(event)
            if restored.state.to_dict() != final:
                return False
        return True

    # -- main loop ---------------------------------------------------------

    def run(self) -> SimResult:
        deadlock = False
        while self.driver.state.phase != "Ended":
            next_action = self.queue[0][0] if self.queue else None
            next_timer = self.driver.next_timer_at()
            if self.driver.state.paused:
                next_timer = None  # frozen clock; timers cannot come due
            if next_action is None and next_timer is None:
                deadlock = True
                break
            if next_action is None:
                # Only timers are left.  Hint timers alone cannot unblock
                # anyone, so a queue that empties down to them is stuck.
                if "challenge" not in self.driver.state.timers:
                    deadlock = True
                    break
            target = min(t for t in (next_action, next_timer) if t is not None)
            if target > self.max_virtual_ms or self.driver.state.event_seq > 200_000:
                deadlock = True
                break
            if next_timer is not None and (next_action is None or next_timer <= next_action):
                self.route(self.driver.advance_clock(next_timer))
                self._check_invariants()
                self._sample_idle()
                continue
            if target > self.now:
                self.route(self.driver.advance_clock(target))
                self._check_invariants()
                self._sample_idle()
            _, _, fn = heapq.heappop(self.queue)
            fn()
        state = self.driver.state
        self.metrics.duration_ms = state.now_ms
        self.metrics.events = state.event_seq
        self.metrics.phase_entered = {name: at for name, at, _ in state.phase_history}
        ended = state.phase == "Ended"
        blocking = "" if ended else describe_block(state)
        checkpoint_ok = self._verify_snapshots()
        return SimResult(
            ok=ended and not deadlock and self.invariants.ok and checkpoint_ok is not False,
            ended=ended,
            deadlock=deadlock,
            blocking=blocking,
            digest=self.driver.digest(),
            final_phase=state.phase,
            metrics=self.metrics,
            invariants=self.invariants,
            checkpoint_ok=checkpoint_ok,
            driver=self.driver,
        )


def describe_block(state: SessionState) -> str:
    """Human-readable account of who is holding the current phase open."""
    phase = state.phase
    players = state.connected_players()
    if phase == "NotepadDiscovery":
        waiting = [p.player_id for p in players if not p.notepad_ok]
        return f"waiting for notepad confirmation from {waiting}"
    if phase == "IndividualDiscovery":
        scenario = state.scenario
        waiting = [
            p.player_id
            for p in players
            if p.track is not None
            and p.plan_index < len(individual_plan(scenario, p.track))
        ]
        return f"waiting for solo discovery from {waiting}"
    if phase == "PairFormation":
        waiting = [
            u.unit_id
            for u in state.pair_units.values()
            if any(
                r not in u.confirmed
                for r in u.receiver_ids
                if r in state.players and state.players[r].connected
            )
        ]
        return f"waiting for pair confirmation in {waiting}"
    if phase == "PairPuzzle":
        waiting = [u.unit_id for u in state.pair_units.values() if not u.solved]
        return f"waiting for pair puzzles {waiting}"
    if phase == "GroupFormation":
        waiting = [
            g.group_id
            for g in state.groups.values()
            if any(
                m not in g.confirmed
                for m in g.member_ids[1:]
                if m in state.players and state.players[m].connected
            )
        ]
        return f"waiting for group confirmation in {waiting}"
    if phase == "GroupPuzzle":
        waiting = [g.group_id for g in state.groups.values() if not g.solved]
        return f"waiting for group puzzles {waiting}"
    if phase == "TeacherShare":
        missing = [gid for gid in state.groups if gid not in state.share_visited]
        return f"waiting for teacher to visit {missing}"
    if phase == "TimedChallenge":
        return "waiting for challenge completion or deadline"
    if phase == "DiaryCircle":
        return f"waiting for diary page {state.read_cursor}"
    return f"in phase {phase}"


def run_session(
    scenario: Scenario,
    n_players: int,
    seed: int,
    *,
    profiles: list[BotProfile] | None = None,
    pauses: dict[str, tuple[int, int]] | None = None,
    keep_transcript: bool = False,
    verify_checkpoints: bool = False,
) -> SimResult:
    sim = Simulation(
        scenario,
        n_players,
        seed,
        profiles=profiles,
        pauses=pauses,
        keep_transcript=keep_transcript,
        verify_checkpoints=verify_checkpoints,
    )
    return sim.run()


def run_sweep(
    scenario: Scenario,
    sizes: Iterable[int],
    seeds: Iterable[int],
    *,
    profiles_for: Callable[[int, int], list[BotProfile] | None] | None = None,
) -> list[dict[str, Any]]:
    """One summary row per (size, seed) run."""
    rows = []
    for n in sizes:
        for seed in seeds:
            profiles = profiles_for(n, seed) if profiles_for else None
            result = run_session(scenario, n, seed, profiles=profiles)
            row = {"players": n, "seed": seed}
            row.update(result.summary())
            rows.append(row)
    return rows
