"""Declarative scenario format: loading, validation, and discovery planning.

A scenario is one playable episode: the physical markers hidden in the room,
the virtual artifacts bound to them, the story fragments those artifacts
carry, the pair-code puzzle table, the diary, and the scripted content
(roleplay lines, group tasks, hints, discussion prompts).

Scenario values are immutable after load and safe to share between any
number of concurrent sessions.  The loader performs structural checks only
(well-formed document, resolvable references, unique ids); everything else
is the validator's job and comes back as diagnostics, never exceptions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any, Iterable

TRACKS = ("A", "B")
SPEAKERS = ("teacher", "player", "all")

TOP_LEVEL_KEYS = frozenset(
    {
        "scenario_id",
        "title",
        "min_players",
        "max_players",
        "markers",
        "artifacts",
        "fragments",
        "teacher_fragments",
        "pair_code_table",
        "group_tasks",
        "diary",
        "discussion_prompts",
        "hint_policy",
        "challenge_seconds",
        "instruments",
        "roleplay_script",
    }
)

# Phases a hint policy entry may name (mirror of the engine's phase order;
# kept as strings here so the scenario layer stays import-light).
PHASE_NAMES = (
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


class ScenarioSyntaxError(Exception):
    """Malformed scenario document (bad JSON, schema violation)."""

    def __init__(self, message: str, location: str = "") -> None:
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location
        self.reason = message


class ScenarioReferenceError(Exception):
    """A cross-reference names an id that does not exist."""

    def __init__(self, message: str, ref: str) -> None:
        super().__init__(message)
        self.ref = ref


class DuplicateIdError(Exception):
    def __init__(self, message: str, dup: str) -> None:
        super().__init__(message)
        self.dup = dup


@dataclass(frozen=True)
class MarkerDef:
    marker_id: str
    location_label: str


@dataclass(frozen=True)
class ArtifactDef:
    artifact_id: str
    marker_id: str
    track: str
    order: int
    reveal_text: str
    fragment_ids: tuple[str, ...]
    audio_cue: str | None = None


@dataclass(frozen=True)
class InfoFragment:
    fragment_id: str
    text: str
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class PairCodeEntry:
    required_artifacts: frozenset[str]
    code: str
    unlocks_marker: str


@dataclass(frozen=True)
class GroupTaskDef:
    task_id: str
    prompt_text: str
    answer_code: str


@dataclass(frozen=True)
class DiaryFragment:
    order: int
    text: str
    # Story units this page covers; lets the coverage check account for
    # information that is only ever told through the diary circle.
    fragment_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class HintPhasePolicy:
    phase: str
    delay_seconds: int
    hints: tuple[str, ...]


@dataclass(frozen=True)
class RoleLine:
    speaker: str
    prompt_text: str
    ack_required: bool = True


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    title: str
    min_players: int
    max_players: int
    markers: tuple[MarkerDef, ...]
    artifacts: tuple[ArtifactDef, ...]
    fragments: tuple[InfoFragment, ...]
    teacher_fragments: tuple[str, ...]
    pair_code_table: tuple[PairCodeEntry, ...]
    group_tasks: tuple[GroupTaskDef, ...]
    diary: tuple[DiaryFragment, ...]
    discussion_prompts: tuple[str, ...]
    hint_policy: tuple[HintPhasePolicy, ...]
    challenge_seconds: int
    instruments: tuple[str, ...]
    roleplay_script: tuple[RoleLine, ...]

    def marker(self, marker_id: str) -> MarkerDef:
        for m in self.markers:
            if m.marker_id == marker_id:
                return m
        raise KeyError(marker_id)

    def artifact(self, artifact_id: str) -> ArtifactDef:
        for a in self.artifacts:
            if a.artifact_id == artifact_id:
                return a
        raise KeyError(artifact_id)

    def artifact_at_marker(self, marker_id: str) -> ArtifactDef | None:
        for a in self.artifacts:
            if a.marker_id == marker_id:
                return a
        return None

    def fragment_ids(self) -> frozenset[str]:
        return frozenset(f.fragment_id for f in self.fragments)

    def hint_entry(self, phase: str) -> HintPhasePolicy | None:
        for entry in self.hint_policy:
            if entry.phase == phase:
                return entry
        return None


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning" | "info"
    code: str
    message: str
    location: str = ""


@dataclass
class ValidationReport:
    ok: bool
    diagnostics: list[Diagnostic] = field(default_factory=list)
    # code -> True/False summary of each named check
    checks: dict[str, bool] = field(default_factory=dict)

    def errors(self) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.severity == "error"]

    def format_lines(self) -> list[str]:
        return [
            f"{d.severity.upper()} {d.code} {d.location or '-'}: {d.message}"
            for d in self.diagnostics
        ]


# ---------------------------------------------------------------------------
# Loading


def _expect(obj: dict, key: str, kind: type | tuple, location: str) -> Any:
    if key not in obj:
        raise ScenarioSyntaxError(f"missing required key '{key}'", location)
    value = obj[key]
    if not isinstance(value, kind):
        kinds = kind if isinstance(kind, tuple) else (kind,)
        names = "/".join(k.__name__ for k in kinds)
        raise ScenarioSyntaxError(f"'{key}' must be {names}", location)
    if kind is int and isinstance(value, bool):
        raise ScenarioSyntaxError(f"'{key}' must be int", location)
    return value


def _str_list(obj: dict, key: str, location: str) -> tuple[str, ...]:
    raw = _expect(obj, key, list, location)
    for i, item in enumerate(raw):
        if not isinstance(item, str):
            raise ScenarioSyntaxError(f"'{key}[{i}]' must be a string", location)
    return tuple(raw)


def load_scenario(raw: bytes | str) -> Scenario:
    """Parse a scenario document into an immutable Scenario.

    Structural errors only: ScenarioSyntaxError for malformed documents,
    ScenarioReferenceError for dangling ids, DuplicateIdError for repeated
    ids.  Content-level problems are left to validate_scenario.
    """
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ScenarioSyntaxError(f"document is not UTF-8: {exc}") from exc
    else:
        text = raw
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioSyntaxError(
            f"invalid JSON: {exc.msg}", f"line {exc.lineno} column {exc.colno}"
        ) from exc
    if not isinstance(doc, dict):
        raise ScenarioSyntaxError("top level must be a JSON object")

    unknown = [k for k in doc if k not in TOP_LEVEL_KEYS and not k.startswith("x_")]
    if unknown:
        raise ScenarioSyntaxError(f"unknown top-level key '{unknown[0]}'", unknown[0])
    missing = sorted(TOP_LEVEL_KEYS - set(doc))
    if missing:
        raise ScenarioSyntaxError(f"missing top-level key '{missing[0]}'", missing[0])

    markers = []
    for i, m in enumerate(_expect(doc, "markers", list, "markers")):
        loc = f"markers[{i}]"
        if not isinstance(m, dict):
            raise ScenarioSyntaxError("marker must be an object", loc)
        markers.append(
            MarkerDef(
                marker_id=_expect(m, "marker_id", str, loc),
                location_label=_expect(m, "location_label", str, loc),
            )
        )

    artifacts = []
    for i, a in enumerate(_expect(doc, "artifacts", list, "artifacts")):
        loc = f"artifacts[{i}]"
        if not isinstance(a, dict):
            raise ScenarioSyntaxError("artifact must be an object", loc)
        track = _expect(a, "track", str, loc)
        if track not in TRACKS:
            raise ScenarioSyntaxError(f"track must be one of {TRACKS}", loc)
        cue = a.get("audio_cue")
        if cue is not None and not isinstance(cue, str):
            raise ScenarioSyntaxError("'audio_cue' must be a string or absent", loc)
        artifacts.append(
            ArtifactDef(
                artifact_id=_expect(a, "artifact_id", str, loc),
                marker_id=_expect(a, "marker_id", str, loc),
                track=track,
                order=_expect(a, "order", int, loc),
                reveal_text=_expect(a, "reveal_text", str, loc),
                fragment_ids=_str_list(a, "fragment_ids", loc),
                audio_cue=cue,
            )
        )

    fragments = []
    for i, f in enumerate(_expect(doc, "fragments", list, "fragments")):
        loc = f"fragments[{i}]"
        if not isinstance(f, dict):
            raise ScenarioSyntaxError("fragment must be an object", loc)
        tags = tuple(f.get("tags", []))
        if not all(isinstance(t, str) for t in tags):
            raise ScenarioSyntaxError("'tags' must be strings", loc)
        fragments.append(
            InfoFragment(
                fragment_id=_expect(f, "fragment_id", str, loc),
                text=_expect(f, "text", str, loc),
                tags=tags,
            )
        )

    pair_code_table = []
    for i, p in enumerate(_expect(doc, "pair_code_table", list, "pair_code_table")):
        loc = f"pair_code_table[{i}]"
        if not isinstance(p, dict):
            raise ScenarioSyntaxError("pair code entry must be an object", loc)
        pair_code_table.append(
            PairCodeEntry(
                required_artifacts=frozenset(_str_list(p, "required_artifacts", loc)),
                code=_expect(p, "code", str, loc),
                unlocks_marker=_expect(p, "unlocks_marker", str, loc),
            )
        )

    group_tasks = []
    for i, g in enumerate(_expect(doc, "group_tasks", list, "group_tasks")):
        loc = f"group_tasks[{i}]"
        if not isinstance(g, dict):
            raise ScenarioSyntaxError("group task must be an object", loc)
        group_tasks.append(
            GroupTaskDef(
                task_id=_expect(g, "task_id", str, loc),
                prompt_text=_expect(g, "prompt_text", str, loc),
                answer_code=_expect(g, "answer_code", str, loc),
            )
        )

    diary = []
    for i, d in enumerate(_expect(doc, "diary", list, "diary")):
        loc = f"diary[{i}]"
        if not isinstance(d, dict):
            raise ScenarioSyntaxError("diary entry must be an object", loc)
        frag_ids = tuple(d.get("fragment_ids", []))
        if not all(isinstance(x, str) for x in frag_ids):
            raise ScenarioSyntaxError("'fragment_ids' must be strings", loc)
        diary.append(
            DiaryFragment(
                order=_expect(d, "order", int, loc),
                text=_expect(d, "text", str, loc),
                fragment_ids=frag_ids,
            )
        )

    hint_policy = []
    for i, h in enumerate(_expect(doc, "hint_policy", list, "hint_policy")):
        loc = f"hint_policy[{i}]"
        if not isinstance(h, dict):
            raise ScenarioSyntaxError("hint policy entry must be an object", loc)
        hint_policy.append(
            HintPhasePolicy(
                phase=_expect(h, "phase", str, loc),
                delay_seconds=_expect(h, "delay_seconds", int, loc),
                hints=_str_list(h, "hints", loc),
            )
        )

    roleplay_script = []
    for i, r in enumerate(_expect(doc, "roleplay_script", list, "roleplay_script")):
        loc = f"roleplay_script[{i}]"
        if not isinstance(r, dict):
            raise ScenarioSyntaxError("role line must be an object", loc)
        speaker = _expect(r, "speaker", str, loc)
        if speaker not in SPEAKERS:
            raise ScenarioSyntaxError(f"speaker must be one of {SPEAKERS}", loc)
        ack = r.get("ack_required", True)
        if not isinstance(ack, bool):
            raise ScenarioSyntaxError("'ack_required' must be a boolean", loc)
        roleplay_script.append(
            RoleLine(
                speaker=speaker,
                prompt_text=_expect(r, "prompt_text", str, loc),
                ack_required=ack,
            )
        )

    scenario = Scenario(
        scenario_id=_expect(doc, "scenario_id", str, "scenario_id"),
        title=_expect(doc, "title", str, "title"),
        min_players=_expect(doc, "min_players", int, "min_players"),
        max_players=_expect(doc, "max_players", int, "max_players"),
        markers=tuple(markers),
        artifacts=tuple(artifacts),
        fragments=tuple(fragments),
        teacher_fragments=_str_list(doc, "teacher_fragments", "teacher_fragments"),
        pair_code_table=tuple(pair_code_table),
        group_tasks=tuple(group_tasks),
        diary=tuple(diary),
        discussion_prompts=_str_list(doc, "discussion_prompts", "discussion_prompts"),
        hint_policy=tuple(hint_policy),
        challenge_seconds=_expect(doc, "challenge_seconds", int, "challenge_seconds"),
        instruments=_str_list(doc, "instruments", "instruments"),
        roleplay_script=tuple(roleplay_script),
    )
    _check_ids(scenario)
    _check_references(scenario)
    return scenario


def _check_ids(s: Scenario) -> None:
    for label, ids in (
        ("marker", [m.marker_id for m in s.markers]),
        ("artifact", [a.artifact_id for a in s.artifacts]),
        ("fragment", [f.fragment_id for f in s.fragments]),
        ("group task", [g.task_id for g in s.group_tasks]),
    ):
        seen: set[str] = set()
        for one in ids:
            if one in seen:
                raise DuplicateIdError(f"duplicate {label} id '{one}'", one)
            seen.add(one)


def _check_references(s: Scenario) -> None:
    marker_ids = {m.marker_id for m in s.markers}
    artifact_ids = {a.artifact_id for a in s.artifacts}
    fragment_ids = {f.fragment_id for f in s.fragments}
    for i, a in enumerate(s.artifacts):
        if a.marker_id not in marker_ids:
            raise ScenarioReferenceError(
                f"artifacts[{i}] '{a.artifact_id}' references unknown marker '{a.marker_id}'",
                a.marker_id,
            )
        for fid in a.fragment_ids:
            if fid not in fragment_ids:
                raise ScenarioReferenceError(
                    f"artifacts[{i}] references unknown fragment '{fid}'", fid
                )
    for fid in s.teacher_fragments:
        if fid not in fragment_ids:
            raise ScenarioReferenceError(
                f"teacher_fragments references unknown fragment '{fid}'", fid
            )
    for i, p in enumerate(s.pair_code_table):
        for aid in sorted(p.required_artifacts):
            if aid not in artifact_ids:
                raise ScenarioReferenceError(
                    f"pair_code_table[{i}] requires unknown artifact '{aid}'", aid
                )
        if p.unlocks_marker not in marker_ids:
            raise ScenarioReferenceError(
                f"pair_code_table[{i}] unlocks unknown marker '{p.unlocks_marker}'",
                p.unlocks_marker,
            )
    for i, d in enumerate(s.diary):
        for fid in d.fragment_ids:
            if fid not in fragment_ids:
                raise ScenarioReferenceError(
                    f"diary[{i}] references unknown fragment '{fid}'", fid
                )


# ---------------------------------------------------------------------------
# Serialization


def scenario_to_dict(s: Scenario) -> dict[str, Any]:
    return {
        "scenario_id": s.scenario_id,
        "title": s.title,
        "min_players": s.min_players,
        "max_players": s.max_players,
        "markers": [
            {"marker_id": m.marker_id, "location_label": m.location_label}
            for m in s.markers
        ],
        "artifacts": [
            {
                "artifact_id": a.artifact_id,
                "marker_id": a.marker_id,
                "track": a.track,
                "order": a.order,
                "reveal_text": a.reveal_text,
                "fragment_ids": list(a.fragment_ids),
                **({"audio_cue": a.audio_cue} if a.audio_cue is not None else {}),
            }
            for a in s.artifacts
        ],
        "fragments": [
            {"fragment_id": f.fragment_id, "text": f.text, "tags": list(f.tags)}
            for f in s.fragments
        ],
        "teacher_fragments": list(s.teacher_fragments),
        "pair_code_table": [
            {
                "required_artifacts": sorted(p.required_artifacts),
                "code": p.code,
                "unlocks_marker": p.unlocks_marker,
            }
            for p in s.pair_code_table
        ],
        "group_tasks": [
            {"task_id": g.task_id, "prompt_text": g.prompt_text, "answer_code": g.answer_code}
            for g in s.group_tasks
        ],
        "diary": [
            {"order": d.order, "text": d.text, "fragment_ids": list(d.fragment_ids)}
            for d in s.diary
        ],
        "discussion_prompts": list(s.discussion_prompts),
        "hint_policy": [
            {"phase": h.phase, "delay_seconds": h.delay_seconds, "hints": list(h.hints)}
            for h in s.hint_policy
        ],
        "challenge_seconds": s.challenge_seconds,
        "instruments": list(s.instruments),
        "roleplay_script": [
            {"speaker": r.speaker, "prompt_text": r.prompt_text, "ack_required": r.ack_required}
            for r in s.roleplay_script
        ],
    }


def serialize_scenario(s: Scenario) -> bytes:
    """Canonical UTF-8 JSON; load_scenario(serialize_scenario(s)) == s."""
    return json.dumps(
        scenario_to_dict(s), sort_keys=True, ensure_ascii=True, separators=(",", ":")
    ).encode("ascii")


def content_hash(s: Scenario) -> bytes:
    """32-byte digest of the canonical serialization, used by checkpoints."""
    return hashlib.sha256(serialize_scenario(s)).digest()


# ---------------------------------------------------------------------------
# Discovery plans


class UnknownTrack(Exception):
    pass


def track_artifacts(s: Scenario, track: str) -> list[ArtifactDef]:
    """Artifacts of one track, sorted by their discovery order."""
    if track not in TRACKS:
        raise UnknownTrack(track)
    return sorted((a for a in s.artifacts if a.track == track), key=lambda a: a.order)


def discovery_plan(s: Scenario, track: str) -> list[str]:
    """Full marker sequence for a track, in artifact order."""
    return [a.marker_id for a in track_artifacts(s, track)]


def gated_markers(s: Scenario) -> frozenset[str]:
    """Markers that only become targets once a pair code unlocks them."""
    return frozenset(p.unlocks_marker for p in s.pair_code_table)


def individual_plan(s: Scenario, track: str) -> list[str]:
    """Prefix of the track plan walked solo, before any pair-code gate."""
    gated = gated_markers(s)
    plan: list[str] = []
    for marker_id in discovery_plan(s, track):
        if marker_id in gated:
            break
        plan.append(marker_id)
    return plan


def individual_artifact_set(s: Scenario, track: str) -> frozenset[str]:
    per_marker = {a.marker_id: a.artifact_id for a in s.artifacts}
    return frozenset(per_marker[m] for m in individual_plan(s, track))


def reachable_pair_states(s: Scenario) -> list[tuple[frozenset[str], frozenset[str]]]:
    """Every (track-A set, track-B set) combination the pair phase can see.

    Discovery follows the per-track order and the session only hands out the
    pair puzzle once both partners have finished their solo sequences (a
    facilitator skip force-completes them), so the artifact sets at code
    time are always the full solo portions.
    """
    a = individual_artifact_set(s, "A")
    b = individual_artifact_set(s, "B")
    if not a or not b:
        return []
    return [(a, b)]


def matching_entries(
    s: Scenario, set_a: Iterable[str], set_b: Iterable[str]
) -> list[PairCodeEntry]:
    pool = set(set_a) | set(set_b)
    return [p for p in s.pair_code_table if p.required_artifacts <= pool]


# ---------------------------------------------------------------------------
# Validation


def _sizes_without_34_partition(lo: int, hi: int) -> list[int]:
    bad = []
    for n in range(lo, hi + 1):
        if not any((n - 4 * a) >= 0 and (n - 4 * a) % 3 == 0 for a in range(n // 4 + 1)):
            bad.append(n)
    return bad


def validate_scenario(s: Scenario) -> ValidationReport:
    """Run every content check and return a pure, deterministic report.

    Problems come back as diagnostics; ok is true iff none has severity
    error.  Identical scenarios always produce identical reports.
    """
    diags: list[Diagnostic] = []
    checks: dict[str, bool] = {}

    def fail(code: str, message: str, location: str = "", severity: str = "error") -> None:
        diags.append(Diagnostic(severity, code, message, location))
        if severity == "error":
            checks[code] = False

    def start(code: str) -> None:
        checks.setdefault(code, True)

    # EQUAL-START: nothing in the format can pre-assign information to a
    # player; confirmed here so the report always carries the result.
    start("EQUAL-START")
    diags.append(
        Diagnostic(
            "info",
            "EQUAL-START",
            "no fragment is assigned to any player before play",
        )
    )

    # content-level sanity
    start("CONTENT")
    for i, m in enumerate(s.markers):
        if not m.marker_id:
            fail("CONTENT", "marker_id is empty", f"markers[{i}]")
        if not m.location_label:
            fail("CONTENT", "location_label is empty", f"markers[{i}]")
    for i, f in enumerate(s.fragments):
        if not f.text:
            fail("CONTENT", "fragment text is empty", f"fragments[{i}]")
    for i, a in enumerate(s.artifacts):
        if not a.fragment_ids:
            fail("CONTENT", f"artifact '{a.artifact_id}' carries no fragments", f"artifacts[{i}]")
    if not s.discussion_prompts:
        fail("CONTENT", "discussion_prompts is empty", "discussion_prompts")
    if not s.instruments:
        fail("CONTENT", "instruments is empty", "instruments")
    if s.challenge_seconds <= 0:
        fail("CONTENT", "challenge_seconds must be positive", "challenge_seconds")
    if not s.group_tasks:
        fail("CONTENT", "group_tasks is empty", "group_tasks")
    for i, g in enumerate(s.group_tasks):
        if not (g.answer_code.isdigit() and 1 <= len(g.answer_code) <= 6):
            fail("CONTENT", "group task answer_code must be 1-6 digits", f"group_tasks[{i}]")

    # ROLEPLAY: script exists and the teacher opens the scene
    start("ROLEPLAY")
    if not s.roleplay_script:
        fail("ROLEPLAY", "roleplay_script is empty", "roleplay_script")
    elif s.roleplay_script[0].speaker != "teacher":
        fail("ROLEPLAY", "first role line must be spoken by the teacher", "roleplay_script[0]")

    # HINTS
    start("HINTS")
    seen_phases: set[str] = set()
    for i, h in enumerate(s.hint_policy):
        loc = f"hint_policy[{i}]"
        if h.phase not in PHASE_NAMES:
            fail("HINTS", f"unknown phase '{h.phase}'", loc)
        if h.phase in seen_phases:
            fail("HINTS", f"duplicate hint policy for phase '{h.phase}'", loc)
        seen_phases.add(h.phase)
        if h.delay_seconds <= 0:
            fail("HINTS", "hint delay must be positive", loc)
        if not h.hints:
            fail("HINTS", "hint list is empty", loc)

    # GROUP-FEASIBILITY
    start("GROUP-FEASIBILITY")
    if s.min_players < 6:
        fail(
            "GROUP-FEASIBILITY",
            f"min_players={s.min_players} is below 6, the smallest roster with "
            "two populated tracks and a {3,4} group split",
            "min_players",
        )
    if s.max_players < s.min_players:
        fail("GROUP-FEASIBILITY", "max_players < min_players", "max_players")
    if s.min_players >= 1 and s.max_players >= s.min_players:
        for n in _sizes_without_34_partition(s.min_players, s.max_players):
            fail(
                "GROUP-FEASIBILITY",
                f"class size {n} cannot be split into groups of 3 and 4",
                "min_players",
            )

    # ARTIFACT-ORDER: contiguous 0..k-1 per track
    start("ARTIFACT-ORDER")
    for track in TRACKS:
        orders = sorted(a.order for a in s.artifacts if a.track == track)
        if orders != list(range(len(orders))):
            fail(
                "ARTIFACT-ORDER",
                f"track {track} orders {orders} are not contiguous from 0",
                "artifacts",
            )

    # MARKER-BINDING: one artifact per marker at most
    start("MARKER-BINDING")
    bound: dict[str, str] = {}
    for i, a in enumerate(s.artifacts):
        if a.marker_id in bound:
            fail(
                "MARKER-BINDING",
                f"marker '{a.marker_id}' bound to both '{bound[a.marker_id]}' "
                f"and '{a.artifact_id}'",
                f"artifacts[{i}]",
            )
        bound[a.marker_id] = a.artifact_id

    # COVERAGE: everything in the story is told somewhere
    start("COVERAGE")
    covered: set[str] = set(s.teacher_fragments)
    for a in s.artifacts:
        covered.update(a.fragment_ids)
    for d in s.diary:
        covered.update(d.fragment_ids)
    for f in s.fragments:
        if f.fragment_id not in covered:
            fail(
                "COVERAGE",
                f"fragment '{f.fragment_id}' appears in no artifact, teacher share, or diary page",
                "fragments",
            )

    # UNLOCK-GRAPH: solo prefixes nonempty, gates reachable, plans disjoint
    start("UNLOCK-GRAPH")
    plan_a, plan_b = discovery_plan(s, "A"), discovery_plan(s, "B")
    indiv_a, indiv_b = individual_plan(s, "A"), individual_plan(s, "B")
    if not plan_a or not plan_b:
        for track, plan in (("A", plan_a), ("B", plan_b)):
            if not plan:
                fail("UNLOCK-GRAPH", f"track {track} has no artifacts", "artifacts")
    else:
        for track, indiv in (("A", indiv_a), ("B", indiv_b)):
            if not indiv:
                fail(
                    "UNLOCK-GRAPH",
                    f"track {track} starts at a pair-gated marker; its solo sequence is empty",
                    "pair_code_table",
                )
        overlap = set(plan_a) & set(plan_b)
        if overlap:
            fail(
                "UNLOCK-GRAPH",
                f"tracks share markers {sorted(overlap)}",
                "artifacts",
            )

    states = reachable_pair_states(s)
    matched_unlocks: set[str] = set()

    # PAIR-SOLVABILITY: exactly one code entry per reachable pair state
    start("PAIR-SOLVABILITY")
    if not s.pair_code_table:
        fail("PAIR-SOLVABILITY", "pair_code_table is empty", "pair_code_table")
    for i, p in enumerate(s.pair_code_table):
        loc = f"pair_code_table[{i}]"
        if not (p.code.isdigit() and 1 <= len(p.code) <= 6):
            fail("PAIR-SOLVABILITY", f"code '{p.code}' is not 1-6 decimal digits", loc)
        tracks_present = {s.artifact(aid).track for aid in p.required_artifacts if _has_artifact(s, aid)}
        if not {"A", "B"} <= tracks_present:
            fail(
                "PAIR-SOLVABILITY",
                "required_artifacts must draw from both tracks",
                loc,
            )
    ever_matched: set[int] = set()
    for set_a, set_b in states:
        hits = matching_entries(s, set_a, set_b)
        for h in hits:
            ever_matched.add(s.pair_code_table.index(h))
        if len(hits) == 0:
            fail(
                "PAIR-SOLVABILITY",
                "no pair code entry matches the reachable pair state "
                f"{sorted(set_a)} + {sorted(set_b)}",
                "pair_code_table",
            )
        elif len(hits) > 1:
            fail(
                "PAIR-SOLVABILITY",
                f"{len(hits)} entries (codes {[h.code for h in hits]}) match the same "
                f"pair state {sorted(set_a)} + {sorted(set_b)}; the code is ambiguous",
                "pair_code_table",
            )
        else:
            matched_unlocks.add(hits[0].unlocks_marker)
    for i, p in enumerate(s.pair_code_table):
        if s.pair_code_table and states and i not in ever_matched:
            diags.append(
                Diagnostic(
                    "warning",
                    "PAIR-SOLVABILITY",
                    f"entry with code '{p.code}' can never be matched",
                    f"pair_code_table[{i}]",
                )
            )

    # UNLOCK-GRAPH continued: every marker reachable through solo plans or
    # a matchable unlock; gates beyond the single pair round are dead ends.
    reachable = set(indiv_a) | set(indiv_b) | matched_unlocks
    for m in s.markers:
        if m.marker_id not in reachable:
            fail(
                "UNLOCK-GRAPH",
                f"marker '{m.marker_id}' is neither in a solo sequence nor unlocked "
                "by a matchable pair code",
                "markers",
            )
    for g in sorted(gated_markers(s) - matched_unlocks):
        fail(
            "UNLOCK-GRAPH",
            f"gated marker '{g}' is only unlocked by entries that never match",
            "pair_code_table",
        )
    for g in sorted(gated_markers(s)):
        if g in set(indiv_a) | set(indiv_b):
            diags.append(
                Diagnostic(
                    "warning",
                    "UNLOCK-GRAPH",
                    f"unlock target '{g}' already sits inside a solo sequence",
                    "pair_code_table",
                )
            )

    # DIARY-FIT
    start("DIARY-FIT")
    if not s.diary:
        fail("DIARY-FIT", "diary is empty", "diary")
    else:
        orders = sorted(d.order for d in s.diary)
        if orders != list(range(len(orders))):
            fail("DIARY-FIT", f"diary orders {orders} are not contiguous from 0", "diary")
        if s.max_players >= s.min_players and len(s.diary) < s.max_players:
            diags.append(
                Diagnostic(
                    "warning",
                    "DIARY-FIT",
                    f"classes larger than {len(s.diary)} players leave some players "
                    "without a diary page",
                    "diary",
                )
            )

    ok = not any(d.severity == "error" for d in diags)
    return ValidationReport(ok=ok, diagnostics=diags, checks=checks)


def _has_artifact(s: Scenario, artifact_id: str) -> bool:
    try:
        s.artifact(artifact_id)
        return True
    except KeyError:
        return False
