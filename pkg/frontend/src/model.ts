/**
 * Client view model: a pure fold over server frames.
 *
 * apply_server_message is deterministic and total.  Feeding the same
 * frames in the same order always yields the same model, and no frame,
 * however malformed or unexpected, can throw; surprises land in
 * `notices` and the screen keeps rendering.  That totality is what makes
 * a page reload safe: the host replays a catch-up view and the fold
 * reconstructs the same screen from it.
 */

import type { Frame, Json, Payload } from "./protocol.js";
import { S2C_TYPES } from "./protocol.js";

export const PHASES = [
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
] as const;

export type Phase = (typeof PHASES)[number];

export type ConnectionStatus = "connecting" | "open" | "closed";

export interface Persona {
    player_id: string;
    name: string;
    role: string;
}

export interface RosterRow {
    player_id: string;
    name: string;
    role: string;
    connected: boolean;
}

export interface MarkerRef {
    marker_id: string;
    location_label: string;
}

export interface FragmentView {
    fragment_id: string;
    text: string;
}

export interface DiscoveryItem {
    artifact_id: string;
    marker_id: string;
    reveal_text: string;
    fragments: FragmentView[];
    next_target: MarkerRef | null;
    audio_cue: string | null;
}

export interface NotepadView {
    track: string | null;
    target: MarkerRef | null;
}

export interface RolePrompt {
    line_index: number;
    speaker: string;
    text: string;
    ack_required: boolean;
    speaker_id: string | null;
}

export interface NameRef {
    player_id: string;
    name: string;
}

export interface PairView {
    unit_id: string;
    role: "sender" | "receiver";
    partners: NameRef[];
    token: string | null;
    confirmed: boolean;
}

export interface GroupView {
    group_id: string;
    role: "anchor" | "member";
    members: NameRef[];
    anchor_id: string;
    token: string | null;
    confirmed: boolean;
}

export interface TaskView {
    scope: "pair" | "group";
    id: string;
    task_id: string | null;
    prompt_text: string | null;
    code_length: number;
    solved: boolean;
    code: string | null;
    unlocks: MarkerRef | null;
}

export interface ShareView {
    groups_done: number;
    groups_total: number;
    fragments: FragmentView[];
}

export interface ChallengeView {
    seconds: number;
    markers_total: number;
    covered: number;
    complete: boolean | null;
    encouragement: boolean;
}

export interface DiaryPage {
    order: number;
    text: string;
}

export interface ReadTurn {
    order: number;
    holder_id: string;
    holder_name: string;
}

export interface DiaryView {
    pages: DiaryPage[];
    turn: ReadTurn | null;
}

export interface HintView {
    phase: string;
    index: number;
    text: string;
    reason: string;
}

export interface Banner {
    code: string;
    detail: string;
}

export interface Choreography {
    action: string;
    execute_at: number | null;
}

export interface CheckpointNote {
    name: string;
    reason: string;
    event_seq: number;
}

export interface ClientViewModel {
    connection: ConnectionStatus;
    session: string;
    server_seq: number;
    persona: Persona | null;
    phase: Phase;
    paused: boolean;
    title: string;
    reconnect: boolean;
    roster: RosterRow[];
    log: DiscoveryItem[];
    target: MarkerRef | null;
    notepad: NotepadView | null;
    roleplay: RolePrompt | null;
    pair: PairView | null;
    group: GroupView | null;
    task: TaskView | null;
    share: ShareView | null;
    challenge: ChallengeView | null;
    diary: DiaryView | null;
    prompts: string[];
    summary: Json | null;
    hint: HintView | null;
    choreography: Choreography | null;
    banner: Banner | null;
    notices: string[];
    checkpoints: CheckpointNote[];
    pong_t: Json | null;
}

export function initial_vm(): ClientViewModel {
    return {
        connection: "connecting",
        session: "",
        server_seq: 0,
        persona: null,
        phase: "Lobby",
        paused: false,
        title: "",
        reconnect: false,
        roster: [],
        log: [],
        target: null,
        notepad: null,
        roleplay: null,
        pair: null,
        group: null,
        task: null,
        share: null,
        challenge: null,
        diary: null,
        prompts: [],
        summary: null,
        hint: null,
        choreography: null,
        banner: null,
        notices: [],
        checkpoints: [],
        pong_t: null,
    };
}

// -- payload readers --------------------------------------------------------
//
// The host is trusted but the fold stays total anyway: every reader
// coerces to the expected shape and substitutes a neutral value rather
// than throwing on a surprise.

const str = (v: Json | undefined, fallback = ""): string => (typeof v === "string" ? v : fallback);

const num = (v: Json | undefined, fallback = 0): number =>
    typeof v === "number" && Number.isFinite(v) ? v : fallback;

const bool = (v: Json | undefined, fallback = false): boolean =>
    typeof v === "boolean" ? v : fallback;

const obj = (v: Json | undefined): Payload | null =>
    typeof v === "object" && v !== null && !Array.isArray(v) ? v : null;

const arr = (v: Json | undefined): Json[] => (Array.isArray(v) ? v : []);

const is_phase = (v: Json | undefined): v is Phase =>
    typeof v === "string" && (PHASES as readonly string[]).includes(v);

const marker_ref = (v: Json | undefined): MarkerRef | null => {
    const m = obj(v);
    if (m === null) {
        return null;
    }
    return { marker_id: str(m["marker_id"]), location_label: str(m["location_label"]) };
};

const fragment_views = (v: Json | undefined): FragmentView[] =>
    arr(v).flatMap((f) => {
        const o = obj(f);
        return o === null ? [] : [{ fragment_id: str(o["fragment_id"]), text: str(o["text"]) }];
    });

const name_refs = (v: Json | undefined): NameRef[] =>
    arr(v).flatMap((f) => {
        const o = obj(f);
        return o === null ? [] : [{ player_id: str(o["player_id"]), name: str(o["name"]) }];
    });

// -- the fold ---------------------------------------------------------------

/**
 * Reset the slices a phase transition invalidates.  The host re-sends
 * whatever the new phase needs (on entry and again on reconnect), so
 * dropping eagerly keeps an incrementally built model equal to one
 * rebuilt from a catch-up view.
 */
function enter_phase(vm: ClientViewModel, phase: Phase): ClientViewModel {
    const next = { ...vm, phase, hint: null, choreography: null };
    switch (phase) {
        case "Lobby":
            return next;
        case "RegisterRoleplay":
            return { ...next, roleplay: null };
        case "NotepadDiscovery":
            return { ...next, roleplay: null, notepad: null, target: null };
        case "IndividualDiscovery":
            return next;
        case "PairFormation":
            return { ...next, pair: null, task: null };
        case "PairPuzzle":
            return { ...next, task: null };
        case "GroupFormation":
            return { ...next, group: null, task: null };
        case "GroupPuzzle":
            return { ...next, task: null };
        case "TeacherShare":
            return { ...next, share: null };
        case "TimedChallenge":
            return { ...next, challenge: null };
        case "DiaryCircle":
            return { ...next, diary: null };
        case "Discussion":
            return { ...next, prompts: [] };
        case "Ended":
            return { ...next, summary: null };
    }
}

/** A welcome opens a fresh view; the host replays context right after. */
function reset_for_welcome(vm: ClientViewModel): ClientViewModel {
    return {
        ...initial_vm(),
        connection: vm.connection,
        session: vm.session,
        server_seq: vm.server_seq,
        checkpoints: vm.checkpoints,
        notices: vm.notices,
    };
}

export function apply_server_message(vm: ClientViewModel, frame: Frame): ClientViewModel {
    const p = frame.payload;
    const base: ClientViewModel = {
        ...vm,
        server_seq: Math.max(vm.server_seq, frame.seq),
        session: frame.session !== "" ? frame.session : vm.session,
    };
    switch (frame.type) {
        case "welcome": {
            const fresh = reset_for_welcome(base);
            return {
                ...fresh,
                persona: {
                    player_id: str(p["player_id"]),
                    name: str(p["name"]),
                    role: str(p["role"], "player"),
                },
                phase: is_phase(p["phase"]) ? p["phase"] : "Lobby",
                paused: bool(p["paused"]),
                title: str(p["title"]),
                reconnect: bool(p["reconnect"]),
            };
        }
        case "roster": {
            const players = arr(p["players"]).flatMap((row) => {
                const o = obj(row);
                if (o === null) {
                    return [];
                }
                return [
                    {
                        player_id: str(o["player_id"]),
                        name: str(o["name"]),
                        role: str(o["role"], "player"),
                        connected: bool(o["connected"]),
                    },
                ];
            });
            return { ...base, roster: players };
        }
        case "phase_change": {
            const phase = is_phase(p["phase"]) ? p["phase"] : base.phase;
            let next = base;
            if (phase !== base.phase) {
                next = enter_phase(base, phase);
            }
            if (typeof p["choreography"] === "string") {
                next = {
                    ...next,
                    choreography: {
                        action: p["choreography"],
                        execute_at: typeof p["execute_at"] === "number" ? p["execute_at"] : null,
                    },
                };
            }
            return { ...next, paused: bool(p["paused"], next.paused) };
        }
        case "role_prompt":
            return {
                ...base,
                roleplay: {
                    line_index: num(p["line_index"]),
                    speaker: str(p["speaker"]),
                    text: str(p["text"]),
                    ack_required: bool(p["ack_required"], true),
                    speaker_id: str(p["speaker_id"]) || null,
                },
            };
        case "notepad": {
            const notepad = {
                track: typeof p["track"] === "string" ? p["track"] : null,
                target: marker_ref(p["target"]),
            };
            return { ...base, notepad, target: notepad.target };
        }
        case "discovery": {
            const item: DiscoveryItem = {
                artifact_id: str(p["artifact_id"]),
                marker_id: str(p["marker_id"]),
                reveal_text: str(p["reveal_text"]),
                fragments: fragment_views(p["fragments"]),
                next_target: marker_ref(p["next_target"]),
                audio_cue: typeof p["audio_cue"] === "string" ? p["audio_cue"] : null,
            };
            // Every discovery restates where to head next (or that there
            // is nowhere), so the slice tracks the latest word, letting a
            // catch-up replay converge on the same pointer.
            return { ...base, log: [...base.log, item], target: item.next_target };
        }
        case "pair_assign":
            return {
                ...base,
                pair: {
                    unit_id: str(p["unit_id"]),
                    role: str(p["role"]) === "sender" ? "sender" : "receiver",
                    partners: name_refs(p["partners"]),
                    token: str(p["token"]) || null,
                    confirmed: false,
                },
            };
        case "pair_confirmed":
            return base.pair === null ? base : { ...base, pair: { ...base.pair, confirmed: true } };
        case "group_assign":
            return {
                ...base,
                group: {
                    group_id: str(p["group_id"]),
                    role: str(p["role"]) === "anchor" ? "anchor" : "member",
                    members: name_refs(p["members"]),
                    anchor_id: str(p["anchor_id"]),
                    token: str(p["token"]) || null,
                    confirmed: false,
                },
            };
        case "group_confirmed":
            return base.group === null
                ? base
                : { ...base, group: { ...base.group, confirmed: true } };
        case "puzzle_task": {
            const scope = str(p["kind"]) === "group" ? "group" : "pair";
            return {
                ...base,
                task: {
                    scope,
                    id: scope === "group" ? str(p["group_id"]) : str(p["unit_id"]),
                    task_id: str(p["task_id"]) || null,
                    prompt_text: str(p["prompt_text"]) || null,
                    code_length: num(p["code_length"]),
                    solved: false,
                    code: null,
                    unlocks: null,
                },
            };
        }
        case "puzzle_result": {
            if (base.task === null) {
                return base;
            }
            return {
                ...base,
                task: {
                    ...base.task,
                    solved: bool(p["accepted"]),
                    code: str(p["code"]) || null,
                    unlocks: marker_ref(p["unlocks"]),
                },
            };
        }
        case "teacher_share": {
            const share = base.share ?? { groups_done: 0, groups_total: 0, fragments: [] };
            const fragment = { fragment_id: str(p["fragment_id"]), text: str(p["text"]) };
            return { ...base, share: { ...share, fragments: [...share.fragments, fragment] } };
        }
        case "share_progress": {
            const share = base.share ?? { groups_done: 0, groups_total: 0, fragments: [] };
            return {
                ...base,
                share: {
                    ...share,
                    groups_done: num(p["groups_done"]),
                    groups_total: num(p["groups_total"]),
                },
            };
        }
        case "challenge_start":
            return {
                ...base,
                challenge: {
                    seconds: num(p["seconds"]),
                    markers_total: num(p["markers_total"]),
                    covered: 0,
                    complete: null,
                    encouragement: false,
                },
            };
        case "challenge_progress": {
            const challenge = base.challenge ?? {
                seconds: 0,
                markers_total: num(p["total"]),
                covered: 0,
                complete: null,
                encouragement: false,
            };
            return { ...base, challenge: { ...challenge, covered: num(p["covered"]) } };
        }
        case "challenge_result": {
            const challenge = base.challenge ?? {
                seconds: 0,
                markers_total: num(p["total"]),
                covered: 0,
                complete: null,
                encouragement: false,
            };
            return {
                ...base,
                challenge: {
                    ...challenge,
                    covered: num(p["covered"], challenge.covered),
                    complete: bool(p["complete"]),
                    encouragement: bool(p["encouragement"]),
                },
            };
        }
        case "diary_page": {
            const diary = base.diary ?? { pages: [], turn: null };
            const pages = arr(p["pages"]).flatMap((page) => {
                const o = obj(page);
                return o === null ? [] : [{ order: num(o["order"]), text: str(o["text"]) }];
            });
            return { ...base, diary: { ...diary, pages } };
        }
        case "read_turn": {
            const diary = base.diary ?? { pages: [], turn: null };
            return {
                ...base,
                diary: {
                    ...diary,
                    turn: {
                        order: num(p["order"]),
                        holder_id: str(p["holder_id"]),
                        holder_name: str(p["holder_name"]),
                    },
                },
            };
        }
        case "discussion_prompts":
            return { ...base, prompts: arr(p["prompts"]).map((v) => str(v)) };
        case "hint":
            return {
                ...base,
                hint: {
                    phase: str(p["phase"]),
                    index: num(p["index"]),
                    text: str(p["text"]),
                    reason: str(p["reason"]),
                },
            };
        case "error":
            return { ...base, banner: { code: str(p["code"], "error"), detail: str(p["detail"]) } };
        case "session_ended":
            return { ...base, summary: p["summary"] ?? null };
        case "checkpoint_saved":
            return {
                ...base,
                checkpoints: [
                    ...base.checkpoints,
                    {
                        name: str(p["name"]),
                        reason: str(p["reason"]),
                        event_seq: num(p["event_seq"]),
                    },
                ],
            };
        case "pong":
            return { ...base, pong_t: p["t"] ?? null };
        default: {
            const label = S2C_TYPES.has(frame.type)
                ? `unhandled frame '${frame.type}'`
                : `unknown frame '${frame.type}'`;
            return { ...base, notices: [...base.notices, label] };
        }
    }
}

// -- screens ----------------------------------------------------------------

export type Screen =
    | { kind: "join" }
    | { kind: "lobby"; roster: RosterRow[] }
    | { kind: "roleplay"; prompt: RolePrompt | null; my_turn: boolean }
    | { kind: "notepad"; track: string | null; target: MarkerRef | null }
    | {
          kind: "discovery";
          track: string | null;
          target: MarkerRef | null;
          log: Omit<DiscoveryItem, "next_target">[];
      }
    | { kind: "pairing"; pair: PairView | null }
    | {
          kind: "puzzle";
          scope: "pair" | "group";
          pair: Omit<PairView, "confirmed"> | null;
          group: Omit<GroupView, "confirmed"> | null;
          task: TaskView | null;
          target: MarkerRef | null;
      }
    | { kind: "grouping"; group: GroupView | null }
    | { kind: "share"; share: ShareView | null }
    | { kind: "challenge"; challenge: ChallengeView | null }
    | { kind: "diary"; diary: DiaryView | null; my_turn: boolean }
    | { kind: "discussion"; prompts: string[] }
    | { kind: "ended"; summary: Json | null };

const strip_next = (log: DiscoveryItem[]): Omit<DiscoveryItem, "next_target">[] =>
    log.map(({ next_target: _next, ...rest }) => rest);

const roleplay_turn = (vm: ClientViewModel): boolean => {
    if (vm.persona === null || vm.roleplay === null || !vm.roleplay.ack_required) {
        return false;
    }
    const { speaker, speaker_id } = vm.roleplay;
    if (speaker === "teacher") {
        return vm.persona.role === "teacher";
    }
    if (speaker === "player") {
        return speaker_id === vm.persona.player_id;
    }
    return vm.persona.role === "player";
};

/**
 * The one screen the current phase puts in front of this client.
 *
 * Confirmation flags are deliberately absent from the puzzle screens:
 * reaching a puzzle phase implies the pairing handshake finished, and
 * a catch-up view does not restate it.
 */
export function visible_screen(vm: ClientViewModel): Screen {
    if (vm.persona === null) {
        return { kind: "join" };
    }
    switch (vm.phase) {
        case "Lobby":
            return { kind: "lobby", roster: vm.roster };
        case "RegisterRoleplay":
            return { kind: "roleplay", prompt: vm.roleplay, my_turn: roleplay_turn(vm) };
        case "NotepadDiscovery":
            return {
                kind: "notepad",
                track: vm.notepad?.track ?? null,
                target: vm.notepad?.target ?? null,
            };
        case "IndividualDiscovery":
            return {
                kind: "discovery",
                track: vm.notepad?.track ?? null,
                target: vm.target,
                log: strip_next(vm.log),
            };
        case "PairFormation":
            return { kind: "pairing", pair: vm.pair };
        case "PairPuzzle": {
            const pair = vm.pair === null ? null : (({ confirmed: _c, ...rest }) => rest)(vm.pair);
            return {
                kind: "puzzle",
                scope: "pair",
                pair,
                group: null,
                task: vm.task,
                target: vm.target,
            };
        }
        case "GroupFormation":
            return { kind: "grouping", group: vm.group };
        case "GroupPuzzle": {
            const group =
                vm.group === null ? null : (({ confirmed: _c, ...rest }) => rest)(vm.group);
            return {
                kind: "puzzle",
                scope: "group",
                pair: null,
                group,
                task: vm.task,
                target: null,
            };
        }
        case "TeacherShare":
            return { kind: "share", share: vm.share };
        case "TimedChallenge":
            return { kind: "challenge", challenge: vm.challenge };
        case "DiaryCircle": {
            const my_turn =
                vm.persona !== null && vm.diary?.turn?.holder_id === vm.persona.player_id;
            return { kind: "diary", diary: vm.diary, my_turn };
        }
        case "Discussion":
            return { kind: "discussion", prompts: vm.prompts };
        case "Ended":
            return { kind: "ended", summary: vm.summary };
    }
}
