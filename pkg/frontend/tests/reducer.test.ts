import { describe, expect, test } from "vitest";

import type { ClientViewModel } from "../src/model.js";
import { apply_server_message, initial_vm, visible_screen } from "../src/model.js";
import type { Frame, Payload } from "../src/protocol.js";
import { make_frame } from "../src/protocol.js";

const s2c = (type: string, payload: Payload, seq = 1): Frame =>
    make_frame(type, payload, seq, "KDX3M7");

const fold = (frames: Frame[], from: ClientViewModel = initial_vm()): ClientViewModel =>
    frames.reduce(apply_server_message, from);

const welcome = (role = "player", phase = "Lobby"): Frame =>
    s2c("welcome", {
        player_id: "p3",
        name: "Ana",
        role,
        phase,
        paused: false,
        scenario_id: "sc1",
        title: "The Empty Desk",
        reconnect: false,
    });

describe("apply_server_message", () => {
    test("welcome installs the persona and session", () => {
        const vm = fold([welcome()]);
        expect(vm.persona).toEqual({ player_id: "p3", name: "Ana", role: "player" });
        expect(vm.phase).toBe("Lobby");
        expect(vm.title).toBe("The Empty Desk");
        expect(vm.session).toBe("KDX3M7");
        expect(visible_screen(vm).kind).toBe("lobby");
    });

    test("is pure: the input model is never mutated", () => {
        const before = fold([welcome()]);
        const snapshot = JSON.parse(JSON.stringify(before)) as ClientViewModel;
        apply_server_message(before, s2c("roster", { players: [] }));
        apply_server_message(before, s2c("phase_change", { phase: "RegisterRoleplay", paused: false }));
        expect(before).toEqual(snapshot);
    });

    test("is deterministic: same frames, same model", () => {
        const frames = [
            welcome(),
            s2c("phase_change", { phase: "RegisterRoleplay", paused: false }),
            s2c("role_prompt", { line_index: 0, speaker: "teacher", text: "Morning.", ack_required: true }),
            s2c("error", { code: "not_your_turn" }),
        ];
        expect(fold(frames)).toEqual(fold(frames));
    });

    test("unknown frame types become notices without touching the screen", () => {
        const vm = fold([welcome()]);
        const after = apply_server_message(vm, s2c("glitter_cannon", { intensity: 11 }));
        expect(after.notices).toEqual(["unknown frame 'glitter_cannon'"]);
        expect(visible_screen(after)).toEqual(visible_screen(vm));
        expect(after.phase).toBe(vm.phase);
    });

    test("errors raise a banner but never block the fold", () => {
        const vm = fold([
            welcome(),
            s2c("error", { code: "paused", detail: "" }),
            s2c("roster", { players: [{ player_id: "p3", name: "Ana", role: "player", connected: true }] }),
        ]);
        expect(vm.banner).toEqual({ code: "paused", detail: "" });
        expect(vm.roster).toHaveLength(1);
    });

    test("pause and resume ride phase_change without a transition", () => {
        let vm = fold([
            welcome(),
            s2c("phase_change", { phase: "IndividualDiscovery", paused: false }),
            s2c("notepad", { track: "A", target: { marker_id: "m1", location_label: "coat hooks" } }),
        ]);
        vm = apply_server_message(vm, s2c("phase_change", { phase: "IndividualDiscovery", paused: true }));
        expect(vm.paused).toBe(true);
        expect(vm.notepad?.track).toBe("A");
        vm = apply_server_message(vm, s2c("phase_change", { phase: "IndividualDiscovery", paused: false }));
        expect(vm.paused).toBe(false);
    });

    test("a transition drops slices the new phase will refill", () => {
        const vm = fold([
            welcome(),
            s2c("phase_change", { phase: "PairPuzzle", paused: false }),
            s2c("puzzle_task", { kind: "pair", unit_id: "u1", code_length: 2 }),
            s2c("phase_change", { phase: "GroupFormation", paused: false }),
        ]);
        expect(vm.task).toBeNull();
        expect(visible_screen(vm)).toEqual({ kind: "grouping", group: null });
    });

    test("choreography arrives with the transition and clears on the next one", () => {
        let vm = fold([
            welcome(),
            s2c("phase_change", { phase: "DiaryCircle", paused: false, choreography: "form_circle" }),
        ]);
        expect(vm.choreography).toEqual({ action: "form_circle", execute_at: null });
        vm = apply_server_message(vm, s2c("phase_change", { phase: "Discussion", paused: false }));
        expect(vm.choreography).toBeNull();
    });

    test("an explicit execute_at survives the fold", () => {
        const vm = fold([
            welcome(),
            s2c("phase_change", {
                phase: "DiaryCircle",
                paused: false,
                choreography: "form_circle",
                execute_at: 90_000,
            }),
        ]);
        expect(vm.choreography).toEqual({ action: "form_circle", execute_at: 90_000 });
    });

    test("discovery frames append to the log and steer the target", () => {
        const vm = fold([
            welcome(),
            s2c("phase_change", { phase: "IndividualDiscovery", paused: false }),
            s2c("notepad", { track: "A", target: { marker_id: "m1", location_label: "coat hooks" } }),
            s2c("discovery", {
                artifact_id: "satchel",
                marker_id: "m1",
                reveal_text: "A satchel.",
                fragments: [{ fragment_id: "f1", text: "Hook 12." }],
                next_target: { marker_id: "m2", location_label: "window sill" },
            }),
        ]);
        expect(vm.log).toHaveLength(1);
        expect(vm.target?.marker_id).toBe("m2");
        const screen = visible_screen(vm);
        expect(screen.kind).toBe("discovery");
        if (screen.kind === "discovery") {
            expect(screen.target?.location_label).toBe("window sill");
            expect(screen.log[0]).not.toHaveProperty("next_target");
        }
    });

    test("pair assignment, confirmation and the puzzle result", () => {
        let vm = fold([
            welcome(),
            s2c("phase_change", { phase: "PairFormation", paused: false }),
            s2c("pair_assign", {
                unit_id: "u1",
                role: "receiver",
                partners: [{ player_id: "p5", name: "Ben" }],
            }),
        ]);
        expect(vm.pair).toEqual({
            unit_id: "u1",
            role: "receiver",
            partners: [{ player_id: "p5", name: "Ben" }],
            token: null,
            confirmed: false,
        });
        vm = fold(
            [
                s2c("pair_confirmed", { unit_id: "u1", members: [] }),
                s2c("phase_change", { phase: "PairPuzzle", paused: false }),
                s2c("puzzle_task", { kind: "pair", unit_id: "u1", code_length: 2 }),
                s2c("puzzle_result", {
                    unit_id: "u1",
                    accepted: true,
                    code: "47",
                    unlocks: { marker_id: "m5", location_label: "reading nook" },
                }),
            ],
            vm,
        );
        expect(vm.pair?.confirmed).toBe(true);
        expect(vm.task?.solved).toBe(true);
        expect(vm.task?.unlocks?.marker_id).toBe("m5");
    });

    test("teacher share keeps fragments but never a countdown", () => {
        const vm = fold([
            welcome("teacher"),
            s2c("phase_change", { phase: "TeacherShare", paused: false }),
            s2c("share_progress", { groups_done: 0, groups_total: 2 }),
            s2c("teacher_share", { fragment_id: "tf1", text: "From the office.", remaining: 1 }),
            s2c("share_progress", { groups_done: 1, groups_total: 2 }),
        ]);
        expect(vm.share).toEqual({
            groups_done: 1,
            groups_total: 2,
            fragments: [{ fragment_id: "tf1", text: "From the office." }],
        });
    });

    test("challenge lifecycle folds into one slice", () => {
        const vm = fold([
            welcome(),
            s2c("phase_change", { phase: "TimedChallenge", paused: false }),
            s2c("challenge_start", { seconds: 180, markers_total: 8 }),
            s2c("challenge_progress", { covered: 3, total: 8 }),
            s2c("challenge_result", { complete: true, covered: 8, total: 8, encouragement: false }),
        ]);
        expect(vm.challenge).toEqual({
            seconds: 180,
            markers_total: 8,
            covered: 8,
            complete: true,
            encouragement: false,
        });
    });

    test("diary pages and the reading turn", () => {
        const vm = fold([
            welcome(),
            s2c("phase_change", { phase: "DiaryCircle", paused: false, choreography: "form_circle" }),
            s2c("diary_page", { pages: [{ order: 0, text: "First day of term." }] }),
            s2c("read_turn", { order: 0, holder_id: "p3", holder_name: "Ana" }),
        ]);
        const screen = visible_screen(vm);
        expect(screen).toEqual({
            kind: "diary",
            diary: {
                pages: [{ order: 0, text: "First day of term." }],
                turn: { order: 0, holder_id: "p3", holder_name: "Ana" },
            },
            my_turn: true,
        });
    });
});

describe("roleplay turns", () => {
    const line = (speaker: string, extra: Payload = {}): Frame =>
        s2c("role_prompt", { line_index: 0, speaker, text: "...", ack_required: true, ...extra });
    const in_roleplay = (role: string, prompt: Frame): ClientViewModel =>
        fold([welcome(role), s2c("phase_change", { phase: "RegisterRoleplay", paused: false }), prompt]);

    test("teacher lines belong to the teacher", () => {
        expect(visible_screen(in_roleplay("teacher", line("teacher")))).toMatchObject({ my_turn: true });
        expect(visible_screen(in_roleplay("player", line("teacher")))).toMatchObject({ my_turn: false });
    });

    test("player lines name one speaker", () => {
        expect(
            visible_screen(in_roleplay("player", line("player", { speaker_id: "p3" }))),
        ).toMatchObject({ my_turn: true });
        expect(
            visible_screen(in_roleplay("player", line("player", { speaker_id: "p9" }))),
        ).toMatchObject({ my_turn: false });
    });

    test("all-lines ask every player but not the adults", () => {
        expect(visible_screen(in_roleplay("player", line("all")))).toMatchObject({ my_turn: true });
        expect(visible_screen(in_roleplay("teacher", line("all")))).toMatchObject({ my_turn: false });
    });

    test("lines without an ack never show a button", () => {
        const prompt = s2c("role_prompt", { line_index: 3, speaker: "teacher", text: "...", ack_required: false });
        expect(visible_screen(in_roleplay("teacher", prompt))).toMatchObject({ my_turn: false });
    });
});

describe("screen reconstruction from a catch-up view", () => {
    // The incremental path: a player lives through notepad, discovery
    // and pairing.  The replayed path: the same player reconnects and
    // receives only welcome plus the catch-up frames the host actually
    // sends for PairPuzzle.  Both must render the same screen.
    test("mid-puzzle reload lands on the identical screen", () => {
        const lived = fold([
            welcome(),
            s2c("roster", { players: [{ player_id: "p3", name: "Ana", role: "player", connected: true }] }),
            s2c("phase_change", { phase: "NotepadDiscovery", paused: false }),
            s2c("notepad", { track: "A", target: { marker_id: "m1", location_label: "coat hooks" } }),
            s2c("phase_change", { phase: "IndividualDiscovery", paused: false }),
            s2c("discovery", {
                artifact_id: "satchel",
                marker_id: "m1",
                reveal_text: "A satchel.",
                fragments: [],
                next_target: { marker_id: "m3", location_label: "bookshelf" },
            }),
            s2c("discovery", {
                artifact_id: "locket",
                marker_id: "m3",
                reveal_text: "A locket.",
                fragments: [{ fragment_id: "f2", text: "Inside, two photos." }],
                next_target: null,
            }),
            s2c("phase_change", { phase: "PairFormation", paused: false }),
            s2c("pair_assign", { unit_id: "u1", role: "receiver", partners: [{ player_id: "p5", name: "Ben" }] }),
            s2c("pair_confirmed", { unit_id: "u1", members: [] }),
            s2c("phase_change", { phase: "PairPuzzle", paused: false }),
            s2c("puzzle_task", { kind: "pair", unit_id: "u1", code_length: 2 }),
        ]);
        const replayed = fold([
            s2c("welcome", {
                player_id: "p3",
                name: "Ana",
                role: "player",
                phase: "PairPuzzle",
                paused: false,
                scenario_id: "sc1",
                title: "The Empty Desk",
                reconnect: true,
            }),
            s2c("roster", { players: [{ player_id: "p3", name: "Ana", role: "player", connected: true }] }),
            s2c("discovery", {
                artifact_id: "satchel",
                marker_id: "m1",
                reveal_text: "A satchel.",
                fragments: [],
                next_target: null,
            }),
            s2c("discovery", {
                artifact_id: "locket",
                marker_id: "m3",
                reveal_text: "A locket.",
                fragments: [{ fragment_id: "f2", text: "Inside, two photos." }],
                next_target: null,
            }),
            s2c("pair_assign", { unit_id: "u1", role: "receiver", partners: [{ player_id: "p5", name: "Ben" }] }),
            s2c("puzzle_task", { kind: "pair", unit_id: "u1", code_length: 2 }),
        ]);
        expect(visible_screen(replayed)).toEqual(visible_screen(lived));
        expect(replayed.phase).toBe(lived.phase);
        expect(replayed.roster).toEqual(lived.roster);
    });
});
