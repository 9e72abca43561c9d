/**
 * End-to-end run against a real host process: a teacher and three
 * children join over WebSocket, force an early start, and play every
 * phase through to the goodbye screen.  Along the way we check the two
 * properties a classroom actually leans on: pausing freezes play until
 * resume, and a reloaded tablet comes back showing the same screen it
 * showed before the reload.
 */

import { afterAll, beforeAll, describe, expect, test } from "vitest";

import { visible_screen } from "../src/model.js";
import {
    type Cast,
    Host,
    Player,
    drain_plan,
    finish,
    load_scenario,
    pair_code,
    run_challenge,
    run_diary,
    run_grouping,
    run_notepad,
    run_pairing,
    run_roleplay,
    run_share,
    solve_group,
    solve_pair,
} from "./helpers/driver.js";

const ROOM = "KDX3M7";

describe("a live session", () => {
    let host: Host;

    beforeAll(async () => {
        host = await Host.start();
        await host.open_room(ROOM, 7);
    });

    afterAll(() => {
        host?.stop();
    });

    test("three children and a teacher play start to finish", async () => {
        const scenario = load_scenario();
        const teacher = await Player.join(host, ROOM, "Ms. Keller");
        const ana = await Player.join(host, ROOM, "Ana");
        let ben = await Player.join(host, ROOM, "Ben");
        const cole = await Player.join(host, ROOM, "Cole");
        const cast = (): Cast => ({ teacher, players: [ana, ben, cole] });
        const everyone = (): Player[] => [teacher, ana, ben, cole];

        expect(teacher.vm.persona?.role).toBe("teacher");
        expect(ana.vm.persona?.player_id).toBe("p1");
        expect(ana.vm.session).toBe(ROOM);
        expect(visible_screen(ana.vm).kind).toBe("lobby");

        // Half the class is missing, so a plain start must bounce.
        teacher.send("cmd", { action: "start", args: {} });
        await teacher.wait((vm) => vm.banner !== null, "early start is refused");
        expect(teacher.vm.banner?.code).toBe("not_allowed");
        expect(teacher.vm.banner?.detail).toContain("need 6 players");
        expect(teacher.vm.phase).toBe("Lobby");

        teacher.send("cmd", { action: "start", args: { force: true } });
        await Promise.all(everyone().map((p) => p.wait_phase("RegisterRoleplay")));

        await run_roleplay(cast());
        await Promise.all(everyone().map((p) => p.wait_phase("NotepadDiscovery")));

        await run_notepad(cast());
        await Promise.all(cast().players.map(drain_plan));
        await Promise.all(everyone().map((p) => p.wait_phase("PairFormation")));

        await run_pairing(cast());
        await Promise.all(everyone().map((p) => p.wait_phase("PairPuzzle")));

        // -- pause blocks play until resume ------------------------------
        const sender = cast().players.find((p) => p.vm.pair?.role === "sender");
        expect(sender).toBeDefined();
        teacher.send("cmd", { action: "pause" });
        await Promise.all(everyone().map((p) => p.wait((vm) => vm.paused, `${p.name} pauses`)));

        sender!.send("puzzle_submit", { code: pair_code(cast(), scenario) });
        await sender!.wait((vm) => vm.banner?.code === "paused", "submit bounces while paused");
        expect(sender!.vm.task?.solved).toBe(false);
        expect(teacher.vm.phase).toBe("PairPuzzle");

        teacher.send("cmd", { action: "resume" });
        await Promise.all(everyone().map((p) => p.wait((vm) => !vm.paused, `${p.name} resumes`)));

        // -- a reload rebuilds the same screen from the catch-up view ----
        const before = {
            phase: ben.vm.phase,
            roster: ben.vm.roster,
            screen: visible_screen(ben.vm),
        };
        ben.drop();
        await teacher.wait(
            (vm) => vm.roster.find((r) => r.name === "Ben")?.connected === false,
            "host notices the dead socket",
        );
        ben = await Player.join(host, ROOM, "Ben");
        expect(ben.vm.reconnect).toBe(true);
        expect({
            phase: ben.vm.phase,
            roster: ben.vm.roster,
            screen: visible_screen(ben.vm),
        }).toEqual(before);

        // -- and play continues where it left off ------------------------
        await solve_pair(cast(), scenario);
        await run_grouping(cast());
        await Promise.all(everyone().map((p) => p.wait_phase("GroupPuzzle")));

        await solve_group(cast(), scenario);
        await Promise.all(everyone().map((p) => p.wait_phase("TeacherShare")));

        await run_share(cast());
        await Promise.all(everyone().map((p) => p.wait_phase("TimedChallenge")));

        await run_challenge(cast(), scenario);
        await Promise.all(everyone().map((p) => p.wait_phase("DiaryCircle")));
        expect(ana.vm.choreography?.action).toBe("form_circle");

        await run_diary(cast());
        await Promise.all(everyone().map((p) => p.wait_phase("Discussion")));
        await teacher.wait((vm) => vm.prompts !== null, "teacher sees discussion prompts");
        expect(teacher.vm.prompts?.length).toBeGreaterThan(0);

        await finish(cast());
        for (const player of everyone()) {
            expect(player.vm.phase).toBe("Ended");
            expect(player.vm.summary).not.toBeNull();
            expect(visible_screen(player.vm).kind).toBe("ended");
        }

        const info = await host.admin("GET", `/rooms/${ROOM}`);
        expect(info.status).toBe(200);
        expect(info.body["phase"]).toBe("Ended");

        for (const player of everyone()) {
            player.close();
        }
    }, 120_000);
});
