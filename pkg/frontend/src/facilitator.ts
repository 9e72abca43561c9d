/**
 * Facilitator board: the same frame fold as the student handset, but
 * projected for the adult steering the room.  Only commands that are
 * legal in the current phase get rendered, so the board can never offer
 * an action the host would refuse.
 */

import type {
    Banner,
    CheckpointNote,
    ClientViewModel,
    Phase,
    ReadTurn,
    RosterRow,
} from "./model.js";

export type Command = "start" | "pause" | "resume" | "skip_phase" | "restore";

export interface BoardProgress {
    players_connected: number;
    players_total: number;
    share: { done: number; total: number } | null;
    challenge: { covered: number; total: number; seconds: number } | null;
    reading: ReadTurn | null;
}

export interface FacilitatorViewModel {
    phase: Phase;
    paused: boolean;
    roster: RosterRow[];
    progress: BoardProgress;
    commands: Command[];
    checkpoints: CheckpointNote[];
    prompts: string[];
    banner: Banner | null;
    notices: string[];
}

/**
 * Mirror of the host's command rules.  start only opens a lobby;
 * pause and resume toggle mid-session; skip_phase works any time a
 * phase is actually running; restore stays a facilitator privilege
 * because the host reconciles every connection afterwards.
 */
export function legal_commands(phase: Phase, paused: boolean, role: string): Command[] {
    if (role !== "facilitator" && role !== "teacher") {
        return [];
    }
    const commands: Command[] = [];
    if (phase === "Lobby") {
        commands.push("start");
    }
    if (phase !== "Lobby" && phase !== "Ended") {
        commands.push(paused ? "resume" : "pause");
        commands.push("skip_phase");
    }
    if (role === "facilitator") {
        commands.push("restore");
    }
    return commands;
}

export function facilitator_view(vm: ClientViewModel): FacilitatorViewModel {
    const players = vm.roster.filter((row) => row.role === "player");
    return {
        phase: vm.phase,
        paused: vm.paused,
        roster: vm.roster,
        progress: {
            players_connected: players.filter((row) => row.connected).length,
            players_total: players.length,
            share:
                vm.share === null
                    ? null
                    : { done: vm.share.groups_done, total: vm.share.groups_total },
            challenge:
                vm.challenge === null
                    ? null
                    : {
                          covered: vm.challenge.covered,
                          total: vm.challenge.markers_total,
                          seconds: vm.challenge.seconds,
                      },
            reading: vm.diary?.turn ?? null,
        },
        commands: legal_commands(vm.phase, vm.paused, vm.persona?.role ?? ""),
        checkpoints: vm.checkpoints,
        prompts: vm.prompts,
        banner: vm.banner,
        notices: vm.notices,
    };
}
