/**
 * Single-page app glue: URL params pick the room, one socket feeds the
 * fold, and every frame repaints from the model.  Facilitator and
 * teacher identities get the steering board on top of the same screen
 * a student sees; there is no separate build.
 */

import { facilitator_view } from "./facilitator.js";
import { EmptyInput, normalize_marker_code } from "./markers.js";
import type { ClientViewModel, Screen } from "./model.js";
import { apply_server_message, initial_vm, visible_screen } from "./model.js";
import { GameSocket } from "./net.js";
import { normalize_token } from "./protocol.js";

let vm: ClientViewModel = initial_vm();
let socket: GameSocket | null = null;
let form_note = "";

const params = new URLSearchParams(window.location.search);
const setting = (key: string, fallback: string): string => (params.get(key) ?? fallback).trim();

const room = setting("room", "");
const name = setting("name", "");
const server = setting("server", window.location.host || "127.0.0.1:8430");
const ws_url = `ws://${server}/ws`;

const esc = (text: string): string =>
    text
        .replace(/&/g, "&amp;")
        .replace(/</g, "&lt;")
        .replace(/>/g, "&gt;")
        .replace(/"/g, "&quot;");

const app = (): HTMLElement => {
    const el = document.getElementById("app");
    if (el === null) {
        throw new Error("missing #app element");
    }
    return el;
};

function connect(to_room: string, as_name: string): void {
    vm = initial_vm();
    socket?.close();
    socket = new GameSocket(ws_url, {
        on_open: () => {
            vm = { ...vm, connection: "open" };
            socket?.hello(to_room, as_name);
            render();
        },
        on_close: () => {
            vm = { ...vm, connection: "closed" };
            render();
            // A reload or a dropped radio both land here; the hello on
            // reconnect makes the host replay the whole current screen.
            window.setTimeout(() => connect(to_room, as_name), 2000);
        },
        on_frame: (frame) => {
            vm = apply_server_message(vm, frame);
            render();
        },
    });
    render();
}

function input_value(id: string): string {
    const el = document.getElementById(id);
    return el instanceof HTMLInputElement ? el.value : "";
}

function send_scan(kind: "scan" | "challenge_scan"): void {
    try {
        const code = normalize_marker_code(input_value("marker"));
        if (kind === "scan") {
            socket?.scan(code);
        } else {
            socket?.challenge_scan(code);
        }
    } catch (exc) {
        if (!(exc instanceof EmptyInput)) {
            throw exc;
        }
        vm = { ...vm, banner: { code: "empty_input", detail: "type the marker code first" } };
        render();
    }
}

const handlers: { [key: string]: () => void } = {
    join: () => connect(input_value("room"), input_value("name")),
    ack: () => {
        if (vm.phase === "NotepadDiscovery") {
            socket?.role_ack(0);
        } else if (vm.roleplay !== null) {
            socket?.role_ack(vm.roleplay.line_index);
        }
    },
    scan: () => send_scan(vm.phase === "TimedChallenge" ? "challenge_scan" : "scan"),
    proximity: () => socket?.proximity(normalize_token(input_value("token"))),
    submit_code: () => socket?.puzzle_submit(input_value("code")),
    read_done: () => {
        if (vm.diary?.turn !== null && vm.diary !== null) {
            socket?.read_done(vm.diary.turn.order);
        }
    },
    share_done: () => socket?.teacher_share_done(input_value("visited").trim()),
    cmd_start: () => socket?.cmd("start"),
    cmd_force_start: () => socket?.cmd("start", { force: true }),
    cmd_pause: () => socket?.cmd("pause"),
    cmd_resume: () => socket?.cmd("resume"),
    cmd_skip_phase: () => socket?.cmd("skip_phase"),
    cmd_restore: () => socket?.cmd("restore", {}),
};

function screen_html(screen: Screen): string {
    switch (screen.kind) {
        case "join":
            return `
                <h2>Join a session</h2>
                <label>Room <input id="room" value="${esc(room)}"></label>
                <label>Name <input id="name" value="${esc(name)}"></label>
                <button data-act="join">Join</button>
                <p class="note">${esc(form_note)}</p>`;
        case "lobby":
            return `
                <h2>Waiting to start</h2>
                <ul>${screen.roster
                    .map(
                        (row) =>
                            `<li class="${row.connected ? "here" : "away"}">${esc(row.name)} (${esc(row.role)})</li>`,
                    )
                    .join("")}</ul>`;
        case "roleplay": {
            if (screen.prompt === null) {
                return "<h2>Get ready...</h2>";
            }
            const button = screen.my_turn ? '<button data-act="ack">Done, continue</button>' : "";
            return `<h2>${esc(screen.prompt.speaker)} speaks</h2>
                <p class="script">${esc(screen.prompt.text)}</p>${button}`;
        }
        case "notepad":
            return `
                <h2>Your notepad (track ${esc(screen.track ?? "?")})</h2>
                <p>First stop: ${esc(screen.target?.location_label ?? "see the board")}</p>
                <button data-act="ack">Got it</button>`;
        case "discovery": {
            const where =
                screen.target === null
                    ? "Nothing new until your pair code opens a door."
                    : `Head to: ${esc(screen.target.location_label)}`;
            const found = screen.log
                .map((item) => `<li><b>${esc(item.artifact_id)}</b> ${esc(item.reveal_text)}</li>`)
                .join("");
            return `
                <h2>Search the room</h2>
                <p>${where}</p>
                <label>Marker <input id="marker"></label>
                <button data-act="scan">Scan</button>
                <ul class="log">${found}</ul>`;
        }
        case "pairing": {
            if (screen.pair === null) {
                return "<h2>Finding you a partner...</h2>";
            }
            const names = screen.pair.partners.map((x) => esc(x.name)).join(", ");
            if (screen.pair.token !== null) {
                return `<h2>Show this to ${names}</h2><p class="token">${esc(screen.pair.token)}</p>`;
            }
            return `
                <h2>Find ${names}</h2>
                <label>Their code <input id="token"></label>
                <button data-act="proximity">Confirm</button>
                <p>${screen.pair.confirmed ? "Confirmed!" : "Type the code from their screen."}</p>`;
        }
        case "puzzle": {
            const task = screen.task;
            const header = screen.scope === "pair" ? "Crack your pair code" : "Solve together";
            const prompt = task?.prompt_text !== null ? `<p>${esc(task?.prompt_text ?? "")}</p>` : "";
            if (task?.solved) {
                const opened =
                    task.unlocks === null ? "" : ` It opened: ${esc(task.unlocks.location_label)}.`;
                return `<h2>${header}</h2><p>Solved with ${esc(task.code ?? "")}.${opened}</p>
                    <label>Marker <input id="marker"></label>
                    <button data-act="scan">Scan</button>`;
            }
            return `<h2>${header}</h2>${prompt}
                <label>Code (${task?.code_length ?? "?"} glyphs) <input id="code"></label>
                <button data-act="submit_code">Try it</button>`;
        }
        case "grouping": {
            if (screen.group === null) {
                return "<h2>Forming groups...</h2>";
            }
            const names = screen.group.members.map((x) => esc(x.name)).join(", ");
            if (screen.group.token !== null) {
                return `<h2>Gather your group: ${names}</h2><p class="token">${esc(screen.group.token)}</p>`;
            }
            return `
                <h2>Join ${names}</h2>
                <label>Anchor code <input id="token"></label>
                <button data-act="proximity">Confirm</button>`;
        }
        case "share": {
            const counts =
                screen.share === null
                    ? "starting..."
                    : `${screen.share.groups_done} of ${screen.share.groups_total} groups`;
            const fragments = (screen.share?.fragments ?? [])
                .map((f) => `<li>${esc(f.text)}</li>`)
                .join("");
            return `<h2>Teacher is visiting tables</h2><p>${counts}</p><ul>${fragments}</ul>`;
        }
        case "challenge": {
            const c = screen.challenge;
            const status =
                c === null
                    ? "Get ready..."
                    : c.complete === null
                      ? `${c.covered} of ${c.markers_total} markers, ${c.seconds}s on the clock`
                      : c.complete
                        ? "All markers found!"
                        : `Time! ${c.covered} of ${c.markers_total}; great hustle.`;
            return `
                <h2>Beat the clock</h2>
                <p>${status}</p>
                <label>Marker <input id="marker"></label>
                <button data-act="scan">Scan</button>`;
        }
        case "diary": {
            const turn = screen.diary?.turn ?? null;
            const reading =
                turn === null
                    ? "..."
                    : screen.my_turn
                      ? "Your page. Read it aloud, then tap done."
                      : `${esc(turn.holder_name)} is reading.`;
            const pages = (screen.diary?.pages ?? [])
                .map((page) => `<li value="${page.order}">${esc(page.text)}</li>`)
                .join("");
            const button = screen.my_turn ? '<button data-act="read_done">Done reading</button>' : "";
            return `<h2>Diary circle</h2><p>${reading}</p>${button}<ol class="pages">${pages}</ol>`;
        }
        case "discussion": {
            const prompts = screen.prompts.map((text) => `<li>${esc(text)}</li>`).join("");
            return `<h2>Talk it over</h2><ul>${prompts}</ul>`;
        }
        case "ended":
            return "<h2>Session complete</h2><p>Thank you for looking after each other.</p>";
    }
}

function board_html(): string {
    if (vm.persona === null || (vm.persona.role !== "facilitator" && vm.persona.role !== "teacher")) {
        return "";
    }
    const board = facilitator_view(vm);
    const buttons = board.commands
        .map((cmd) => `<button data-act="cmd_${cmd}">${cmd.replace("_", " ")}</button>`)
        .join(" ");
    const force =
        vm.phase === "Lobby" ? '<button data-act="cmd_force_start">start (small class)</button>' : "";
    const share =
        vm.phase === "TeacherShare" && vm.persona.role === "teacher"
            ? '<label>Visited group <input id="visited"></label><button data-act="share_done">Mark done</button>'
            : "";
    const checkpoints = board.checkpoints.length
        ? `<p class="note">latest checkpoint: ${esc(board.checkpoints[board.checkpoints.length - 1]!.name)}</p>`
        : "";
    return `<aside class="board">
        <h3>Board: ${board.progress.players_connected}/${board.progress.players_total} here</h3>
        ${buttons} ${force} ${share} ${checkpoints}
    </aside>`;
}

function render(): void {
    const screen = visible_screen(vm);
    const banner =
        vm.banner === null
            ? ""
            : `<div class="banner">${esc(vm.banner.code)} ${esc(vm.banner.detail)}</div>`;
    const paused = vm.paused ? '<div class="paused">Paused: eyes on the teacher.</div>' : "";
    const status = `${vm.connection} | ${vm.phase}${vm.title ? " | " + esc(vm.title) : ""}`;
    app().innerHTML = `
        <header><span class="status">${status}</span></header>
        ${banner} ${paused}
        <main>${screen_html(screen)}</main>
        ${board_html()}`;
    for (const el of app().querySelectorAll<HTMLElement>("[data-act]")) {
        const act = el.dataset["act"];
        if (act !== undefined && act in handlers) {
            el.onclick = handlers[act]!;
        }
    }
}

if (room !== "" && name !== "") {
    connect(room, name);
} else {
    form_note = "Ask your teacher for the room code.";
    render();
}
