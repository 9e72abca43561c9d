/**
 * WebSocket transport.  One socket per tab; frames go out with a
 * strictly increasing per-connection sequence number and come back
 * through the self-synchronizing line decoder, so a mangled message
 * never takes the session down.
 */

import type { Frame, Payload } from "./protocol.js";
import { FrameDecoder, encode_frame, make_frame } from "./protocol.js";

export interface GameSocketHandlers {
    on_frame(frame: Frame): void;
    on_open?(): void;
    on_close?(): void;
}

export class GameSocket {
    private ws: WebSocket;
    private decoder = new FrameDecoder();
    private seq = 0;
    private session = "";

    constructor(url: string, handlers: GameSocketHandlers) {
        this.ws = new WebSocket(url);
        this.ws.onopen = () => handlers.on_open?.();
        this.ws.onclose = () => handlers.on_close?.();
        this.ws.onmessage = (event: MessageEvent) => {
            if (typeof event.data !== "string") {
                return;
            }
            for (const frame of this.decoder.feed(event.data)) {
                if (frame.session !== "") {
                    this.session = frame.session;
                }
                handlers.on_frame(frame);
            }
        };
    }

    get open(): boolean {
        return this.ws.readyState === WebSocket.OPEN;
    }

    close(): void {
        this.ws.close();
    }

    send(type: string, payload: Payload): void {
        this.seq += 1;
        const line = encode_frame(make_frame(type, payload, this.seq, this.session));
        this.ws.send(line.slice(0, -1));
    }

    hello(room: string, name: string): void {
        this.send("hello", { room, name });
    }

    bye(): void {
        this.send("bye", {});
    }

    cmd(action: string, args: Payload = {}): void {
        this.send("cmd", { action, args });
    }

    role_ack(line_index: number): void {
        this.send("role_ack", { line_index });
    }

    scan(marker_id: string): void {
        this.send("scan", { marker_id });
    }

    proximity(token: string): void {
        this.send("proximity", { token });
    }

    puzzle_submit(code: string): void {
        this.send("puzzle_submit", { code });
    }

    teacher_share_done(group_id: string): void {
        this.send("teacher_share_done", { group_id });
    }

    challenge_scan(marker_id: string): void {
        this.send("challenge_scan", { marker_id });
    }

    read_done(order: number): void {
        this.send("read_done", { order });
    }

    ping(t: number): void {
        this.send("ping", { t });
    }
}
