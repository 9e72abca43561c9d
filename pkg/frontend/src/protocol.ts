/**
 * Wire protocol: LF-delimited JSON frames, envelopes, and pairing tokens.
 *
 * Every frame is one line: a UTF-8 JSON object terminated by a single LF.
 * Encoding is canonical (sorted keys, compact separators, ASCII-only
 * escapes), so a frame encoded here is byte-identical to the same frame
 * encoded by the session host.  Framing is self-synchronizing: a corrupt
 * or oversized line is dropped and decoding resumes at the next LF.
 */

export const PROTOCOL_VERSION = 1;

// Glyphs chosen to survive being read aloud across a classroom: no 0/O,
// 1/I/L, 2/Z, 5/S, 8/B, G/6 or Q/O confusions.
export const TOKEN_ALPHABET = "ACDEFHJKLMNPRTUVWXY34679";
export const TOKEN_LENGTH = 4;

export const MAX_FRAME_BYTES = 64 * 1024;

export const C2S_TYPES: ReadonlySet<string> = new Set([
    "hello",
    "bye",
    "cmd",
    "role_ack",
    "scan",
    "proximity",
    "puzzle_submit",
    "teacher_share_done",
    "challenge_scan",
    "read_done",
    "ping",
]);

export const S2C_TYPES: ReadonlySet<string> = new Set([
    "welcome",
    "roster",
    "phase_change",
    "role_prompt",
    "notepad",
    "discovery",
    "pair_assign",
    "pair_confirmed",
    "puzzle_task",
    "puzzle_result",
    "group_assign",
    "group_confirmed",
    "teacher_share",
    "share_progress",
    "challenge_start",
    "challenge_progress",
    "challenge_result",
    "diary_page",
    "read_turn",
    "discussion_prompts",
    "hint",
    "error",
    "session_ended",
    "checkpoint_saved",
    "pong",
]);

export const ERROR_CODES: ReadonlySet<string> = new Set([
    "bad_frame",
    "bad_version",
    "bad_seq",
    "not_joined",
    "no_such_room",
    "unknown_identity",
    "superseded",
    "no_such_checkpoint",
    "room_full",
    "wrong_phase",
    "wrong_marker",
    "unknown_marker",
    "stale_token",
    "wrong_partner",
    "bad_code",
    "not_your_turn",
    "not_allowed",
    "duplicate",
    "paused",
]);

export type Json = null | boolean | number | string | Json[] | { [key: string]: Json };
export type Payload = { [key: string]: Json };

export interface Frame {
    session: string;
    seq: number;
    type: string;
    payload: Payload;
    v: number;
}

export class BadFrame extends Error {
    readonly reason: string;

    constructor(reason: string) {
        super(reason);
        this.name = "BadFrame";
        this.reason = reason;
    }
}

const escape_high = (text: string): string =>
    text.replace(/[-￿]/g, (ch) => {
        return "\\u" + ch.charCodeAt(0).toString(16).padStart(4, "0");
    });

/**
 * Canonical serialization: sorted keys, "," and ":" separators, every
 * code point above 0x7e escaped.  Matches the host byte for byte, which
 * is what lets transcripts and doc examples be compared as raw lines.
 */
export function canonical_json(value: Json): string {
    if (value === null || typeof value === "boolean") {
        return JSON.stringify(value);
    }
    if (typeof value === "number") {
        if (!Number.isFinite(value)) {
            throw new BadFrame("not_json");
        }
        return JSON.stringify(value);
    }
    if (typeof value === "string") {
        return escape_high(JSON.stringify(value));
    }
    if (Array.isArray(value)) {
        return "[" + value.map(canonical_json).join(",") + "]";
    }
    const keys = Object.keys(value).sort();
    const parts = keys.map((k) => escape_high(JSON.stringify(k)) + ":" + canonical_json(value[k]!));
    return "{" + parts.join(",") + "}";
}

export function make_frame(type: string, payload: Payload, seq = 0, session = ""): Frame {
    return { session, seq, type, payload, v: PROTOCOL_VERSION };
}

/** One canonical line, LF-terminated. */
export function encode_frame(frame: Frame): string {
    const doc: Payload = {
        v: frame.v,
        session: frame.session,
        seq: frame.seq,
        type: frame.type,
        payload: frame.payload,
    };
    return canonical_json(doc) + "\n";
}

const utf8_length = (line: string): number => new TextEncoder().encode(line).length;

const is_int = (value: Json | undefined): value is number =>
    typeof value === "number" && Number.isInteger(value);

/**
 * Parse a single line (without requiring the trailing LF).
 *
 * Throws BadFrame with a machine-readable reason on any malformation;
 * never throws anything else for arbitrary string input.
 */
export function decode_frame(line: string): Frame {
    if (utf8_length(line) > MAX_FRAME_BYTES) {
        throw new BadFrame("oversize");
    }
    let doc: Json;
    try {
        doc = JSON.parse(line) as Json;
    } catch {
        throw new BadFrame("not_json");
    }
    if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
        throw new BadFrame("not_object");
    }
    for (const key of ["v", "session", "seq", "type", "payload"]) {
        if (!(key in doc)) {
            throw new BadFrame(`missing_${key}`);
        }
    }
    if (!is_int(doc["v"]) || doc["v"] !== PROTOCOL_VERSION) {
        throw new BadFrame("bad_version");
    }
    if (typeof doc["session"] !== "string") {
        throw new BadFrame("bad_session");
    }
    if (!is_int(doc["seq"]) || doc["seq"] < 0) {
        throw new BadFrame("bad_seq");
    }
    if (typeof doc["type"] !== "string") {
        throw new BadFrame("bad_type");
    }
    const payload = doc["payload"];
    if (typeof payload !== "object" || payload === null || Array.isArray(payload)) {
        throw new BadFrame("bad_payload");
    }
    return {
        session: doc["session"],
        seq: doc["seq"],
        type: doc["type"],
        payload,
        v: doc["v"],
    };
}

/**
 * Incremental decoder over an arbitrary text stream.
 *
 * feed() returns the frames completed by the new text.  Lines that fail
 * to decode are counted and skipped; an overlong run without any LF
 * drops the buffered prefix once the next LF arrives, so the stream
 * re-synchronizes on line boundaries no matter what came before.
 */
export class FrameDecoder {
    private buffer = "";
    private discarding = false;
    dropped = 0;
    last_error: string | null = null;

    feed(data: string): Frame[] {
        const frames: Frame[] = [];
        this.buffer += data;
        for (;;) {
            const nl = this.buffer.indexOf("\n");
            if (nl < 0) {
                if (utf8_length(this.buffer) > MAX_FRAME_BYTES) {
                    this.buffer = "";
                    this.discarding = true;
                    this.dropped += 1;
                    this.last_error = "oversize";
                }
                return frames;
            }
            const line = this.buffer.slice(0, nl);
            this.buffer = this.buffer.slice(nl + 1);
            if (this.discarding) {
                // Tail of an oversized line already counted as dropped.
                this.discarding = false;
                continue;
            }
            if (line.trim() === "") {
                continue;
            }
            try {
                frames.push(decode_frame(line));
            } catch (exc) {
                if (!(exc instanceof BadFrame)) {
                    throw exc;
                }
                this.dropped += 1;
                this.last_error = exc.reason;
            }
        }
    }
}

/** Uppercase and strip separators a child might type ("ab-cd" -> "ABCD"). */
export function normalize_token(raw: string): string {
    let out = "";
    for (const ch of raw.toUpperCase()) {
        if (ch !== " " && ch !== "-" && ch !== "_" && ch !== ".") {
            out += ch;
        }
    }
    return out;
}

export function is_valid_token(token: string): boolean {
    return token.length === TOKEN_LENGTH && [...token].every((ch) => TOKEN_ALPHABET.includes(ch));
}
