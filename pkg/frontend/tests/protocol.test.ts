import { readFileSync } from "node:fs";
import { describe, expect, test } from "vitest";

import type { Frame } from "../src/protocol.js";
import {
    BadFrame,
    C2S_TYPES,
    FrameDecoder,
    MAX_FRAME_BYTES,
    S2C_TYPES,
    canonical_json,
    decode_frame,
    encode_frame,
    is_valid_token,
    make_frame,
    normalize_token,
} from "../src/protocol.js";

describe("canonical_json", () => {
    test("sorts keys at every depth with compact separators", () => {
        expect(canonical_json({ b: 1, a: { d: 2, c: [3, { f: 4, e: 5 }] } })).toBe(
            '{"a":{"c":[3,{"e":5,"f":4}],"d":2},"b":1}',
        );
    });

    test("escapes everything above ASCII, exactly like the host", () => {
        expect(canonical_json("café")).toBe('"caf\\u00e9"');
        expect(canonical_json("")).toBe('"\\u007f"');
        // Astral code points become escaped surrogate pairs.
        expect(canonical_json("🙂")).toBe('"\\ud83d\\ude42"');
        expect(canonical_json({ "λ": true })).toBe('{"\\u03bb":true}');
    });

    test("control characters and quotes keep their JSON escapes", () => {
        expect(canonical_json('a"b\n\t')).toBe('"a\\"b\\n\\t"');
    });
});

describe("encode/decode", () => {
    test("round trips a frame byte for byte", () => {
        const frame = make_frame("hello", { room: "KDX3M7", name: "Ana" }, 1);
        const line = encode_frame(frame);
        expect(line.endsWith("\n")).toBe(true);
        expect(line).toBe('{"payload":{"name":"Ana","room":"KDX3M7"},"seq":1,"session":"","type":"hello","v":1}\n');
        expect(decode_frame(line.slice(0, -1))).toEqual(frame);
        expect(decode_frame(line)).toEqual(frame);
    });

    test.each([
        ["not json at all", "not_json"],
        ["[1,2,3]", "not_object"],
        ['{"session":"","seq":0,"type":"x","payload":{}}', "missing_v"],
        ['{"v":2,"session":"","seq":0,"type":"x","payload":{}}', "bad_version"],
        ['{"v":true,"session":"","seq":0,"type":"x","payload":{}}', "bad_version"],
        ['{"v":1,"session":3,"seq":0,"type":"x","payload":{}}', "bad_session"],
        ['{"v":1,"session":"","seq":-1,"type":"x","payload":{}}', "bad_seq"],
        ['{"v":1,"session":"","seq":0.5,"type":"x","payload":{}}', "bad_seq"],
        ['{"v":1,"session":"","seq":0,"type":9,"payload":{}}', "bad_type"],
        ['{"v":1,"session":"","seq":0,"type":"x","payload":[]}', "bad_payload"],
    ])("rejects %s as %s", (line, reason) => {
        expect(() => decode_frame(line)).toThrowError(BadFrame);
        try {
            decode_frame(line);
        } catch (exc) {
            expect((exc as BadFrame).reason).toBe(reason);
        }
    });

    test("rejects oversized lines by UTF-8 byte length", () => {
        const fat = '{"v":1,"session":"","seq":0,"type":"x","payload":{"pad":"' + "é".repeat(MAX_FRAME_BYTES / 2) + '"}}';
        expect(() => decode_frame(fat)).toThrowError(/oversize/);
    });
});

describe("FrameDecoder", () => {
    const line = (seq: number): string => encode_frame(make_frame("ping", { t: seq }, seq));

    test("reassembles frames across arbitrary splits", () => {
        const text = line(1) + line(2) + line(3);
        for (const cut of [1, 7, text.length - 2]) {
            const decoder = new FrameDecoder();
            const got = [
                ...decoder.feed(text.slice(0, cut)),
                ...decoder.feed(text.slice(cut)),
            ];
            expect(got.map((f) => f.seq)).toEqual([1, 2, 3]);
            expect(decoder.dropped).toBe(0);
        }
    });

    test("skips blank lines and resyncs after garbage", () => {
        const decoder = new FrameDecoder();
        const got = decoder.feed("\n   \n{oops\n" + line(4));
        expect(got.map((f) => f.seq)).toEqual([4]);
        expect(decoder.dropped).toBe(1);
        expect(decoder.last_error).toBe("not_json");
    });

    test("drops an overlong run once and resumes at the next LF", () => {
        const decoder = new FrameDecoder();
        expect(decoder.feed("x".repeat(MAX_FRAME_BYTES + 10))).toEqual([]);
        expect(decoder.dropped).toBe(1);
        const got = decoder.feed("tail of the monster\n" + line(5));
        expect(got.map((f) => f.seq)).toEqual([5]);
        expect(decoder.dropped).toBe(1);
        expect(decoder.last_error).toBe("oversize");
    });
});

describe("tokens", () => {
    test("normalization forgives the ways children type", () => {
        expect(normalize_token("fh-7a")).toBe("FH7A");
        expect(normalize_token(" f h_7.a ")).toBe("FH7A");
        expect(normalize_token("")).toBe("");
    });

    test("validity means four glyphs from the read-aloud alphabet", () => {
        expect(is_valid_token("FH7A")).toBe(true);
        expect(is_valid_token("FH7")).toBe(false);
        expect(is_valid_token("FH0A")).toBe(false);
        expect(is_valid_token("fh7a")).toBe(false);
    });
});

describe("protocol doc", () => {
    const doc = readFileSync(new URL("../../docs/protocol.md", import.meta.url), "utf-8");

    const examples = (): Array<[string, string]> => {
        const out: Array<[string, string]> = [];
        let current: string | null = null;
        for (const row of doc.split("\n")) {
            if (row.startsWith("### ")) {
                current = row.slice(4).trim();
            } else if (current !== null && row.startsWith('{"payload"')) {
                out.push([current, row]);
            }
        }
        return out;
    };

    test("covers every frame type", () => {
        const names = examples().map(([name]) => name);
        expect([...names].sort()).toEqual([...C2S_TYPES, ...S2C_TYPES].sort());
    });

    test("every example re-encodes to the identical bytes", () => {
        const found = examples();
        expect(found.length).toBeGreaterThan(0);
        for (const [name, row] of found) {
            const frame: Frame = decode_frame(row);
            expect(frame.type).toBe(name);
            expect(encode_frame(frame)).toBe(row + "\n");
        }
    });
});
