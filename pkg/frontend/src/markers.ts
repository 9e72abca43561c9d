/**
 * Marker code entry.
 *
 * Posters carry short codes like "M03".  Children type them with stray
 * spaces, hyphens and lowercase; normalization maps all of that onto the
 * printed form before anything touches the wire.
 */

export class EmptyInput extends Error {
    constructor() {
        super("marker code is empty");
        this.name = "EmptyInput";
    }
}

/**
 * Canonical form of a hand-typed marker code: whitespace and hyphens
 * dropped, the rest uppercased ("  m-03 " -> "M03").  Input that is
 * nothing but separators is a reportable condition, not a crash, so the
 * caller can keep the form open and show a message.
 */
export function normalize_marker_code(raw: string): string {
    let out = "";
    for (const ch of raw) {
        if (ch === "-" || /\s/.test(ch)) {
            continue;
        }
        out += ch.toUpperCase();
    }
    if (out === "") {
        throw new EmptyInput();
    }
    return out;
}
