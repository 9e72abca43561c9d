"""Wire framing, envelope validation, and pairing token properties."""

from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathlib import Path

from classplay.protocol import (
    C2S_TYPES,
    MAX_FRAME_BYTES,
    PROTOCOL_VERSION,
    S2C_TYPES,
    TOKEN_ALPHABET,
    TOKEN_LENGTH,
    BadFrame,
    Frame,
    FrameDecoder,
    canonical_json,
    decode_frame,
    encode_frame,
    is_valid_token,
    mint_token,
    normalize_token,
)

json_scalars = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-(2**31), max_value=2**31),
    st.text(max_size=40),
)
json_values = st.recursive(
    json_scalars,
    lambda inner: st.one_of(
        st.lists(inner, max_size=4),
        st.dictionaries(st.text(max_size=10), inner, max_size=4),
    ),
    max_leaves=20,
)
payloads = st.dictionaries(st.text(min_size=1, max_size=12), json_values, max_size=5)


class TestFrame:
    def test_exact_encoding(self):
        frame = Frame(session="abc", seq=1, type="ping", payload={})
        assert encode_frame(frame) == b'{"payload":{},"seq":1,"session":"abc","type":"ping","v":1}\n'

    def test_encoding_is_ascii_with_escapes(self):
        frame = Frame(session="s", seq=2, type="notepad", payload={"text": "Überraschung"})
        raw = encode_frame(frame)
        raw.decode("ascii")
        assert decode_frame(raw[:-1]).payload["text"] == "Überraschung"

    def test_key_order_is_canonical(self):
        a = canonical_json({"b": 1, "a": 2})
        b = canonical_json({"a": 2, "b": 1})
        assert a == b == '{"a":2,"b":1}'

    @given(session=st.text(max_size=20), seq=st.integers(min_value=0, max_value=2**53), type_=st.text(min_size=1, max_size=20), payload=payloads)
    @settings(max_examples=200)
    def test_round_trip(self, session, seq, type_, payload):
        frame = Frame(session=session, seq=seq, type=type_, payload=payload)
        encoded = encode_frame(frame)
        assert encoded.endswith(b"\n")
        assert b"\n" not in encoded[:-1]
        assert decode_frame(encoded[:-1]) == frame

    def test_trailing_newline_optional(self):
        frame = Frame(session="s", seq=0, type="ping", payload={})
        assert decode_frame(encode_frame(frame)[:-1]) == frame


class TestDecodeErrors:
    def check(self, line: bytes, reason: str):
        with pytest.raises(BadFrame) as err:
            decode_frame(line)
        assert err.value.reason == reason

    def test_not_json(self):
        self.check(b"hello world", "not_json")
        self.check(b"\xff\xfe", "not_json")

    def test_not_object(self):
        self.check(b"[1,2,3]", "not_object")
        self.check(b'"frame"', "not_object")

    def test_missing_keys(self):
        self.check(b"{}", "missing_v")
        self.check(b'{"v":1}', "missing_session")
        self.check(b'{"v":1,"session":"s"}', "missing_seq")
        self.check(b'{"v":1,"session":"s","seq":0}', "missing_type")
        self.check(b'{"v":1,"session":"s","seq":0,"type":"ping"}', "missing_payload")

    def test_bad_version(self):
        self.check(b'{"v":2,"session":"s","seq":0,"type":"ping","payload":{}}', "bad_version")
        self.check(b'{"v":"1","session":"s","seq":0,"type":"ping","payload":{}}', "bad_version")
        self.check(b'{"v":true,"session":"s","seq":0,"type":"ping","payload":{}}', "bad_version")

    def test_bad_fields(self):
        self.check(b'{"v":1,"session":3,"seq":0,"type":"ping","payload":{}}', "bad_session")
        self.check(b'{"v":1,"session":"s","seq":-1,"type":"ping","payload":{}}', "bad_seq")
        self.check(b'{"v":1,"session":"s","seq":1.5,"type":"ping","payload":{}}', "bad_seq")
        self.check(b'{"v":1,"session":"s","seq":true,"type":"ping","payload":{}}', "bad_seq")
        self.check(b'{"v":1,"session":"s","seq":0,"type":9,"payload":{}}', "bad_type")
        self.check(b'{"v":1,"session":"s","seq":0,"type":"ping","payload":[]}', "bad_payload")

    def test_oversize(self):
        fat = b'{"v":1,"session":"' + b"x" * MAX_FRAME_BYTES + b'"}'
        self.check(fat, "oversize")

    @given(st.binary(max_size=200))
    @settings(max_examples=300)
    def test_never_raises_anything_else(self, junk):
        try:
            decode_frame(junk)
        except BadFrame:
            pass


class TestFrameDecoder:
    def frames(self, n: int) -> list[Frame]:
        return [Frame(session="s", seq=i, type="ping", payload={"i": i}) for i in range(n)]

    def test_byte_at_a_time(self):
        decoder = FrameDecoder()
        stream = b"".join(encode_frame(f) for f in self.frames(5))
        out = []
        for i in range(len(stream)):
            out.extend(decoder.feed(stream[i : i + 1]))
        assert out == self.frames(5)
        assert decoder.dropped == 0

    def test_garbage_between_frames_resyncs(self):
        decoder = FrameDecoder()
        a, b = self.frames(2)
        stream = encode_frame(a) + b"not json at all\n" + encode_frame(b)
        out = decoder.feed(stream)
        assert out == [a, b]
        assert decoder.dropped == 1
        assert decoder.last_error == "not_json"

    def test_blank_lines_are_skipped(self):
        decoder = FrameDecoder()
        a = self.frames(1)[0]
        out = decoder.feed(b"\n  \n" + encode_frame(a) + b"\n")
        assert out == [a]
        assert decoder.dropped == 0

    def test_partial_frame_stays_buffered(self):
        decoder = FrameDecoder()
        a = self.frames(1)[0]
        raw = encode_frame(a)
        assert decoder.feed(raw[:10]) == []
        assert decoder.feed(raw[10:]) == [a]

    def test_oversized_run_dropped_once_then_resyncs(self):
        decoder = FrameDecoder()
        a = self.frames(1)[0]
        decoder.feed(b"x" * (MAX_FRAME_BYTES + 10))
        assert decoder.dropped == 1
        assert decoder.last_error == "oversize"
        out = decoder.feed(b"yyy\n" + encode_frame(a))
        assert out == [a]
        assert decoder.dropped == 1

    def test_split_across_arbitrary_chunks(self):
        frames = self.frames(7)
        stream = b"junk\n" + b"".join(encode_frame(f) for f in frames)
        rng = random.Random(5)
        decoder = FrameDecoder()
        out = []
        i = 0
        while i < len(stream):
            j = min(len(stream), i + rng.randint(1, 9))
            out.extend(decoder.feed(stream[i:j]))
            i = j
        assert out == frames
        assert decoder.dropped == 1


class TestTokens:
    def test_alphabet_avoids_lookalikes(self):
        for ch in "0O1I2Z5S8BGQ":
            assert ch not in TOKEN_ALPHABET

    def test_mint_is_deterministic(self):
        a = mint_token(random.Random("seed:token:1"))
        b = mint_token(random.Random("seed:token:1"))
        assert a == b
        assert is_valid_token(a)

    def test_mint_varies_with_stream(self):
        tokens = {mint_token(random.Random(f"s:{i}")) for i in range(50)}
        assert len(tokens) > 40

    @given(st.text(alphabet=TOKEN_ALPHABET, min_size=TOKEN_LENGTH, max_size=TOKEN_LENGTH))
    def test_valid_tokens_survive_normalization(self, token):
        assert normalize_token(token) == token
        assert is_valid_token(token)

    def test_normalize_strips_noise(self):
        assert normalize_token("ac-de") == "ACDE"
        assert normalize_token(" a c_d.e ") == "ACDE"
        assert normalize_token("acde") == "ACDE"

    @given(st.text(max_size=20))
    def test_normalize_is_idempotent(self, raw):
        once = normalize_token(raw)
        assert normalize_token(once) == once

    def test_invalid_tokens(self):
        assert not is_valid_token("ACD")
        assert not is_valid_token("ACDEF")
        assert not is_valid_token("AC0E")
        assert not is_valid_token("")


class TestCanonicalJson:
    @given(payloads)
    @settings(max_examples=150)
    def test_stable_under_reparse(self, doc):
        text = canonical_json(doc)
        assert canonical_json(json.loads(text)) == text


class TestProtocolDoc:
    """docs/protocol.md promises byte-exact examples; hold it to that."""

    @staticmethod
    def _examples() -> list[tuple[str, str]]:
        doc = Path(__file__).resolve().parent.parent / "docs" / "protocol.md"
        out: list[tuple[str, str]] = []
        current = None
        for line in doc.read_text("utf-8").splitlines():
            if line.startswith("### "):
                current = line[4:].strip()
            elif current is not None and line.startswith('{"payload"'):
                out.append((current, line))
        return out

    def test_every_type_documented_with_one_example(self):
        names = [name for name, _ in self._examples()]
        assert sorted(names) == sorted(C2S_TYPES | S2C_TYPES)

    def test_examples_are_byte_exact(self):
        for name, line in self._examples():
            frame = decode_frame(line.encode("ascii"))
            assert frame.type == name
            assert encode_frame(frame) == line.encode("ascii") + b"\n"
