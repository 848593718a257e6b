import random

import pytest

from gridpipe.stomp import (
    BODY_COMMANDS, COMMANDS, UNESCAPED_COMMANDS, Frame, FrameError, FrameParser, decode, encode,
    negotiate_heartbeat, parse_heartbeat,
)


def test_encode_send_example():
    frame = Frame("SEND", (("destination", "/queue/test"), ("content-length", "5")), b"hello")
    assert encode(frame) == b"SEND\ndestination:/queue/test\ncontent-length:5\n\nhello\x00"


def test_encode_minimal_frame():
    assert encode(Frame("DISCONNECT")) == b"DISCONNECT\n\n\x00"


def test_content_length_added_and_corrected():
    assert encode(Frame("SEND", (("destination", "/q"),), b"abc")) == \
        b"SEND\ndestination:/q\ncontent-length:3\n\nabc\x00"
    assert encode(Frame("SEND", (("content-length", "99"),), b"ab")) == b"SEND\ncontent-length:2\n\nab\x00"


def test_escaping_in_12():
    frame = Frame("SEND", (("key", "a:b"),))
    assert encode(frame, "1.2") == b"SEND\nkey:a\\cb\n\n\x00"
    frame = Frame("MESSAGE", (("k:x", "line\nnext\\end\r"),))
    wire = encode(frame, "1.2")
    assert b"k\\cx:line\\nnext\\\\end\\r\n" in wire
    assert decode(wire, "1.2") == frame


def test_no_escaping_in_10():
    frame = Frame("SEND", (("key", "a:b\\c"),))
    assert encode(frame, "1.0") == b"SEND\nkey:a:b\\c\n\n\x00"
    assert decode(encode(frame, "1.0"), "1.0") == frame


def test_connect_frames_are_never_escaped():
    frame = Frame("CONNECT", (("login", "a\\b"),))
    assert encode(frame, "1.2") == b"CONNECT\nlogin:a\\b\n\n\x00"
    assert decode(encode(frame, "1.2"), "1.2") == frame


@pytest.mark.parametrize("headers", [
    (("bad:key", "v"),),
    (("bad\nkey", "v"),),
    (("key", "two\nlines"),),
    (("key", "carriage\rreturn"),),
])
def test_unescapable_headers_in_10(headers):
    with pytest.raises(FrameError):
        encode(Frame("SEND", headers), "1.0")


@pytest.mark.parametrize("frame", [
    Frame("SUBSCRIBE", (("id", "1"),), b"body"),
    Frame("BOGUS"),
    Frame("SEND", (("", "v"),)),
    Frame("SEND", (("k", "nul\x00"),)),
])
def test_invalid_frames_rejected(frame):
    with pytest.raises(FrameError):
        encode(frame)


def test_first_repeated_header_wins():
    frame = decode(b"MESSAGE\nfoo:first\nfoo:second\n\n\x00")
    assert frame.get("foo") == "first"
    assert frame.headers == (("foo", "first"), ("foo", "second"))


def test_leading_heartbeats_are_skipped():
    assert decode(b"\n\r\n\nSEND\ndestination:/q\n\nhi\x00") == Frame("SEND", (("destination", "/q"),), b"hi")


def test_crlf_line_endings():
    frame = decode(b"SEND\r\ndestination:/q\r\n\r\nhi\x00")
    assert frame == Frame("SEND", (("destination", "/q"),), b"hi")


def test_body_with_nul_uses_content_length():
    frame = Frame("SEND", (("content-length", "5"),), b"a\x00b\x00c")
    assert decode(encode(frame)) == frame


def test_missing_nul_after_content_length():
    with pytest.raises(FrameError):
        decode(b"SEND\ncontent-length:5\n\nhelloX")


@pytest.mark.parametrize("data", [
    b"HELLO\n\n\x00",
    b"send\n\n\x00",
    b"SEND\nno-colon-here\n\n\x00",
    b"SEND\ncontent-length:abc\n\n\x00",
    b"SEND\nkey:bad\\escape\n\n\x00",
])
def test_malformed_input(data):
    with pytest.raises(FrameError):
        decode(data, "1.2")


def test_incomplete_frame_needs_more_bytes():
    parser = FrameParser("1.2")
    wire = encode(Frame("SEND", (("destination", "/q"),), b"hello"))
    for byte in wire[:-1]:
        parser.feed(bytes([byte]))
        assert parser.next_frame() is None
    parser.feed(wire[-1:])
    assert parser.next_frame() == Frame("SEND", (("destination", "/q"), ("content-length", "5")), b"hello")
    assert parser.next_frame() is None


def test_several_frames_in_one_chunk():
    frames = [Frame("RECEIPT", (("receipt-id", str(i)),)) for i in range(5)]
    parser = FrameParser("1.2")
    parser.feed(b"\n".join(encode(f) for f in frames))
    decoded = []
    while (frame := parser.next_frame()) is not None:
        decoded.append(frame)
    assert decoded == frames


def test_max_frame_size():
    parser = FrameParser("1.2", max_frame_size=64)
    parser.feed(b"SEND\ncontent-length:1000\n\n")
    with pytest.raises(FrameError):
        parser.next_frame()

    parser = FrameParser("1.2", max_frame_size=64)
    parser.feed(b"SEND\n\n" + b"x" * 100)
    with pytest.raises(FrameError):
        parser.next_frame()


_PLAIN = "abcXYZ019-_./ é€漢"
_SPECIAL = ":\n\r\\"


def _random_text(rng: random.Random, alphabet: str, size: int) -> str:
    return "".join(rng.choice(alphabet) for _ in range(size))


def _random_frame(rng: random.Random, version: str) -> Frame:
    command = rng.choice(sorted(COMMANDS))
    escaped = version == "1.2" and command not in UNESCAPED_COMMANDS
    key_alphabet = _PLAIN + _SPECIAL if escaped else _PLAIN
    value_alphabet = _PLAIN + _SPECIAL if escaped else _PLAIN + ":\\"
    headers = []
    for _ in range(rng.randint(0, 6)):
        key = _random_text(rng, key_alphabet, rng.randint(1, 8))
        if key == "content-length":
            continue
        headers.append((key, _random_text(rng, value_alphabet, rng.randint(0, 12))))
    body = b""
    if command in BODY_COMMANDS and rng.random() < 0.8:
        body = bytes(rng.randrange(256) for _ in range(rng.randint(1, 64)))
        headers.append(("content-length", str(len(body))))
    return Frame(command, tuple(headers), body)


@pytest.mark.parametrize("version,seed", [("1.0", 10), ("1.2", 12)])
def test_round_trip_property(version, seed):
    rng = random.Random(seed)
    parser = FrameParser(version)
    for _ in range(10_000):
        frame = _random_frame(rng, version)
        wire = encode(frame, version)
        # split at a random point to exercise the incremental path
        cut = rng.randint(0, len(wire))
        parser.feed(wire[:cut])
        first = parser.next_frame()
        parser.feed(wire[cut:])
        decoded = first or parser.next_frame()
        assert decoded == frame
        assert parser.buffered() == 0


@pytest.mark.parametrize("client,server,expected", [
    ((1000, 2000), (3000, 500), (1000, 3000)),
    ((0, 0), (3000, 500), (0, 0)),
    ((1000, 2000), (0, 0), (0, 0)),
    ((5000, 0), (0, 1000), (5000, 0)),
    ((0, 5000), (1000, 0), (0, 5000)),
    ((100, 100), (200, 300), (300, 200)),
    ((250, 250), (250, 250), (250, 250)),
])
def test_heartbeat_negotiation(client, server, expected):
    assert negotiate_heartbeat(client, server) == expected


def test_parse_heartbeat():
    assert parse_heartbeat(None) == (0, 0)
    assert parse_heartbeat("100, 200") == (100, 200)
    for bad in ("100", "a,b", "-1,5"):
        with pytest.raises(FrameError):
            parse_heartbeat(bad)
