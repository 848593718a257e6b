import random

import pytest

from gridpipe.message import Message, MessageError, deserialize, serialize

# quotes, escapes, NUL, Latin-1, BMP and astral code points
ALPHABET = "ab:/ =\"\\\n\t\x00\x7f\u00e9\u20ac\U0001F600"


def test_serialize_is_canonical():
    message = Message(header={"destination": "/queue/grid.metrics"}, body=b"hostName: wn01\n")
    assert serialize(message) == (
        b'{"body":"hostName: wn01\\n","header":{"destination":"/queue/grid.metrics"},"text":true}'
    )


def test_serialize_non_ascii_stays_utf8():
    message = Message.from_text("état: ok", header={"clé": "värde"})
    data = serialize(message)
    assert "état".encode("utf-8") in data
    assert deserialize(data) == message


def test_binary_body_is_base64():
    message = Message(body=b"\xff\x00\xfe", text=False)
    data = serialize(message)
    assert data == b'{"body":"/wD+","encoding":"base64","header":{},"text":false}'
    assert deserialize(data) == message


def test_deserialize_accepts_any_key_order_and_spacing():
    data = b'{ "text": true,\n  "header": {"a": "1"},  "body": "x" }'
    assert deserialize(data) == Message(header={"a": "1"}, body=b"x")


def test_serialize_is_stable_across_header_insertion_order():
    first = Message(header={"a": "1", "b": "2"}, body=b"x")
    second = Message(header={"b": "2", "a": "1"}, body=b"x")
    assert serialize(first) == serialize(second)


@pytest.mark.parametrize("data", [
    b"",
    b"not json",
    b"[]",
    b'{"header":{},"body":"x"}',
    b'{"header":{},"body":"x","text":true,"extra":1}',
    b'{"header":{"a":1},"body":"x","text":true}',
    b'{"header":{},"body":"***","text":false,"encoding":"base64"}',
    b'{"header":{},"body":"x","text":true,"encoding":"rot13"}',
    b'{"header":{},"body":"/w==","text":true,"encoding":"base64"}',
    b'{"header":{"":"x"},"body":"x","text":true}',
])
def test_deserialize_rejects_malformed(data):
    with pytest.raises(MessageError):
        deserialize(data)


def test_header_validation():
    with pytest.raises(ValueError):
        Message(header={"bad\nkey": "v"})
    with pytest.raises(ValueError):
        Message(header={"": "v"})


def test_text_body_must_be_utf8():
    with pytest.raises(ValueError):
        Message(body=b"\xff", text=True)
    assert Message(body=b"\xff", text=False).body == b"\xff"


def test_with_header_returns_copy():
    original = Message.from_text("x", header={"a": "1"})
    changed = original.with_header("a", "2").with_header("b", "3")
    assert original.header == {"a": "1"}
    assert changed.header == {"a": "2", "b": "3"}
    assert changed.body == original.body


def test_message_is_immutable():
    message = Message.from_text("x")
    with pytest.raises(ValueError):
        message.body = b"y"


def test_empty_message():
    assert serialize(Message()) == b'{"body":"","header":{},"text":true}'
    assert deserialize(b'{"body":"","header":{},"text":true}') == Message()


def test_non_utf8_body_example():
    message = Message(body=b"\x00\xff", text=False)
    assert serialize(message) == b'{"body":"AP8=","encoding":"base64","header":{},"text":false}'
    assert deserialize(serialize(message)) == message


def _random_text(rng: random.Random, low: int, high: int) -> str:
    return "".join(rng.choice(ALPHABET) for _ in range(rng.randint(low, high)))


def _random_message(rng: random.Random) -> Message:
    header = {}
    for _ in range(rng.randint(0, 4)):
        # keys: no control characters
        key = "".join(ch for ch in _random_text(rng, 1, 8) if ord(ch) >= 0x20 and ord(ch) != 0x7F) or "k"
        header[key] = _random_text(rng, 0, 12)
    if rng.random() < 0.5:
        return Message(header=header, body=_random_text(rng, 0, 40).encode("utf-8"), text=True)
    return Message(header=header, body=bytes(rng.randrange(256) for _ in range(rng.randint(0, 40))), text=False)


@pytest.mark.parametrize("seed", [3, 7])
def test_round_trip_property(seed):
    rng = random.Random(seed)
    for _ in range(3000):
        message = _random_message(rng)
        data = serialize(message)
        assert deserialize(data) == message
        assert serialize(deserialize(data)) == data
