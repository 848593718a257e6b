import pytest

from gridpipe.stomp import (
    ClientSession, ConnectionLost, ConnectTimeout, EventKind, Frame, ProtocolMisuse, ServerError,
    SessionState, UnsendableFrame, parse_endpoint, session_connect,
)

from .conftest import connected_frame


def connect(transport, clock, version="1.2", heartbeat=(0, 0), server_heartbeat="0,0") -> ClientSession:
    transport.feed_frame(connected_frame(version, server_heartbeat))
    return session_connect(transport, heartbeat=heartbeat, clock=clock, timeout=5)


def message_frame(sub_id: str, n: int = 1, body: bytes = b"payload") -> Frame:
    return Frame("MESSAGE", (("destination", "/queue/a"), ("subscription", sub_id),
                             ("message-id", f"m{n}"), ("ack", f"a{n}")), body)


def test_connect_negotiates_version_and_heartbeat(transport, clock):
    transport.feed_frame(connected_frame("1.2", "500,0"))
    session = session_connect(transport, login="user", passcode="secret", heartbeat=(0, 1000), clock=clock)
    assert session.state is SessionState.CONNECTED
    assert session.version == "1.2"
    assert (session.send_interval, session.receive_timeout) == (0, 1000)
    assert session.server == "fake/1"

    connect_frame = transport.frames()[0]
    assert connect_frame.command == "CONNECT"
    assert connect_frame.header_map() == {
        "accept-version": "1.0,1.2", "host": "localhost", "heart-beat": "0,1000",
        "login": "user", "passcode": "secret",
    }


def test_connect_to_10_broker(transport, clock):
    transport.feed_frame(Frame("CONNECTED", (("session", "s1"),)))
    session = session_connect(transport, clock=clock)
    assert session.version == "1.0"
    assert session.session_id == "s1"


def test_connect_error_closes_session(transport, clock):
    transport.feed_frame(Frame("ERROR", (("message", "bad credentials"),)))
    session = ClientSession(transport, clock=clock)
    with pytest.raises(ServerError, match="bad credentials"):
        session.connect(login="user", passcode="wrong")
    assert session.state is SessionState.CLOSED
    assert transport.closed


def test_connect_timeout(transport, clock):
    session = ClientSession(transport, clock=clock)
    start = clock()
    with pytest.raises(ConnectTimeout):
        session.connect(timeout=2)
    assert clock() - start >= 2
    assert session.state is SessionState.CLOSED


def test_misuse_sends_nothing(transport, clock):
    session = ClientSession(transport, clock=clock)
    with pytest.raises(ProtocolMisuse):
        session.send("/queue/a", b"x")
    with pytest.raises(ProtocolMisuse):
        session.subscribe("/queue/a")
    assert transport.sent == []

    session = connect(transport, clock)
    session.close()
    sent = len(transport.sent)
    with pytest.raises(ProtocolMisuse):
        session.send("/queue/a", b"x")
    with pytest.raises(ProtocolMisuse):
        session.connect()
    assert len(transport.sent) == sent


def test_unsendable_frame_leaves_session_usable(transport, clock):
    session = connect(transport, clock, version="1.0")
    sent = len(transport.sent)
    for headers in ({"note": "a\x00b"}, {"note": "two\nlines"}):
        with pytest.raises(UnsendableFrame):
            session.send("/queue/a", b"x", headers, want_receipt=True)
    assert len(transport.sent) == sent
    assert not session.pending_receipts
    assert session.state is SessionState.CONNECTED
    session.send("/queue/a", b"x", {"note": "fine"})
    assert transport.frames("1.0")[-1].get("note") == "fine"


def test_send_with_receipt(transport, clock):
    session = connect(transport, clock)
    receipt = session.send("/queue/a", b"hello", {"priority": "4", "destination": "/queue/ignored"},
                           want_receipt=True)
    assert receipt in session.pending_receipts

    frame = transport.frames()[-1]
    assert frame.command == "SEND"
    assert frame.get("destination") == "/queue/a"
    assert frame.get("priority") == "4"
    assert frame.get("receipt") == receipt
    assert frame.get("content-length") == "5"
    assert frame.body == b"hello"

    transport.feed_frame(Frame("RECEIPT", (("receipt-id", receipt),)))
    assert session.wait_for_receipts([receipt], timeout=1) == {receipt}
    assert not session.pending_receipts


def test_receipt_wait_times_out(transport, clock):
    session = connect(transport, clock)
    receipt = session.send("/queue/a", b"x", want_receipt=True)
    start = clock()
    assert session.wait_for_receipts([receipt], timeout=3) == set()
    assert clock() - start >= 3
    assert receipt in session.pending_receipts


def test_unrequested_receipts_are_ignored(transport, clock):
    session = connect(transport, clock)
    transport.feed_frame(Frame("RECEIPT", (("receipt-id", "nobody-asked"),)))
    assert session.poll(clock() + 1).kind is EventKind.IDLE


def test_messages_during_receipt_wait_are_kept(transport, clock):
    session = connect(transport, clock)
    sub_id = session.subscribe("/queue/a", "client-individual")
    receipt = session.send("/queue/b", b"x", want_receipt=True)
    transport.feed_frame(message_frame(sub_id))
    transport.feed_frame(Frame("RECEIPT", (("receipt-id", receipt),)))

    assert session.wait_for_receipts([receipt], timeout=1) == {receipt}
    assert session.backlog_size() == 1
    event = session.poll(clock() + 1)
    assert event.kind is EventKind.MESSAGE
    assert event.frame.get("message-id") == "m1"
    assert session.backlog_size() == 0


def test_error_during_receipt_wait(transport, clock):
    session = connect(transport, clock)
    receipt = session.send("/queue/a", b"x", want_receipt=True)
    transport.feed_frame(Frame("ERROR", (("message", "queue full"),)))
    with pytest.raises(ServerError, match="queue full"):
        session.wait_for_receipts([receipt], timeout=1)
    assert session.state is SessionState.CLOSED


def test_ack_and_nack_in_12(transport, clock):
    session = connect(transport, clock)
    sub_id = session.subscribe("/queue/a", "client-individual")
    subscribe = transport.frames()[-1]
    assert subscribe.header_map() == {"id": sub_id, "destination": "/queue/a", "ack": "client-individual"}

    session.ack(message_frame(sub_id, 1))
    session.nack(message_frame(sub_id, 2))
    ack, nack = transport.frames()[-2:]
    assert (ack.command, ack.headers) == ("ACK", (("id", "a1"),))
    assert (nack.command, nack.headers) == ("NACK", (("id", "a2"),))


def test_ack_in_10_and_nack_refused(transport, clock):
    session = connect(transport, clock, version="1.0")
    sub_id = session.subscribe("/queue/a", "client")
    frame = Frame("MESSAGE", (("destination", "/queue/a"), ("subscription", sub_id), ("message-id", "m7")))
    session.ack(frame)
    assert transport.frames("1.0")[-1].headers == (("message-id", "m7"), ("subscription", sub_id))

    sent = len(transport.sent)
    with pytest.raises(ProtocolMisuse):
        session.nack(frame)
    assert len(transport.sent) == sent


def test_ack_on_auto_subscription_is_misuse(transport, clock):
    session = connect(transport, clock)
    sub_id = session.subscribe("/queue/a")
    with pytest.raises(ProtocolMisuse):
        session.ack(message_frame(sub_id))
    with pytest.raises(ProtocolMisuse):
        session.unsubscribe("sub-unknown")


def test_unsubscribe(transport, clock):
    session = connect(transport, clock)
    sub_id = session.subscribe("/queue/a", "client")
    receipt = session.unsubscribe(sub_id, want_receipt=True)
    frame = transport.frames()[-1]
    assert frame.command == "UNSUBSCRIBE"
    assert frame.header_map() == {"id": sub_id, "receipt": receipt}
    assert sub_id not in session.subscriptions


def test_heartbeats_are_sent_on_time(transport, clock):
    session = connect(transport, clock, heartbeat=(1000, 0), server_heartbeat="0,1000")
    assert session.send_interval == 1000
    event = session.poll(clock() + 10)
    assert event.kind is EventKind.IDLE

    beats = transport.heartbeats
    assert len(beats) >= 9
    times = [transport.sent_at[0]] + beats
    gaps = [later - earlier for earlier, later in zip(times, times[1:])]
    assert max(gaps) <= 1.0 + 1e-6


def test_heartbeat_timeout(transport, clock):
    session = connect(transport, clock, heartbeat=(0, 1000), server_heartbeat="1000,0")
    assert session.receive_timeout == 1000
    start = clock()
    event = session.poll(clock() + 60)
    assert event.kind is EventKind.HEARTBEAT_TIMEOUT
    assert 1.5 <= clock() - start < 2
    assert session.state is SessionState.CLOSED


def test_peer_close_is_connection_lost(transport, clock):
    session = connect(transport, clock)
    transport.closed = True
    with pytest.raises(ConnectionLost):
        session.poll(clock() + 1)
    assert session.state is SessionState.CLOSED


def test_disconnect_waits_for_receipt_then_closes(transport, clock):
    session = connect(transport, clock)
    start = clock()
    session.disconnect(timeout=2)
    assert session.state is SessionState.CLOSED
    assert transport.closed
    assert transport.frames()[-1].command == "DISCONNECT"
    assert 2 <= clock() - start < 3


@pytest.mark.parametrize("uri,host,port,tls,destination", [
    ("stomp://mq.example.org/queue/grid.metrics", "mq.example.org", 61613, False, "/queue/grid.metrics"),
    ("stomp+ssl://mq.example.org:6162/topic/x", "mq.example.org", 6162, True, "/topic/x"),
    ("stomp+tls://127.0.0.1", "127.0.0.1", 61612, True, None),
    ("tcp://localhost:1234/", "localhost", 1234, False, None),
])
def test_parse_endpoint(uri, host, port, tls, destination):
    endpoint = parse_endpoint(uri)
    assert (endpoint.host, endpoint.port, endpoint.tls, endpoint.destination) == (host, port, tls, destination)


@pytest.mark.parametrize("uri", ["http://mq.example.org", "stomp://:61613", "stomp://host:notaport"])
def test_parse_endpoint_rejects(uri):
    with pytest.raises(ValueError):
        parse_endpoint(uri)
