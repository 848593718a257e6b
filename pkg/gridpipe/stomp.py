"""STOMP 1.0 / 1.2 wire codec, TLS helpers and the client session state machine.

The codec is stateless apart from the incremental :class:`FrameParser` buffer and is
shared by the client session and the broker simulator.
"""
from __future__ import annotations

import itertools
import logging
import socket
import ssl
import time
import uuid
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Protocol, Union
from urllib.parse import urlsplit

from pydantic import BaseModel, ConfigDict

from . import settings
from .errors import GridpipeError

log = logging.getLogger(__name__)

COMMANDS = frozenset({
    "CONNECT", "CONNECTED", "SEND", "SUBSCRIBE", "UNSUBSCRIBE", "ACK", "NACK",
    "BEGIN", "COMMIT", "ABORT", "DISCONNECT", "MESSAGE", "RECEIPT", "ERROR",
})
BODY_COMMANDS = frozenset({"SEND", "MESSAGE", "ERROR"})
# never escaped, whatever the version (STOMP 1.2 rule)
UNESCAPED_COMMANDS = frozenset({"CONNECT", "CONNECTED"})
SUPPORTED_VERSIONS = ("1.0", "1.2")
ACCEPT_VERSION = ",".join(SUPPORTED_VERSIONS)
HEARTBEAT_EOL = b"\n"
HEARTBEAT_GRACE = 1.5
DEFAULT_PORT = 61613
DEFAULT_TLS_PORT = 61612
QUEUE_PREFIX = "/queue/"
TOPIC_PREFIX = "/topic/"

_ESCAPES = {"\\": "\\\\", "\r": "\\r", "\n": "\\n", ":": "\\c"}
_UNESCAPES = {"\\": "\\", "r": "\r", "n": "\n", "c": ":"}
_PLAIN_SCHEMES = {"stomp", "tcp"}
_TLS_SCHEMES = {"stomp+ssl", "stomp+tls", "ssl", "tls"}


class StompError(GridpipeError):
    pass


class FrameError(StompError, ValueError):
    """Bytes on the wire that do not form a valid frame."""


class ProtocolMisuse(StompError):
    """Operation not legal in the current session state; nothing was sent."""


class ConnectFailed(StompError):
    pass


class TlsHandshakeError(ConnectFailed):
    pass


class ConnectionLost(StompError):
    pass


class ConnectTimeout(StompError):
    pass


class UnsendableFrame(StompError, ValueError):
    """The frame cannot be encoded for this session; nothing was sent."""


class ServerError(StompError):
    def __init__(self, frame: "Frame") -> None:
        self.frame = frame
        detail = frame.get("message") or frame.body.decode("utf-8", "replace").strip() or "no details"
        super().__init__(f"broker error: {detail}")


# -- frames -----------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    command: str
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "headers", tuple((str(k), str(v)) for k, v in self.headers))
        object.__setattr__(self, "body", bytes(self.body))

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        """First occurrence wins."""
        for name, value in self.headers:
            if name == key:
                return value
        return default

    def header_map(self) -> dict[str, str]:
        result: dict[str, str] = {}
        for name, value in self.headers:
            result.setdefault(name, value)
        return result


def _escape(text: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in text)


def _unescape(text: str) -> str:
    if "\\" not in text:
        return text
    out: list[str] = []
    chars = iter(text)
    for ch in chars:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(chars, None)
        if nxt is None or nxt not in _UNESCAPES:
            raise FrameError(f"invalid escape sequence in header {text[:64]!r}")
        out.append(_UNESCAPES[nxt])
    return "".join(out)


def encode(frame: Frame, version: str = "1.2") -> bytes:
    """Serialize ``frame``; non-empty bodies always carry a content-length header."""
    if frame.command not in COMMANDS:
        raise FrameError(f"unknown command {frame.command!r}")
    if frame.body and frame.command not in BODY_COMMANDS:
        raise FrameError(f"{frame.command} frames cannot carry a body")
    escape = version == "1.2" and frame.command not in UNESCAPED_COMMANDS
    lines = [frame.command]
    has_length = False
    for key, value in frame.headers:
        if not key:
            raise FrameError("empty header key")
        if "\x00" in key or "\x00" in value:
            raise FrameError(f"NUL in header {key!r}")
        if key == "content-length":
            value = str(len(frame.body))
            has_length = True
        if escape:
            key, value = _escape(key), _escape(value)
        else:
            if any(ch in key for ch in ":\r\n"):
                raise FrameError(f"header key {key!r} cannot be represented in STOMP {version}")
            if "\r" in value or "\n" in value:
                raise FrameError(f"header {key!r} value cannot be represented in STOMP {version}")
        lines.append(f"{key}:{value}")
    if frame.body and not has_length:
        lines.append(f"content-length:{len(frame.body)}")
    return ("\n".join(lines) + "\n\n").encode("utf-8") + frame.body + b"\x00"


class FrameParser:
    """Incremental decoder: feed bytes, pull frames; ``None`` means "need more bytes"."""

    def __init__(self, version: str = "1.0", max_frame_size: Optional[int] = None) -> None:
        self.version = version
        self.max_frame_size = max_frame_size or settings.max_frame_size()
        self._buffer = bytearray()

    def feed(self, data: bytes) -> None:
        self._buffer += data

    def buffered(self) -> int:
        return len(self._buffer)

    def _skip_heartbeats(self) -> None:
        buf = self._buffer
        start = 0
        while start < len(buf):
            if buf[start] == 0x0A:
                start += 1
            elif buf[start] == 0x0D and start + 1 < len(buf) and buf[start + 1] == 0x0A:
                start += 2
            else:
                break
        if start:
            del buf[:start]

    def next_frame(self) -> Optional[Frame]:
        self._skip_heartbeats()
        buf = self._buffer
        if not buf or buf == b"\r":
            return None
        ends = [(idx, size) for idx, size in ((buf.find(b"\n\n"), 2), (buf.find(b"\n\r\n"), 3)) if idx >= 0]
        if not ends:
            if len(buf) > self.max_frame_size:
                raise FrameError("frame header exceeds maximum frame size")
            return None
        end, sep_size = min(ends)
        body_start = end + sep_size
        try:
            head = bytes(buf[:end]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FrameError("frame header is not UTF-8") from exc
        lines = [line[:-1] if line.endswith("\r") else line for line in head.split("\n")]
        command = lines[0]
        if command not in COMMANDS:
            raise FrameError(f"malformed command {command[:32]!r}")
        unescape = self.version == "1.2" and command not in UNESCAPED_COMMANDS
        headers: list[tuple[str, str]] = []
        for line in lines[1:]:
            key, sep, value = line.partition(":")
            if not sep or not key:
                raise FrameError(f"malformed header line {line[:64]!r}")
            if unescape:
                key, value = _unescape(key), _unescape(value)
            headers.append((key, value))

        length = next((v for k, v in headers if k == "content-length"), None)
        if length is not None:
            try:
                size = int(length)
            except ValueError as exc:
                raise FrameError(f"invalid content-length {length!r}") from exc
            if size < 0 or size > self.max_frame_size:
                raise FrameError(f"frame body of {size} bytes exceeds maximum frame size")
            if len(buf) < body_start + size + 1:
                return None
            if buf[body_start + size] != 0:
                raise FrameError("missing NUL after declared content-length")
            body = bytes(buf[body_start:body_start + size])
            consumed = body_start + size + 1
        else:
            nul = buf.find(b"\x00", body_start)
            if nul < 0:
                if len(buf) - body_start > self.max_frame_size:
                    raise FrameError("frame body exceeds maximum frame size")
                return None
            body = bytes(buf[body_start:nul])
            consumed = nul + 1
        del buf[:consumed]
        return Frame(command, tuple(headers), body)


def decode(data: bytes, version: str = "1.2", max_frame_size: Optional[int] = None) -> Frame:
    """Decode exactly one complete frame from ``data``."""
    parser = FrameParser(version, max_frame_size)
    parser.feed(data)
    frame = parser.next_frame()
    if frame is None:
        raise FrameError("incomplete frame")
    return frame


# -- heart-beating ------------------------------------------------------------


def parse_heartbeat(value: Optional[str]) -> tuple[int, int]:
    if not value:
        return 0, 0
    try:
        x, y = (int(part.strip()) for part in value.split(","))
    except ValueError as exc:
        raise FrameError(f"invalid heart-beat header {value!r}") from exc
    if x < 0 or y < 0:
        raise FrameError(f"invalid heart-beat header {value!r}")
    return x, y


def negotiate_heartbeat(client: tuple[int, int], server: tuple[int, int]) -> tuple[int, int]:
    """Return ``(send_interval_ms, receive_timeout_ms)`` for the client side."""
    cx, cy = client
    sx, sy = server
    send = max(cx, sy) if cx > 0 and sy > 0 else 0
    receive = max(cy, sx) if cy > 0 and sx > 0 else 0
    return send, receive


# -- endpoints and TLS ----------------------------------------------------------


class TlsConfig(BaseModel):
    """PEM material for a TLS connection; the server certificate is verified by default."""

    model_config = ConfigDict(frozen=True)

    enabled: bool = True
    ca_bundle: Optional[Path] = None
    cert: Optional[Path] = None
    key: Optional[Path] = None
    verify: bool = True

    def client_context(self) -> ssl.SSLContext:
        try:
            context = ssl.create_default_context(
                ssl.Purpose.SERVER_AUTH, cafile=str(self.ca_bundle) if self.ca_bundle else None)
            if not self.verify:
                context.check_hostname = False
                context.verify_mode = ssl.CERT_NONE
            if self.cert:
                context.load_cert_chain(str(self.cert), str(self.key) if self.key else None)
        except (OSError, ssl.SSLError) as exc:
            raise ConnectFailed(f"cannot load TLS material: {exc}") from exc
        return context

    def server_context(self) -> ssl.SSLContext:
        if not self.cert:
            raise ConnectFailed("a server certificate is required for TLS")
        try:
            context = ssl.create_default_context(ssl.Purpose.CLIENT_AUTH)
            context.load_cert_chain(str(self.cert), str(self.key) if self.key else None)
            if self.ca_bundle:
                context.load_verify_locations(cafile=str(self.ca_bundle))
                context.verify_mode = ssl.CERT_OPTIONAL
        except (OSError, ssl.SSLError) as exc:
            raise ConnectFailed(f"cannot load TLS material: {exc}") from exc
        return context


@dataclass(frozen=True)
class Endpoint:
    host: str
    port: int
    tls: bool = False
    destination: Optional[str] = None

    def __str__(self) -> str:
        scheme = "stomp+tls" if self.tls else "stomp"
        return f"{scheme}://{self.host}:{self.port}{self.destination or ''}"


def parse_endpoint(uri: str) -> Endpoint:
    """``stomp://host:port/queue/NAME`` or ``stomp+tls://...`` (``stomp+ssl`` also accepted)."""
    parts = urlsplit(uri)
    scheme = parts.scheme.lower()
    if scheme not in _PLAIN_SCHEMES | _TLS_SCHEMES:
        raise ValueError(f"unsupported broker URI scheme in {uri!r}")
    if not parts.hostname:
        raise ValueError(f"broker URI {uri!r} has no host")
    tls = scheme in _TLS_SCHEMES
    try:
        port = parts.port or (DEFAULT_TLS_PORT if tls else DEFAULT_PORT)
    except ValueError as exc:
        raise ValueError(f"broker URI {uri!r} has an invalid port") from exc
    destination = parts.path if parts.path not in ("", "/") else None
    return Endpoint(parts.hostname, port, tls, destination)


def valid_destination(name: str) -> bool:
    """``/queue/NAME`` or ``/topic/NAME`` with a non-empty NAME."""
    return name.startswith((QUEUE_PREFIX, TOPIC_PREFIX)) and name not in (QUEUE_PREFIX, TOPIC_PREFIX)


class Transport(Protocol):
    def sendall(self, data: bytes) -> None: ...

    def recv(self, size: int) -> bytes: ...

    def settimeout(self, value: Optional[float]) -> None: ...

    def close(self) -> None: ...


def open_transport(host: str, port: int, tls: Optional[TlsConfig] = None,
                   timeout: Optional[float] = None) -> socket.socket:
    timeout = settings.connect_timeout() if timeout is None else timeout
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectFailed(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    if tls is not None and tls.enabled:
        try:
            return tls.client_context().wrap_socket(sock, server_hostname=host)
        except (ssl.SSLError, ssl.CertificateError, OSError) as exc:
            sock.close()
            raise TlsHandshakeError(f"TLS handshake with {host}:{port} failed: {exc}") from exc
    return sock


# -- client session -------------------------------------------------------------


class SessionState(str, Enum):
    DISCONNECTED = "disconnected"
    CONNECTING = "connecting"
    CONNECTED = "connected"
    CLOSED = "closed"


class AckMode(str, Enum):
    AUTO = "auto"
    CLIENT = "client"
    CLIENT_INDIVIDUAL = "client-individual"


class EventKind(str, Enum):
    MESSAGE = "message"
    RECEIPT = "receipt"
    ERROR = "error"
    HEARTBEAT_TIMEOUT = "heartbeat-timeout"
    IDLE = "idle"


@dataclass(frozen=True)
class SessionEvent:
    kind: EventKind
    frame: Optional[Frame] = None
    receipt_id: Optional[str] = None


class ClientSession:
    """One STOMP connection. Single owner: callers serialize every operation."""

    def __init__(self, transport: Transport, *, clock: Callable[[], float] = time.monotonic,
                 max_frame_size: Optional[int] = None) -> None:
        self.transport = transport
        self.state = SessionState.DISCONNECTED
        self.version = "1.0"
        self.send_interval = 0
        self.receive_timeout = 0
        self.server: Optional[str] = None
        self.session_id: Optional[str] = None
        self.pending_receipts: set[str] = set()
        self.subscriptions: dict[str, tuple[str, AckMode]] = {}
        self._parser = FrameParser("1.0", max_frame_size)
        self._clock = clock
        self._ids = itertools.count(1)
        self._prefix = uuid.uuid4().hex[:8]
        self._backlog: deque[SessionEvent] = deque()
        self._last_sent = self._last_received = clock()

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, *exc_info) -> None:
        self.disconnect()

    # plumbing

    def _next_id(self, kind: str) -> str:
        return f"{kind}-{self._prefix}-{next(self._ids)}"

    def _require(self, operation: str) -> None:
        if self.state is not SessionState.CONNECTED:
            raise ProtocolMisuse(f"{operation} is not allowed while {self.state.value}")

    def _close_transport(self) -> None:
        self.state = SessionState.CLOSED
        try:
            self.transport.close()
        except OSError:
            pass

    def _write(self, frame: Frame) -> None:
        self._write_bytes(encode(frame, self.version))

    def _write_bytes(self, data: bytes) -> None:
        try:
            self.transport.sendall(data)
        except OSError as exc:
            self._close_transport()
            raise ConnectionLost(f"send failed: {exc}") from exc
        self._last_sent = self._clock()

    def _recv(self, timeout: float) -> Optional[bytes]:
        try:
            self.transport.settimeout(max(timeout, 0.001))
            data = self.transport.recv(65536)
        except (socket.timeout, BlockingIOError, ssl.SSLWantReadError):
            return None
        except OSError as exc:
            self._close_transport()
            raise ConnectionLost(f"receive failed: {exc}") from exc
        if not data:
            self._close_transport()
            raise ConnectionLost("connection closed by peer")
        self._last_received = self._clock()
        return data

    def _next_frame(self) -> Optional[Frame]:
        try:
            return self._parser.next_frame()
        except FrameError:
            self._close_transport()
            raise

    def _read_frame(self, deadline: float) -> Optional[Frame]:
        while True:
            frame = self._next_frame()
            if frame is not None:
                return frame
            remaining = deadline - self._clock()
            if remaining <= 0:
                return None
            data = self._recv(remaining)
            if data:
                self._parser.feed(data)

    # handshake

    def connect(self, login: Optional[str] = None, passcode: Optional[str] = None,
                vhost: str = "localhost", heartbeat: tuple[int, int] = (0, 0),
                timeout: Optional[float] = None) -> "ClientSession":
        if self.state is not SessionState.DISCONNECTED:
            raise ProtocolMisuse(f"connect is not allowed while {self.state.value}")
        timeout = settings.connect_timeout() if timeout is None else timeout
        headers = [("accept-version", ACCEPT_VERSION), ("host", vhost),
                   ("heart-beat", f"{heartbeat[0]},{heartbeat[1]}")]
        if login is not None:
            headers.append(("login", login))
        if passcode is not None:
            headers.append(("passcode", passcode))
        self.state = SessionState.CONNECTING
        self._write(Frame("CONNECT", tuple(headers)))
        deadline = self._clock() + timeout
        while True:
            frame = self._read_frame(deadline)
            if frame is None:
                self._close_transport()
                raise ConnectTimeout(f"no CONNECTED frame within {timeout:.1f}s")
            if frame.command == "ERROR":
                self._close_transport()
                raise ServerError(frame)
            if frame.command != "CONNECTED":
                log.debug("[STOMP] ignoring %s before CONNECTED", frame.command)
                continue
            version = frame.get("version", "1.0")
            if version not in SUPPORTED_VERSIONS:
                self._close_transport()
                raise ConnectFailed(f"broker negotiated unsupported STOMP version {version}")
            self.version = version
            self._parser.version = version
            self.server = frame.get("server")
            self.session_id = frame.get("session")
            self.send_interval, self.receive_timeout = negotiate_heartbeat(
                heartbeat, parse_heartbeat(frame.get("heart-beat")))
            self.state = SessionState.CONNECTED
            log.debug("[STOMP] connected (version %s, heart-beat send %d ms, expect %d ms)",
                      self.version, self.send_interval, self.receive_timeout)
            return self

    # client frames

    def send(self, destination: str, body: bytes = b"", headers: Optional[Mapping[str, str]] = None,
             want_receipt: bool = False) -> Optional[str]:
        self._require("SEND")
        reserved = {"destination", "content-length", "receipt"}
        frame_headers = [("destination", destination)]
        frame_headers += [(k, v) for k, v in (headers or {}).items() if k not in reserved]
        receipt = self._next_id("receipt") if want_receipt else None
        if receipt:
            frame_headers.append(("receipt", receipt))
        try:
            data = encode(Frame("SEND", tuple(frame_headers), body), self.version)
        except FrameError as exc:
            raise UnsendableFrame(f"cannot send to {destination}: {exc}") from exc
        self._write_bytes(data)
        if receipt:
            self.pending_receipts.add(receipt)
        return receipt

    def subscribe(self, destination: str, ack_mode: Union[AckMode, str] = AckMode.AUTO) -> str:
        self._require("SUBSCRIBE")
        mode = AckMode(ack_mode)
        sub_id = self._next_id("sub")
        self._write(Frame("SUBSCRIBE", (("id", sub_id), ("destination", destination), ("ack", mode.value))))
        self.subscriptions[sub_id] = (destination, mode)
        return sub_id

    def unsubscribe(self, sub_id: str, want_receipt: bool = False) -> Optional[str]:
        self._require("UNSUBSCRIBE")
        if sub_id not in self.subscriptions:
            raise ProtocolMisuse(f"unknown subscription {sub_id}")
        headers = [("id", sub_id)]
        receipt = self._next_id("receipt") if want_receipt else None
        if receipt:
            headers.append(("receipt", receipt))
        self._write(Frame("UNSUBSCRIBE", tuple(headers)))
        del self.subscriptions[sub_id]
        if receipt:
            self.pending_receipts.add(receipt)
        return receipt

    def _ack_subscription(self, frame: Frame, operation: str) -> str:
        self._require(operation)
        sub_id = frame.get("subscription")
        if sub_id is None and len(self.subscriptions) == 1:
            sub_id = next(iter(self.subscriptions))
        if sub_id not in self.subscriptions:
            raise ProtocolMisuse(f"{operation} for unknown subscription {sub_id!r}")
        if self.subscriptions[sub_id][1] is AckMode.AUTO:
            raise ProtocolMisuse(f"{operation} on an auto-acknowledged subscription")
        return sub_id

    def ack(self, frame: Frame) -> None:
        sub_id = self._ack_subscription(frame, "ACK")
        if self.version == "1.2":
            headers = (("id", frame.get("ack") or frame.get("message-id", "")),)
        else:
            headers = (("message-id", frame.get("message-id", "")), ("subscription", sub_id))
        self._write(Frame("ACK", headers))

    def nack(self, frame: Frame) -> None:
        self._ack_subscription(frame, "NACK")
        if self.version != "1.2":
            raise ProtocolMisuse("NACK requires STOMP 1.2")
        self._write(Frame("NACK", (("id", frame.get("ack") or frame.get("message-id", "")),)))

    # inbound

    def _dispatch(self, frame: Frame) -> Optional[SessionEvent]:
        if frame.command == "MESSAGE":
            return SessionEvent(EventKind.MESSAGE, frame)
        if frame.command == "RECEIPT":
            receipt = frame.get("receipt-id")
            if receipt in self.pending_receipts:
                self.pending_receipts.discard(receipt)
                return SessionEvent(EventKind.RECEIPT, frame, receipt)
            log.debug("[STOMP] ignoring unrequested receipt %r", receipt)
            return None
        if frame.command == "ERROR":
            self._close_transport()
            return SessionEvent(EventKind.ERROR, frame)
        log.debug("[STOMP] ignoring unexpected %s frame", frame.command)
        return None

    def _heartbeat(self, now: float) -> None:
        if self.send_interval and (now - self._last_sent) * 1000 >= self.send_interval:
            try:
                self.transport.sendall(HEARTBEAT_EOL)
            except OSError as exc:
                self._close_transport()
                raise ConnectionLost(f"heart-beat send failed: {exc}") from exc
            self._last_sent = now

    def _next_event(self, deadline: float) -> SessionEvent:
        while True:
            frame = self._next_frame()
            if frame is not None:
                event = self._dispatch(frame)
                if event is not None:
                    return event
                continue
            now = self._clock()
            self._heartbeat(now)
            limit = self.receive_timeout * HEARTBEAT_GRACE / 1000
            if self.receive_timeout and now - self._last_received > limit:
                log.warning("[STOMP] no traffic from broker for %.1fs", now - self._last_received)
                self._close_transport()
                return SessionEvent(EventKind.HEARTBEAT_TIMEOUT)
            if now >= deadline:
                return SessionEvent(EventKind.IDLE)
            wait = deadline - now
            if self.send_interval:
                wait = min(wait, self._last_sent + self.send_interval / 1000 - now)
            if self.receive_timeout:
                wait = min(wait, self._last_received + limit - now)
            data = self._recv(max(wait, 0.0))
            if data:
                self._parser.feed(data)

    def poll(self, deadline: float) -> SessionEvent:
        """Next inbound event, or IDLE once ``deadline`` (session clock) passes.

        Owed heart-beats are transmitted while waiting.
        """
        if self._backlog:
            return self._backlog.popleft()
        self._require("poll")
        return self._next_event(deadline)

    def wait_for_receipts(self, receipts: Iterable[str], timeout: float) -> set[str]:
        """Block until every receipt arrived or ``timeout`` elapsed; returns those seen.

        Other events arriving meanwhile are kept for later :meth:`poll` calls.
        """
        wanted = set(receipts)
        seen: set[str] = set()
        for event in list(self._backlog):
            if event.kind is EventKind.RECEIPT and event.receipt_id in wanted:
                self._backlog.remove(event)
                seen.add(event.receipt_id)
        deadline = self._clock() + timeout
        while wanted - seen:
            self._require("receipt wait")
            event = self._next_event(deadline)
            if event.kind is EventKind.IDLE:
                break
            if event.kind is EventKind.RECEIPT and event.receipt_id in wanted:
                seen.add(event.receipt_id)
            elif event.kind is EventKind.ERROR:
                raise ServerError(event.frame)  # type: ignore[arg-type]
            elif event.kind is EventKind.HEARTBEAT_TIMEOUT:
                raise ConnectionLost("heart-beat timeout while waiting for receipts")
            else:
                self._backlog.append(event)
        return seen

    def backlog_size(self) -> int:
        return sum(1 for event in self._backlog if event.kind is EventKind.MESSAGE)

    def disconnect(self, timeout: float = 5.0) -> None:
        """DISCONNECT with a receipt, wait for it (bounded), then close."""
        if self.state is SessionState.CONNECTED:
            try:
                receipt = self._next_id("receipt")
                self._write(Frame("DISCONNECT", (("receipt", receipt),)))
                self.pending_receipts.add(receipt)
                if not self.wait_for_receipts([receipt], timeout):
                    log.debug("[STOMP] no receipt for DISCONNECT within %.1fs", timeout)
            except StompError as exc:
                log.debug("[STOMP] disconnect: %s", exc)
        self._close_transport()

    def close(self) -> None:
        self._close_transport()


def session_connect(transport: Transport, login: Optional[str] = None, passcode: Optional[str] = None,
                    vhost: str = "localhost", heartbeat: tuple[int, int] = (0, 0),
                    timeout: Optional[float] = None, *, clock: Callable[[], float] = time.monotonic,
                    max_frame_size: Optional[int] = None) -> ClientSession:
    session = ClientSession(transport, clock=clock, max_frame_size=max_frame_size)
    return session.connect(login, passcode, vhost, heartbeat, timeout)


def dial(endpoint: Union[str, Endpoint], tls: Optional[TlsConfig] = None, *, login: Optional[str] = None,
         passcode: Optional[str] = None, vhost: Optional[str] = None,
         heartbeat: tuple[int, int] = (0, 0), timeout: Optional[float] = None) -> ClientSession:
    """Open a TCP (or TLS) connection and complete the STOMP handshake."""
    target = parse_endpoint(endpoint) if isinstance(endpoint, str) else endpoint
    if target.tls and tls is None:
        tls = TlsConfig()
    elif not target.tls and tls is not None and tls.enabled:
        log.warning("[STOMP] TLS settings given for plain endpoint %s:%d; connecting with TLS",
                    target.host, target.port)
    transport = open_transport(target.host, target.port, tls if (target.tls or tls) else None, timeout)
    try:
        return session_connect(transport, login, passcode, vhost or target.host, heartbeat, timeout)
    except BaseException:
        try:
            transport.close()
        except OSError:
            pass
        raise

