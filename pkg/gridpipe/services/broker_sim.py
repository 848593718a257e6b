"""In-memory STOMP broker used for desk-scale end-to-end runs.

The broker speaks the same wire protocol as :mod:`gridpipe.stomp` and runs an
asyncio server in a background thread. All broker state is owned by that loop;
other threads reach it through :class:`BrokerHandle`.
"""
from __future__ import annotations

import asyncio
import concurrent.futures
import itertools
import logging
import math
import threading
import uuid
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Annotated, Any, Callable, Literal, Mapping, Optional, Union

from pydantic import BaseModel, Field, TypeAdapter, ValidationError

from .. import __version__, settings
from ..errors import GridpipeError
from ..stomp import (
    ACCEPT_VERSION, AckMode, Frame, FrameError, FrameParser, HEARTBEAT_GRACE, TOPIC_PREFIX, TlsConfig,
    encode, negotiate_heartbeat, parse_heartbeat, valid_destination,
)

log = logging.getLogger(__name__)

SERVER_NAME = f"gridpipe-broker-sim/{__version__}"
# headers owned by the broker, never copied from SEND into MESSAGE
_TRANSPORT_HEADERS = frozenset({
    "destination", "receipt", "content-length", "transaction", "message-id", "subscription", "ack",
})


class BrokerError(GridpipeError):
    pass


# -- fault plan ---------------------------------------------------------------


class DropConnection(BaseModel):
    """Close each connection when its Nth inbound frame arrives (that frame is not processed)."""

    kind: Literal["drop-connection"] = "drop-connection"
    after_frames: int = Field(gt=0)


class SwallowReceipts(BaseModel):
    """Withhold this fraction of RECEIPT frames, spread evenly over the receipt sequence."""

    kind: Literal["swallow-receipts"] = "swallow-receipts"
    fraction: float = Field(default=1.0, gt=0.0, le=1.0)


class DelayDelivery(BaseModel):
    kind: Literal["delay-delivery"] = "delay-delivery"
    delay_ms: int = Field(ge=0)


Fault = Annotated[Union[DropConnection, SwallowReceipts, DelayDelivery], Field(discriminator="kind")]
_FAULT_ADAPTER: TypeAdapter = TypeAdapter(Fault)


class FaultPlan(BaseModel):
    faults: list[Fault] = Field(default_factory=list)


def parse_fault(text: str) -> Fault:
    """``drop:50``, ``swallow:0.1`` (or ``swallow``) and ``delay:250`` as used on the command line."""
    kind, _, value = text.strip().partition(":")
    kind = kind.lower()
    try:
        if kind in ("drop", "drop-connection"):
            return _FAULT_ADAPTER.validate_python({"kind": "drop-connection", "after_frames": int(value)})
        if kind in ("swallow", "swallow-receipts"):
            return _FAULT_ADAPTER.validate_python(
                {"kind": "swallow-receipts", "fraction": float(value) if value else 1.0})
        if kind in ("delay", "delay-delivery"):
            return _FAULT_ADAPTER.validate_python({"kind": "delay-delivery", "delay_ms": int(value)})
    except (ValueError, ValidationError) as exc:
        raise BrokerError(f"invalid fault {text!r}: {exc}") from exc
    raise BrokerError(f"unknown fault {text!r} (expected drop:N, swallow[:F] or delay:MS)")


# -- state ------------------------------------------------------------------------


class DestinationStats(BaseModel):
    enqueued: int = 0
    delivered: int = 0
    acked: int = 0
    requeued: int = 0
    stored: int = 0
    pending: int = 0


@dataclass
class _Stored:
    message_id: str
    destination: str
    headers: list[tuple[str, str]]
    body: bytes


@dataclass(eq=False)
class _Subscription:
    connection: "_Connection"
    sub_id: str
    destination: str
    ack: AckMode


@dataclass
class _Destination:
    name: str
    fifo: deque = field(default_factory=deque)
    subscribers: list = field(default_factory=list)
    next_subscriber: int = 0
    stats: DestinationStats = field(default_factory=DestinationStats)

    @property
    def is_topic(self) -> bool:
        return self.name.startswith(TOPIC_PREFIX)


@dataclass(eq=False)
class _Connection:
    number: int
    writer: asyncio.StreamWriter
    parser: FrameParser
    version: str = "1.0"
    connected: bool = False
    closed: bool = False
    frames_seen: int = 0
    send_interval: int = 0
    receive_timeout: int = 0
    subscriptions: dict = field(default_factory=dict)
    pending: "OrderedDict[str, tuple[_Stored, _Subscription]]" = field(default_factory=OrderedDict)
    outbound: asyncio.Queue = field(default_factory=asyncio.Queue)

    def send(self, frame: Frame) -> None:
        if not self.closed:
            self.outbound.put_nowait((frame.command, encode(frame, self.version)))

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.outbound.put_nowait(None)

    def abort(self) -> None:
        self.closed = True
        self.outbound.put_nowait(None)
        self.writer.transport.abort()


class StompBroker:
    """Broker state plus the per-connection protocol handlers (event-loop thread only)."""

    def __init__(self, credentials: Optional[Mapping[str, str]] = None,
                 heartbeat: tuple[int, int] = (0, 0), max_frame_size: Optional[int] = None) -> None:
        self.credentials = dict(credentials) if credentials else None
        self.heartbeat = heartbeat
        self.max_frame_size = max_frame_size or settings.max_frame_size()
        self.destinations: dict[str, _Destination] = {}
        self.connections: set[_Connection] = set()
        self._message_ids = itertools.count(1)
        self._connection_ids = itertools.count(1)
        self._prefix = uuid.uuid4().hex[:8]
        self.drop_after: Optional[int] = None
        self.swallow_fraction = 0.0
        self.delay_ms = 0
        self._receipts_seen = 0

    # faults

    def inject_fault(self, fault: Fault) -> None:
        if isinstance(fault, DropConnection):
            self.drop_after = fault.after_frames
        elif isinstance(fault, SwallowReceipts):
            self.swallow_fraction = fault.fraction
        elif isinstance(fault, DelayDelivery):
            self.delay_ms = fault.delay_ms
        log.info("[BrokerSim] fault injected: %s", fault.model_dump())

    def clear_faults(self) -> None:
        self.drop_after = None
        self.swallow_fraction = 0.0
        self.delay_ms = 0

    def _swallow_receipt(self) -> bool:
        n = self._receipts_seen
        self._receipts_seen += 1
        if not self.swallow_fraction:
            return False
        return math.floor((n + 1) * self.swallow_fraction) > math.floor(n * self.swallow_fraction)

    # bookkeeping

    def _destination(self, name: str) -> _Destination:
        dest = self.destinations.get(name)
        if dest is None:
            dest = self.destinations[name] = _Destination(name)
        return dest

    def stats(self) -> dict[str, DestinationStats]:
        snapshot: dict[str, DestinationStats] = {}
        pending: dict[str, int] = {}
        for conn in self.connections:
            for stored, _ in conn.pending.values():
                pending[stored.destination] = pending.get(stored.destination, 0) + 1
        for name, dest in self.destinations.items():
            snapshot[name] = dest.stats.model_copy(update={"stored": len(dest.fifo), "pending": pending.get(name, 0)})
        return snapshot

    # delivery

    def _deliver(self, sub: _Subscription, stored: _Stored) -> None:
        conn = sub.connection
        headers = [("destination", stored.destination), ("message-id", stored.message_id),
                   ("subscription", sub.sub_id)]
        if conn.version == "1.2":
            headers.append(("ack", stored.message_id))
        headers.extend(stored.headers)
        conn.send(Frame("MESSAGE", tuple(headers), stored.body))
        dest = self._destination(stored.destination)
        dest.stats.delivered += 1
        if sub.ack is AckMode.AUTO:
            dest.stats.acked += 1
        else:
            conn.pending[stored.message_id] = (stored, sub)

    def _pump(self, dest: _Destination) -> None:
        while dest.fifo and dest.subscribers:
            sub = dest.subscribers[dest.next_subscriber % len(dest.subscribers)]
            dest.next_subscriber += 1
            self._deliver(sub, dest.fifo.popleft())

    def _requeue(self, entries: list[tuple[_Stored, _Subscription]]) -> None:
        by_destination: dict[str, list[_Stored]] = {}
        for stored, _ in entries:
            by_destination.setdefault(stored.destination, []).append(stored)
        for name, items in by_destination.items():
            dest = self._destination(name)
            if dest.is_topic:
                continue
            dest.fifo.extendleft(reversed(items))
            dest.stats.requeued += len(items)
            self._pump(dest)

    def _drop_subscription(self, sub: _Subscription) -> list[tuple[_Stored, _Subscription]]:
        dest = self._destination(sub.destination)
        if sub in dest.subscribers:
            dest.subscribers.remove(sub)
        conn = sub.connection
        released = [(mid, entry) for mid, entry in conn.pending.items() if entry[1] is sub]
        for mid, _ in released:
            del conn.pending[mid]
        return [entry for _, entry in released]

    # frame handlers

    def _error(self, conn: _Connection, message: str, frame: Optional[Frame] = None) -> None:
        log.info("[BrokerSim] connection %d: %s", conn.number, message)
        headers = [("message", message)]
        if frame is not None and frame.get("receipt"):
            headers.append(("receipt-id", frame.get("receipt", "")))
        conn.send(Frame("ERROR", tuple(headers), message.encode("utf-8")))
        conn.close()

    def _on_connect(self, conn: _Connection, frame: Frame) -> None:
        accepted = [v.strip() for v in (frame.get("accept-version") or "1.0").split(",")]
        version = next((v for v in ("1.2", "1.0") if v in accepted), None)
        if version is None:
            conn.send(Frame("ERROR", (("version", ACCEPT_VERSION), ("message", "unsupported protocol version"))))
            conn.close()
            return
        if self.credentials is not None:
            login = frame.get("login")
            if login not in self.credentials or self.credentials[login] != frame.get("passcode"):
                self._error(conn, "authentication failed")
                return
        try:
            client_hb = parse_heartbeat(frame.get("heart-beat"))
        except FrameError as exc:
            self._error(conn, str(exc))
            return
        conn.send_interval, conn.receive_timeout = negotiate_heartbeat(self.heartbeat, client_hb)
        conn.version = version
        conn.parser.version = version
        conn.connected = True
        conn.send(Frame("CONNECTED", (
            ("version", version), ("server", SERVER_NAME),
            ("session", f"{self._prefix}-{conn.number}"),
            ("heart-beat", f"{self.heartbeat[0]},{self.heartbeat[1]}"),
        )))

    def _on_send(self, conn: _Connection, frame: Frame) -> None:
        name = frame.get("destination") or ""
        if not valid_destination(name):
            self._error(conn, f"invalid destination {name!r}", frame)
            return
        stored = _Stored(
            message_id=f"{self._prefix}-{next(self._message_ids)}",
            destination=name,
            headers=[(k, v) for k, v in frame.header_map().items() if k not in _TRANSPORT_HEADERS],
            body=frame.body,
        )
        dest = self._destination(name)
        dest.stats.enqueued += 1
        if dest.is_topic:
            for sub in list(dest.subscribers):
                self._deliver(sub, stored)
        else:
            dest.fifo.append(stored)
            self._pump(dest)

    def _on_subscribe(self, conn: _Connection, frame: Frame) -> None:
        name = frame.get("destination") or ""
        if not valid_destination(name):
            self._error(conn, f"invalid destination {name!r}", frame)
            return
        sub_id = frame.get("id") or name
        try:
            mode = AckMode(frame.get("ack") or "auto")
        except ValueError:
            self._error(conn, f"invalid ack mode {frame.get('ack')!r}", frame)
            return
        if sub_id in conn.subscriptions:
            self._error(conn, f"duplicate subscription id {sub_id!r}", frame)
            return
        sub = _Subscription(conn, sub_id, name, mode)
        conn.subscriptions[sub_id] = sub
        dest = self._destination(name)
        dest.subscribers.append(sub)
        self._pump(dest)

    def _on_unsubscribe(self, conn: _Connection, frame: Frame) -> None:
        sub_id = frame.get("id") or frame.get("destination")
        sub = conn.subscriptions.pop(sub_id, None)
        if sub is None:
            self._error(conn, f"unknown subscription {sub_id!r}", frame)
            return
        self._requeue(self._drop_subscription(sub))

    def _select_pending(self, conn: _Connection, frame: Frame) -> list[str]:
        ack_id = frame.get("id") if conn.version == "1.2" else frame.get("message-id")
        entry = conn.pending.get(ack_id or "")
        if entry is None:
            log.warning("[BrokerSim] connection %d: %s for unknown message %r", conn.number, frame.command, ack_id)
            return []
        sub = entry[1]
        if sub.ack is AckMode.CLIENT_INDIVIDUAL:
            return [ack_id]
        selected = []
        for mid, (_, owner) in conn.pending.items():
            if owner is sub:
                selected.append(mid)
            if mid == ack_id:
                break
        return selected

    def _on_ack(self, conn: _Connection, frame: Frame) -> None:
        for mid in self._select_pending(conn, frame):
            stored, _ = conn.pending.pop(mid)
            self._destination(stored.destination).stats.acked += 1

    def _on_nack(self, conn: _Connection, frame: Frame) -> None:
        if conn.version != "1.2":
            self._error(conn, "NACK requires STOMP 1.2", frame)
            return
        self._requeue([conn.pending.pop(mid) for mid in self._select_pending(conn, frame)])

    def handle_frame(self, conn: _Connection, frame: Frame) -> None:
        command = frame.command
        if not conn.connected:
            if command == "CONNECT":
                self._on_connect(conn, frame)
            else:
                self._error(conn, f"expected CONNECT, got {command}")
            return
        handlers: dict[str, Callable[[_Connection, Frame], None]] = {
            "SEND": self._on_send,
            "SUBSCRIBE": self._on_subscribe,
            "UNSUBSCRIBE": self._on_unsubscribe,
            "ACK": self._on_ack,
            "NACK": self._on_nack,
        }
        handler = handlers.get(command)
        if handler is not None:
            handler(conn, frame)
        elif command != "DISCONNECT":
            self._error(conn, f"{command} is not supported", frame)
            return
        receipt = frame.get("receipt")
        if receipt and not conn.closed:
            if self._swallow_receipt():
                log.debug("[BrokerSim] swallowing receipt %s", receipt)
            else:
                conn.send(Frame("RECEIPT", (("receipt-id", receipt),)))
        if command == "DISCONNECT":
            conn.close()

    def release(self, conn: _Connection) -> None:
        """Forget a finished connection; its unacknowledged queue messages go back to the front."""
        if conn not in self.connections:
            return
        self.connections.discard(conn)
        conn.close()
        released: list[tuple[_Stored, _Subscription]] = []
        for sub in list(conn.subscriptions.values()):
            released.extend(self._drop_subscription(sub))
        conn.subscriptions.clear()
        released.extend(conn.pending.values())
        conn.pending.clear()
        self._requeue(released)

    # connection tasks

    async def _write_loop(self, conn: _Connection) -> None:
        writer = conn.writer
        try:
            while True:
                timeout = conn.send_interval / 1000 if conn.send_interval else None
                try:
                    item = await asyncio.wait_for(conn.outbound.get(), timeout)
                except asyncio.TimeoutError:
                    writer.write(b"\n")
                    await writer.drain()
                    continue
                if item is None:
                    break
                command, data = item
                if command == "MESSAGE" and self.delay_ms:
                    await asyncio.sleep(self.delay_ms / 1000)
                writer.write(data)
                await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()

    async def handle_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        conn = _Connection(next(self._connection_ids), writer, FrameParser("1.0", self.max_frame_size))
        self.connections.add(conn)
        write_task = asyncio.ensure_future(self._write_loop(conn))
        try:
            while not conn.closed:
                timeout = conn.receive_timeout * HEARTBEAT_GRACE / 1000 if conn.receive_timeout else None
                try:
                    data = await asyncio.wait_for(reader.read(65536), timeout)
                except asyncio.TimeoutError:
                    log.info("[BrokerSim] connection %d missed heart-beats, closing", conn.number)
                    break
                if not data:
                    break
                conn.parser.feed(data)
                while not conn.closed:
                    frame = conn.parser.next_frame()
                    if frame is None:
                        break
                    conn.frames_seen += 1
                    if self.drop_after is not None and conn.frames_seen >= self.drop_after:
                        log.info("[BrokerSim] dropping connection %d at frame %d", conn.number, conn.frames_seen)
                        conn.abort()
                        break
                    self.handle_frame(conn, frame)
        except FrameError as exc:
            self._error(conn, f"malformed frame: {exc}")
        except (ConnectionError, OSError):
            pass
        finally:
            self.release(conn)
            try:
                await asyncio.wait_for(write_task, 5)
            except (asyncio.TimeoutError, asyncio.CancelledError):
                write_task.cancel()


class BrokerHandle:
    """Running broker: bound address, fault control, stats and shutdown."""

    def __init__(self, broker: StompBroker, loop: asyncio.AbstractEventLoop, thread: threading.Thread,
                 host: str, port: int, tls: bool) -> None:
        self.broker = broker
        self.host = host
        self.port = port
        self.tls = tls
        self._loop = loop
        self._thread = thread

    def __enter__(self) -> "BrokerHandle":
        return self

    def __exit__(self, *exc_info) -> None:
        self.stop()

    def uri(self, destination: str = "") -> str:
        scheme = "stomp+tls" if self.tls else "stomp"
        return f"{scheme}://{self.host}:{self.port}{destination}"

    def _call(self, fn: Callable[..., Any], *args: Any) -> Any:
        if not self._thread.is_alive():
            raise BrokerError("broker is not running")
        future: concurrent.futures.Future = concurrent.futures.Future()

        def run() -> None:
            try:
                future.set_result(fn(*args))
            except BaseException as exc:
                future.set_exception(exc)

        self._loop.call_soon_threadsafe(run)
        return future.result(timeout=10)

    def stats(self) -> dict[str, DestinationStats]:
        return self._call(self.broker.stats)

    def inject_fault(self, fault: Union[Fault, str]) -> None:
        self._call(self.broker.inject_fault, parse_fault(fault) if isinstance(fault, str) else fault)

    def clear_faults(self) -> None:
        self._call(self.broker.clear_faults)

    def connection_count(self) -> int:
        return self._call(lambda: len(self.broker.connections))

    @property
    def running(self) -> bool:
        return self._thread.is_alive()

    def stop(self) -> None:
        if self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=10)


def broker_serve(host: str = "127.0.0.1", port: int = 0, tls: Optional[TlsConfig] = None,
                 faults: Optional[FaultPlan] = None, credentials: Optional[Mapping[str, str]] = None,
                 heartbeat: tuple[int, int] = (0, 0)) -> BrokerHandle:
    """Start a broker in a background thread; ``port=0`` picks a free port."""
    context = tls.server_context() if tls is not None and tls.enabled else None
    broker = StompBroker(credentials, heartbeat)
    for fault in (faults.faults if faults else []):
        broker.inject_fault(fault)
    loop = asyncio.new_event_loop()
    ready = threading.Event()
    outcome: dict[str, Any] = {}

    def run() -> None:
        asyncio.set_event_loop(loop)
        try:
            server = loop.run_until_complete(
                asyncio.start_server(broker.handle_client, host, port, ssl=context))
        except OSError as exc:
            outcome["error"] = exc
            ready.set()
            loop.close()
            return
        outcome["port"] = server.sockets[0].getsockname()[1]
        ready.set()
        try:
            loop.run_forever()
        finally:
            server.close()
            for conn in list(broker.connections):
                conn.abort()
            tasks = asyncio.all_tasks(loop)
            for task in tasks:
                task.cancel()
            loop.run_until_complete(asyncio.gather(*tasks, return_exceptions=True))
            loop.close()
            log.info("[BrokerSim] stopped")

    thread = threading.Thread(target=run, name="broker-sim", daemon=True)
    thread.start()
    ready.wait()
    if "error" in outcome:
        raise BrokerError(f"cannot bind {host}:{port}: {outcome['error']}") from outcome["error"]
    handle = BrokerHandle(broker, loop, thread, host, outcome["port"], context is not None)
    log.info("[BrokerSim] listening on %s", handle.uri())
    return handle


def serve_forever(host: str, port: int, stop: threading.Event, **kwargs: Any) -> dict[str, DestinationStats]:
    """Blocking variant for the command line; returns the final stats once ``stop`` is set."""
    with broker_serve(host, port, **kwargs) as handle:
        print(f"listening on {handle.uri()}", flush=True)
        while not stop.wait(0.5):
            if not handle.running:
                raise BrokerError("broker thread exited unexpectedly")
        return handle.stats()
