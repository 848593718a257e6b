"""Forwarder: moves messages between a directory queue and a broker, at least once.

An input module (source) hands out batches of deliveries; the output module (sink)
reports which of them it made durable; the source then removes/acknowledges exactly
those, moves the ones that can never be sent to the poison queue and rolls the rest
back for a later retry.
"""
from __future__ import annotations

import importlib
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Any, Callable, Literal, Optional, Protocol, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .. import settings
from ..backoff import Backoff
from ..dirq import DEFAULT_GRANULARITY, DirQueue
from ..errors import ConfigError, GridpipeError
from ..message import Message, MessageError, deserialize, serialize
from ..stomp import (
    AckMode, ClientSession, ConnectionLost, EventKind, Frame, ServerError, StompError, TlsConfig,
    UnsendableFrame, dial, parse_endpoint, valid_destination,
)

log = logging.getLogger(__name__)

POISON_SUFFIX = ".poison"
# STOMP headers that describe the transport, not the message
INTERNAL_HEADERS = frozenset({"subscription", "message-id", "ack", "content-length"})
_BATCH_LINGER = 0.05

Hook = Callable[[Message], Message]


class ForwarderError(GridpipeError):
    pass


class EndpointUnreachable(ForwarderError):
    pass


def forward_process_hook(message: Message) -> Message:
    """Default transform between read and write: identity."""
    return message


def load_hook(spec: Optional[str]) -> Hook:
    """Resolve ``package.module:function``; ``None`` gives the identity hook."""
    if not spec:
        return forward_process_hook
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise ConfigError(f"hook must look like package.module:function, got {spec!r}", key="hook")
    try:
        hook = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load hook {spec!r}: {exc}", key="hook") from exc
    if not callable(hook):
        raise ConfigError(f"hook {spec!r} is not callable", key="hook")
    return hook


# -- configuration -------------------------------------------------------------------


class DirQueueEndpoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["dirq"] = "dirq"
    path: Path
    granularity: int = Field(default=DEFAULT_GRANULARITY, gt=0)


class BrokerEndpoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["broker"] = "broker"
    uri: str
    destination: Optional[str] = None
    ack_mode: Optional[AckMode] = None

    @model_validator(mode="before")
    @classmethod
    def _destination_from_uri(cls, data: Any) -> Any:
        if isinstance(data, dict) and not data.get("destination") and isinstance(data.get("uri"), str):
            data = {**data, "destination": parse_endpoint(data["uri"]).destination}
        return data

    @model_validator(mode="after")
    def _check_destination(self) -> "BrokerEndpoint":
        parse_endpoint(self.uri)
        if not self.destination:
            raise ValueError(f"no destination given for {self.uri}")
        return self


EndpointConfig = Annotated[Union[DirQueueEndpoint, BrokerEndpoint], Field(discriminator="kind")]


class ForwarderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "forwarder"
    incoming: EndpointConfig
    outgoing: EndpointConfig
    reliable: bool = True
    tls: Optional[TlsConfig] = None
    heartbeat: tuple[int, int] = (0, 0)
    backoff_initial: float = Field(default=1.0, gt=0)
    backoff_max: float = Field(default=60.0, gt=0)
    loop: bool = False
    poison_path: Optional[Path] = None
    receipt_timeout: float = Field(default_factory=settings.receipt_timeout, gt=0)
    idle_timeout: float = Field(default=2.0, gt=0)
    poll_interval: float = Field(default=0.5, gt=0)
    window: int = Field(default=100, gt=0)
    hook: Optional[str] = None
    login: Optional[str] = None
    passcode: Optional[str] = None
    vhost: Optional[str] = None

    @field_validator("heartbeat")
    @classmethod
    def _non_negative(cls, value: tuple[int, int]) -> tuple[int, int]:
        if value[0] < 0 or value[1] < 0:
            raise ValueError("heart-beat intervals must be >= 0")
        return value

    @model_validator(mode="after")
    def _check(self) -> "ForwarderConfig":
        if self.backoff_initial > self.backoff_max:
            raise ValueError("backoff_initial exceeds backoff_max")
        source = self.incoming
        if isinstance(source, BrokerEndpoint) and self.reliable and \
                source.ack_mode not in (None, AckMode.CLIENT_INDIVIDUAL):
            raise ValueError("a reliable broker source needs ack mode client-individual")
        return self

    @property
    def source_ack_mode(self) -> AckMode:
        source = self.incoming
        if isinstance(source, BrokerEndpoint) and source.ack_mode is not None:
            return source.ack_mode
        return AckMode.CLIENT_INDIVIDUAL if self.reliable else AckMode.AUTO

    def resolved_poison_path(self) -> Optional[Path]:
        if self.poison_path is not None:
            return self.poison_path
        for side in (self.incoming, self.outgoing):
            if isinstance(side, DirQueueEndpoint):
                return Path(str(side.path) + POISON_SUFFIX)
        return None


class ForwardReport(BaseModel):
    forwarded: int = 0
    retried: int = 0
    failed: int = 0
    in_flight_at_stop: int = 0

    def stats(self) -> dict[str, int]:
        return {"forwarded": self.forwarded, "retried": self.retried, "failed": self.failed}


# -- input and output modules ----------------------------------------------------------


@dataclass
class Delivery:
    message: Message
    token: Any
    raw: bytes = b""


@dataclass
class Batch:
    deliveries: list[Delivery] = field(default_factory=list)
    failed: int = 0


@dataclass(frozen=True)
class Written:
    """Sink verdict for one message: accepted, to be retried, or never sendable (``rejected``)."""

    accepted: bool = False
    rejected: Optional[str] = None


ACCEPTED = Written(accepted=True)
RETRY = Written()


class Source(Protocol):
    def open(self) -> None: ...

    def close(self) -> None: ...

    def begin_pass(self) -> None: ...

    def read(self, limit: int, stop: threading.Event) -> Batch: ...

    def commit(self, delivery: Delivery) -> None: ...

    def rollback(self, delivery: Delivery) -> None: ...

    def reject(self, delivery: Delivery, reason: str) -> bool: ...


class Sink(Protocol):
    def open(self) -> None: ...

    def close(self) -> None: ...

    def write(self, messages: list[Message]) -> list[Written]: ...


class _PoisonQueue:
    def __init__(self, path: Optional[Path]) -> None:
        self.path = path
        self._queue: Optional[DirQueue] = None

    def put(self, payload: bytes, reason: str, where: str) -> bool:
        if self.path is None:
            log.error("[Forwarder] %s rejected (%s) and no poison queue is configured", where, reason)
            return False
        if self._queue is None:
            self._queue = DirQueue(self.path)
        name = self._queue.add(payload)
        log.warning("[Forwarder] %s moved to poison queue as %s: %s", where, name, reason)
        return True


class DirQueueSource:
    def __init__(self, endpoint: DirQueueEndpoint, poison: _PoisonQueue) -> None:
        self.queue = DirQueue(endpoint.path, endpoint.granularity)
        self.poison = poison
        self._names: list[str] = []

    def open(self) -> None:
        pass

    def close(self) -> None:
        pass

    def begin_pass(self) -> None:
        self._names = list(self.queue.iterate())
        self._names.reverse()

    def read(self, limit: int, stop: threading.Event) -> Batch:
        batch = Batch()
        while self._names and len(batch.deliveries) < limit and not stop.is_set():
            name = self._names.pop()
            if not self.queue.lock(name):
                continue
            payload = self.queue.get(name)
            try:
                message = deserialize(payload)
            except MessageError as exc:
                if self.reject(Delivery(Message(), name, payload), str(exc)):
                    batch.failed += 1
                continue
            batch.deliveries.append(Delivery(message, name, payload))
        return batch

    def commit(self, delivery: Delivery) -> None:
        self.queue.remove(delivery.token)

    def rollback(self, delivery: Delivery) -> None:
        self.queue.unlock(delivery.token)

    def reject(self, delivery: Delivery, reason: str) -> bool:
        if self.poison.put(delivery.raw, reason, f"element {delivery.token}"):
            self.queue.remove(delivery.token)
            return True
        self.queue.unlock(delivery.token)
        return False


def _connect(config: ForwarderConfig, endpoint: BrokerEndpoint) -> ClientSession:
    return dial(endpoint.uri, config.tls, login=config.login, passcode=config.passcode,
                vhost=config.vhost, heartbeat=config.heartbeat)


def message_from_frame(frame: Frame) -> Message:
    header = {k: v for k, v in frame.header_map().items() if k not in INTERNAL_HEADERS}
    try:
        frame.body.decode("utf-8")
        text = True
    except UnicodeDecodeError:
        text = False
    return Message(header=header, body=frame.body, text=text)


class BrokerSource:
    def __init__(self, config: ForwarderConfig, endpoint: BrokerEndpoint, poison: _PoisonQueue,
                 clock: Callable[[], float] = time.monotonic) -> None:
        self.config = config
        self.endpoint = endpoint
        self.poison = poison
        self.ack_mode = config.source_ack_mode
        self.session: Optional[ClientSession] = None
        self._clock = clock

    def open(self) -> None:
        self.session = _connect(self.config, self.endpoint)
        self.session.subscribe(self.endpoint.destination or "", self.ack_mode)
        log.info("[Forwarder] %s subscribed to %s (%s)", self.config.name, self.endpoint.destination,
                 self.ack_mode.value)

    def close(self) -> None:
        if self.session is not None:
            self.session.disconnect(timeout=min(self.config.receipt_timeout, 2.0))
            self.session = None

    def begin_pass(self) -> None:
        pass

    def read(self, limit: int, stop: threading.Event) -> Batch:
        assert self.session is not None
        batch = Batch()
        deadline = self._clock() + self.config.idle_timeout
        while len(batch.deliveries) < limit and not stop.is_set():
            event = self.session.poll(min(deadline, self._clock() + self.config.poll_interval))
            if event.kind is EventKind.MESSAGE and event.frame is not None:
                try:
                    message = message_from_frame(event.frame)
                except ValueError as exc:
                    delivery = Delivery(Message(), event.frame, event.frame.body)
                    if self.reject(delivery, str(exc)):
                        batch.failed += 1
                    continue
                batch.deliveries.append(Delivery(message, event.frame, event.frame.body))
                deadline = min(deadline, self._clock() + _BATCH_LINGER)
            elif event.kind is EventKind.ERROR and event.frame is not None:
                raise ServerError(event.frame)
            elif event.kind is EventKind.HEARTBEAT_TIMEOUT:
                raise ConnectionLost("broker stopped heart-beating")
            elif event.kind is EventKind.IDLE and self._clock() >= deadline:
                break
        return batch

    def commit(self, delivery: Delivery) -> None:
        if self.ack_mode is not AckMode.AUTO and self.session is not None:
            self.session.ack(delivery.token)

    def rollback(self, delivery: Delivery) -> None:
        session = self.session
        if self.ack_mode is AckMode.AUTO or session is None:
            return
        if session.version == "1.2":
            try:
                session.nack(delivery.token)
            except StompError as exc:
                log.debug("[Forwarder] nack failed: %s", exc)
        # STOMP 1.0 has no NACK; the broker requeues on disconnect

    def reject(self, delivery: Delivery, reason: str) -> bool:
        if self.poison.put(delivery.raw, reason, f"message {delivery.token.get('message-id')}"):
            self.commit(delivery)
            return True
        self.rollback(delivery)
        return False


class DirQueueSink:
    def __init__(self, endpoint: DirQueueEndpoint) -> None:
        self.queue = DirQueue(endpoint.path, endpoint.granularity)

    def open(self) -> None:
        pass

    def close(self) -> None:
        pass

    def write(self, messages: list[Message]) -> list[Written]:
        for message in messages:
            self.queue.add(serialize(message))
        return [ACCEPTED] * len(messages)


class BrokerSink:
    def __init__(self, config: ForwarderConfig, endpoint: BrokerEndpoint) -> None:
        self.config = config
        self.endpoint = endpoint
        self.session: Optional[ClientSession] = None

    def open(self) -> None:
        self.session = _connect(self.config, self.endpoint)
        log.info("[Forwarder] %s connected to %s", self.config.name, self.endpoint.uri)

    def close(self) -> None:
        if self.session is not None:
            self.session.disconnect(timeout=min(self.config.receipt_timeout, 2.0))
            self.session = None

    def _send(self, message: Message) -> Union[Optional[str], Written]:
        """SEND one message; a message that can never go on the wire comes back rejected."""
        assert self.session is not None
        destination = message.header.get("destination") or self.endpoint.destination or ""
        if not valid_destination(destination):
            return Written(rejected=f"invalid destination {destination!r}")
        headers = {k: v for k, v in message.header.items() if k != "destination"}
        try:
            return self.session.send(destination, message.body, headers, want_receipt=self.config.reliable)
        except UnsendableFrame as exc:
            return Written(rejected=str(exc))

    def write(self, messages: list[Message]) -> list[Written]:
        assert self.session is not None
        sent = [self._send(message) for message in messages]
        if not self.config.reliable:
            return [r if isinstance(r, Written) else ACCEPTED for r in sent]
        receipts = [r for r in sent if isinstance(r, str)]
        seen = self.session.wait_for_receipts(receipts, self.config.receipt_timeout)
        missing = len(receipts) - len(seen)
        if missing:
            log.warning("[Forwarder] %d of %d receipts missing after %.1fs", missing, len(receipts),
                        self.config.receipt_timeout)
        return [r if isinstance(r, Written) else ACCEPTED if r in seen else RETRY for r in sent]


def build_source(config: ForwarderConfig, poison: _PoisonQueue) -> Source:
    if isinstance(config.incoming, DirQueueEndpoint):
        return DirQueueSource(config.incoming, poison)
    return BrokerSource(config, config.incoming, poison)


def build_sink(config: ForwarderConfig) -> Sink:
    if isinstance(config.outgoing, DirQueueEndpoint):
        return DirQueueSink(config.outgoing)
    return BrokerSink(config, config.outgoing)


# -- the loop -------------------------------------------------------------------------


class Forwarder:
    def __init__(self, config: ForwarderConfig, hook: Optional[Hook] = None) -> None:
        self.config = config
        self.hook = hook or load_hook(config.hook)
        self.poison = _PoisonQueue(config.resolved_poison_path())
        self.source = build_source(config, self.poison)
        self.sink = build_sink(config)
        self.report = ForwardReport()
        self._backoff = Backoff(config.backoff_initial, config.backoff_max)
        self._open = False
        self._in_flight: list[Delivery] = []
        self._batch_size = config.window

    def _ensure_open(self) -> None:
        if not self._open:
            self.sink.open()
            try:
                self.source.open()
            except BaseException:
                self.sink.close()
                raise
            self._open = True

    def _close(self) -> None:
        for side in (self.source, self.sink):
            try:
                side.close()
            except (GridpipeError, OSError) as exc:
                log.debug("[Forwarder] close: %s", exc)
        self._open = False

    def _rollback(self, deliveries: list[Delivery]) -> None:
        for delivery in deliveries:
            try:
                self.source.rollback(delivery)
            except (GridpipeError, OSError) as exc:
                log.warning("[Forwarder] rollback failed: %s", exc)

    def _transform(self, batch: Batch) -> list[Delivery]:
        kept: list[Delivery] = []
        for delivery in batch.deliveries:
            try:
                kept.append(Delivery(self.hook(delivery.message), delivery.token, delivery.raw))
            except Exception as exc:
                log.error("[Forwarder] hook failed: %s", exc)
                if self.source.reject(delivery, f"hook failed: {exc}"):
                    batch.failed += 1
        return kept

    def _pass(self, stop: threading.Event) -> tuple[int, bool]:
        """One sweep over the source; returns ``(progress, source_was_empty)``.

        The batch size halves after a write that failed or got nothing accepted and
        doubles back towards ``window`` otherwise, so a broker that drops connections
        every N frames still sees progress.
        """
        self.source.begin_pass()
        progress = 0
        empty = True
        while not stop.is_set():
            batch = self.source.read(self._batch_size, stop)
            deliveries = self._transform(batch)
            self.report.failed += batch.failed
            progress += batch.failed
            if batch.failed or batch.deliveries:
                empty = False
            if not deliveries:
                if not batch.failed:
                    break
                continue
            self._in_flight = deliveries
            try:
                outcomes = self.sink.write([d.message for d in deliveries])
            except BaseException:
                self.report.retried += len(deliveries)
                self._rollback(deliveries)
                self._in_flight = []
                self._batch_size = max(1, self._batch_size // 2)
                raise
            for index, (delivery, outcome) in enumerate(zip(deliveries, outcomes)):
                moved = False
                try:
                    if outcome.accepted:
                        self.source.commit(delivery)
                    elif outcome.rejected is not None:
                        moved = self.source.reject(delivery, outcome.rejected)
                    else:
                        self.source.rollback(delivery)
                except BaseException:
                    # already written; whatever is left goes back to the source and may be sent twice
                    self._rollback(deliveries[index + 1:])
                    self._in_flight = []
                    raise
                if outcome.accepted:
                    self.report.forwarded += 1
                    progress += 1
                elif moved:
                    self.report.failed += 1
                    progress += 1
                else:
                    self.report.retried += 1
            self._in_flight = []
            if any(o.accepted or o.rejected is not None for o in outcomes):
                self._batch_size = min(self.config.window, self._batch_size * 2)
            else:
                self._batch_size = max(1, self._batch_size // 2)
        return progress, empty

    def run(self, stop: Optional[threading.Event] = None) -> ForwardReport:
        stop = stop or threading.Event()
        log.info("[Forwarder] %s starting (%s)", self.config.name, "loop" if self.config.loop else "drain once")
        try:
            while not stop.is_set():
                # a reconnect alone does not reset the backoff: only a finished pass or progress does
                done_before = self.report.forwarded + self.report.failed
                try:
                    self._ensure_open()
                    progress, empty = self._pass(stop)
                    self._backoff.reset()
                except (GridpipeError, OSError) as exc:
                    self._close()
                    if self.report.forwarded + self.report.failed > done_before:
                        self._backoff.reset()
                    at_cap = self._backoff.at_cap
                    delay = self._backoff.next_delay()
                    if not self.config.loop and at_cap:
                        kind = EndpointUnreachable if isinstance(exc, (StompError, OSError)) else ForwarderError
                        raise kind(f"{self.config.name}: giving up after backoff reached "
                                   f"{self.config.backoff_max:.1f}s: {exc}") from exc
                    log.warning("[Forwarder] %s: %s; retrying in %.1fs", self.config.name, exc, delay)
                    stop.wait(delay)
                    continue
                if not self.config.loop and (empty or progress == 0):
                    break
                if empty and isinstance(self.config.incoming, DirQueueEndpoint):
                    stop.wait(self.config.poll_interval)
        finally:
            self.report.in_flight_at_stop = len(self._in_flight)
            if self._in_flight:
                self._rollback(self._in_flight)
                self._in_flight = []
            self._close()
        log.info("[Forwarder] %s done: %s", self.config.name, self.report.model_dump())
        return self.report


def forward_run(config: ForwarderConfig, stop: Optional[threading.Event] = None,
                hook: Optional[Hook] = None) -> ForwardReport:
    return Forwarder(config, hook).run(stop)
