"""Monitoring events: validation of the Nagios environment and the metric text block.

Body grammar carried inside a :class:`~gridpipe.message.Message`::

    hostName: wn01.example.org
    metricName: org.wlcg.CE-JobSubmit
    metricStatus: OK
    timestamp: 1433116800
    summaryData: job ok
    detailsData: first details line
    second details line
    EOT
"""
from __future__ import annotations

import logging
from enum import IntEnum
from typing import Mapping

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import GridpipeError
from .message import Message

log = logging.getLogger(__name__)

EOT = "EOT"
DETAILS_KEY = "detailsData"
BLOCK_KEYS = ("hostName", "metricName", "metricStatus", "timestamp", "summaryData")

ENV_HOST = "NAGIOS_HOSTNAME"
ENV_SERVICE = "NAGIOS_SERVICEDESC"
ENV_STATE = "NAGIOS_SERVICESTATE"
ENV_TIME = "NAGIOS_TIMET"
ENV_OUTPUT = "NAGIOS_SERVICEOUTPUT"
ENV_LONG_OUTPUT = "NAGIOS_LONGSERVICEOUTPUT"
REQUIRED_ENV = (ENV_HOST, ENV_SERVICE, ENV_STATE, ENV_TIME, ENV_OUTPUT)


class MetricError(GridpipeError, ValueError):
    pass


class MetricStatus(IntEnum):
    OK = 0
    WARNING = 1
    CRITICAL = 2
    UNKNOWN = 3

    @classmethod
    def parse(cls, value: str) -> "MetricStatus":
        """Case-insensitive name (``"critical"``) or numeric code (``"2"``)."""
        text = (value or "").strip().upper()
        if text in cls.__members__:
            return cls[text]
        if text.isdigit() and int(text) in {m.value for m in cls}:
            return cls(int(text))
        raise MetricError(f"unrecognized service state {value!r}")


class MetricEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    host: str = Field(min_length=1)
    service: str = Field(min_length=1)
    status: MetricStatus
    timestamp: int = Field(ge=0)
    summary: str = ""
    details: str = ""

    @field_validator("host")
    @classmethod
    def _single_line_host(cls, value: str) -> str:
        if "\n" in value or "\r" in value:
            raise ValueError("host must be a single line")
        return value

    @field_validator("service")
    @classmethod
    def _plain_service(cls, value: str) -> str:
        if ";" in value or "\n" in value or "\r" in value:
            raise ValueError("service must not contain ';' or line breaks")
        return value

    @field_validator("summary")
    @classmethod
    def _single_line_summary(cls, value: str) -> str:
        if "\n" in value:
            raise ValueError("summary must be a single line")
        return value


def _build_event(**fields) -> MetricEvent:
    try:
        return MetricEvent(**fields)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or "event"
        raise MetricError(f"invalid metric event ({where}): {first.get('msg')}") from exc


def metric_from_env(env: Mapping[str, str]) -> MetricEvent:
    """Validate the service-check environment handed over by Nagios."""
    for name in REQUIRED_ENV:
        if name not in env:
            raise MetricError(f"missing environment variable {name}")
    raw_time = env[ENV_TIME].strip()
    try:
        timestamp = int(raw_time)
    except ValueError as exc:
        raise MetricError(f"{ENV_TIME} is not an integer: {raw_time!r}") from exc
    status = MetricStatus.parse(env[ENV_STATE])
    return _build_event(
        host=env[ENV_HOST],
        service=env[ENV_SERVICE],
        status=status,
        timestamp=timestamp,
        summary=env[ENV_OUTPUT],
        details=env.get(ENV_LONG_OUTPUT, ""),
    )


def render_block(event: MetricEvent) -> str:
    lines = [
        f"hostName: {event.host}",
        f"metricName: {event.service}",
        f"metricStatus: {event.status.name}",
        f"timestamp: {event.timestamp}",
        f"summaryData: {event.summary}",
        f"{DETAILS_KEY}: {event.details}",
        EOT,
    ]
    return "\n".join(lines) + "\n"


def metric_to_message(event: MetricEvent) -> Message:
    if any(line == EOT for line in event.details.split("\n")):
        log.warning("[Metric] details of %s/%s contain a bare EOT line; the block will be cut there",
                    event.host, event.service)
    return Message.from_text(render_block(event), header={"destination-hint": event.service})


def parse_block(text: str, lenient: bool = False) -> MetricEvent:
    """Parse a metric block; ``lenient`` maps unknown states to UNKNOWN instead of failing."""
    marker = f"\n{DETAILS_KEY}:"
    if text.startswith(f"{DETAILS_KEY}:"):
        head, rest = "", text[len(DETAILS_KEY) + 1:]
    else:
        index = text.find(marker)
        if index < 0:
            raise MetricError(f"missing key {DETAILS_KEY}")
        head, rest = text[:index], text[index + len(marker):]
    if rest.startswith(" "):
        rest = rest[1:]

    end = rest.find(f"\n{EOT}\n")
    if end < 0 and rest.endswith(f"\n{EOT}"):
        end = len(rest) - len(EOT) - 1
    if end < 0:
        raise MetricError("missing EOT terminator")
    details = rest[:end]

    fields: dict[str, str] = {}
    for line in head.split("\n"):
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise MetricError(f"malformed line {line!r}")
        fields.setdefault(key, value[1:] if value.startswith(" ") else value)
    for key in BLOCK_KEYS:
        if key not in fields:
            raise MetricError(f"missing key {key}")

    try:
        status = MetricStatus.parse(fields["metricStatus"])
    except MetricError:
        if not lenient:
            raise
        log.warning("[Metric] unknown status %r for %s/%s, using UNKNOWN",
                    fields["metricStatus"], fields["hostName"], fields["metricName"])
        status = MetricStatus.UNKNOWN
    try:
        timestamp = int(fields["timestamp"])
    except ValueError as exc:
        raise MetricError(f"bad timestamp {fields['timestamp']!r}") from exc
    return _build_event(
        host=fields["hostName"],
        service=fields["metricName"],
        status=status,
        timestamp=timestamp,
        summary=fields["summaryData"],
        details=details,
    )


def metric_from_message(message: Message, lenient: bool = False) -> MetricEvent:
    try:
        text = message.body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MetricError("metric body is not UTF-8 text") from exc
    return parse_block(text, lenient=lenient)
