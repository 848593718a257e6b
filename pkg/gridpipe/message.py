"""Message container: header map plus body, with its canonical JSON envelope.

The envelope is what a directory-queue element holds::

    {"body":"hostName: wn01\\n","header":{"destination":"/queue/grid.metrics"},"text":true}

Keys are sorted and there is no insignificant whitespace, so the bytes are stable.
Bodies that are not valid UTF-8 travel base64-encoded with ``"encoding":"base64"``.
"""
from __future__ import annotations

import base64
import binascii
import json
from typing import Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import GridpipeError


class MessageError(GridpipeError, ValueError):
    pass


def _has_control(text: str) -> bool:
    return any(ord(ch) < 0x20 or ord(ch) == 0x7F for ch in text)


def _encodable(text: str) -> bool:
    try:
        text.encode("utf-8")
    except UnicodeEncodeError:
        return False
    return True


class Message(BaseModel):
    """Immutable unit that flows end to end through the pipeline."""

    model_config = ConfigDict(frozen=True)

    header: Dict[str, str] = Field(default_factory=dict)
    body: bytes = b""
    text: bool = True

    @field_validator("header")
    @classmethod
    def _check_header(cls, value: Dict[str, str]) -> Dict[str, str]:
        for key, item in value.items():
            if not key:
                raise ValueError("header keys must be non-empty")
            if _has_control(key):
                raise ValueError(f"header key {key!r} contains control characters")
            if not _encodable(key) or not _encodable(item):
                raise ValueError(f"header {key!r} is not encodable as UTF-8")
        return value

    @model_validator(mode="after")
    def _check_text(self) -> "Message":
        if self.text:
            try:
                self.body.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ValueError("text message body is not valid UTF-8") from exc
        return self

    @classmethod
    def from_text(cls, body: str, header: Optional[Dict[str, str]] = None) -> "Message":
        return cls(header=dict(header or {}), body=body.encode("utf-8"), text=True)

    def with_header(self, key: str, value: str) -> "Message":
        header = dict(self.header)
        header[key] = value
        return Message(header=header, body=self.body, text=self.text)


class _Envelope(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)

    header: Dict[str, str]
    body: str
    text: bool
    encoding: Optional[Literal["base64"]] = None


def serialize(message: Message) -> bytes:
    """Canonical envelope bytes for ``message`` (deterministic)."""
    envelope: dict = {"header": dict(message.header), "text": message.text}
    try:
        envelope["body"] = message.body.decode("utf-8")
    except UnicodeDecodeError:
        envelope["body"] = base64.b64encode(message.body).decode("ascii")
        envelope["encoding"] = "base64"
    return json.dumps(envelope, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def deserialize(data: bytes) -> Message:
    """Inverse of :func:`serialize`; strict about shape, liberal about key order and spacing."""
    try:
        envelope = _Envelope.model_validate_json(data)
    except ValidationError as exc:
        raise MessageError(f"invalid message envelope: {_first_error(exc)}") from exc
    if envelope.encoding == "base64":
        try:
            body = base64.b64decode(envelope.body, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise MessageError("invalid base64 body") from exc
    else:
        try:
            body = envelope.body.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise MessageError("body is not encodable as UTF-8") from exc
    try:
        return Message(header=envelope.header, body=body, text=envelope.text)
    except ValidationError as exc:
        raise MessageError(f"invalid message: {_first_error(exc)}") from exc


def _first_error(exc: ValidationError) -> str:
    errors = exc.errors()
    if not errors:
        return str(exc)
    first = errors[0]
    where = ".".join(str(part) for part in first.get("loc", ())) or "envelope"
    return f"{where}: {first.get('msg', 'invalid')}"
