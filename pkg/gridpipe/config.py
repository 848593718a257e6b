"""Pipeline configuration file: strict INI parsed into pydantic models.

Example::

    [supervisor]
    log-dir = /var/log/gridpipe
    grace = 10

    [broker central]
    uri = stomp+tls://mq.example.org:61612
    ca-bundle = /etc/grid-security/ca.pem
    heartbeat = 5000,5000

    [queue outgoing]
    path = /var/spool/gridpipe/outgoing

    [forwarder send]
    incoming = queue:outgoing
    outgoing = broker:central
    destination = /queue/grid.metrics

    [service send]
    command = gridpipe forward --config /etc/gridpipe.ini --name send

Every error carries the file, line, section and key it refers to.
"""
from __future__ import annotations

import configparser
import re
import shlex
from pathlib import Path
from typing import Any, Optional, Union

from pydantic import BaseModel, Field, ValidationError

from .dirq import DEFAULT_GRANULARITY, DEFAULT_MAX_LOCK_AGE, DEFAULT_MAX_TMP_AGE
from .errors import ConfigError
from .services.forwarder import BrokerEndpoint, DirQueueEndpoint, ForwarderConfig
from .services.supervisor import ServiceSpec
from .stomp import TlsConfig

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^([^\s#;=:][^=:]*?)\s*[=:]")

BROKER_KEYS = {"uri", "ca-bundle", "cert", "key", "verify", "login", "passcode", "vhost", "heartbeat"}
QUEUE_KEYS = {"path", "granularity", "max-tmp-age", "max-lock-age"}
FORWARDER_KEYS = {
    "incoming", "outgoing", "destination", "incoming-destination", "outgoing-destination", "ack-mode",
    "reliable", "loop", "heartbeat", "backoff-initial", "backoff-max", "receipt-timeout", "idle-timeout",
    "poll-interval", "window", "poison", "hook",
}
SERVICE_KEYS = {"command", "expected", "backoff-initial", "backoff-max", "backoff-multiplier",
                "max-restarts", "window"}
SUPERVISOR_KEYS = {"log-dir", "grace"}


class BrokerSettings(BaseModel):
    uri: str
    tls: Optional[TlsConfig] = None
    login: Optional[str] = None
    passcode: Optional[str] = None
    vhost: Optional[str] = None
    heartbeat: tuple[int, int] = (0, 0)


class QueueSettings(BaseModel):
    path: Path
    granularity: int = Field(default=DEFAULT_GRANULARITY, gt=0)
    max_tmp_age: float = Field(default=DEFAULT_MAX_TMP_AGE, ge=0)
    max_lock_age: float = Field(default=DEFAULT_MAX_LOCK_AGE, ge=0)


class SupervisorSettings(BaseModel):
    log_dir: Path = Path("logs")
    grace: Optional[float] = Field(default=None, ge=0)


class PipelineConfig(BaseModel):
    path: Optional[Path] = None
    brokers: dict[str, BrokerSettings] = Field(default_factory=dict)
    queues: dict[str, QueueSettings] = Field(default_factory=dict)
    forwarders: dict[str, ForwarderConfig] = Field(default_factory=dict)
    services: list[ServiceSpec] = Field(default_factory=list)
    supervisor: SupervisorSettings = Field(default_factory=SupervisorSettings)

    def forwarder(self, name: Optional[str] = None) -> ForwarderConfig:
        if name is None:
            if len(self.forwarders) != 1:
                raise ConfigError(f"{len(self.forwarders)} forwarders defined; pick one with --name",
                                  path=str(self.path) if self.path else None)
            return next(iter(self.forwarders.values()))
        try:
            return self.forwarders[name]
        except KeyError:
            raise ConfigError(f"no [forwarder {name}] section", path=str(self.path) if self.path else None) from None


class _Locator:
    """Line numbers of section headers and keys, which configparser does not keep."""

    def __init__(self, text: str) -> None:
        self.sections: dict[str, int] = {}
        self.keys: dict[tuple[str, str], int] = {}
        current = None
        for number, line in enumerate(text.splitlines(), start=1):
            match = _SECTION_RE.match(line)
            if match:
                current = match.group(1).strip()
                self.sections.setdefault(current, number)
                continue
            if current is None or line[:1].isspace():
                continue
            match = _KEY_RE.match(line)
            if match:
                self.keys.setdefault((current, match.group(1).strip().lower()), number)

    def line(self, section: Optional[str], key: Optional[str] = None) -> Optional[int]:
        if section is None:
            return None
        if key is not None and (section, key) in self.keys:
            return self.keys[(section, key)]
        return self.sections.get(section)


class _Reader:
    def __init__(self, path: Path, parser: configparser.ConfigParser, locator: _Locator) -> None:
        self.path = path
        self.parser = parser
        self.locator = locator

    def error(self, message: str, section: Optional[str] = None, key: Optional[str] = None) -> ConfigError:
        return ConfigError(message, path=str(self.path), line=self.locator.line(section, key),
                           section=section, key=key)

    def check_keys(self, section: str, allowed: set[str]) -> dict[str, str]:
        values = dict(self.parser.items(section))
        for key in values:
            if key not in allowed:
                raise self.error(f"unknown key (expected one of {', '.join(sorted(allowed))})", section, key)
        return values

    def require(self, section: str, values: dict[str, str], key: str) -> str:
        value = values.get(key, "").strip()
        if not value:
            raise self.error("missing required key", section, key)
        return value

    def boolean(self, section: str, values: dict[str, str], key: str, default: bool) -> bool:
        if key not in values:
            return default
        state = configparser.ConfigParser.BOOLEAN_STATES.get(values[key].strip().lower())
        if state is None:
            raise self.error(f"not a boolean: {values[key]!r}", section, key)
        return state

    def path_value(self, value: str) -> Path:
        candidate = Path(value).expanduser()
        return candidate if candidate.is_absolute() else (self.path.parent / candidate)

    def heartbeat(self, section: str, values: dict[str, str], key: str = "heartbeat") -> Optional[tuple[int, int]]:
        if key not in values:
            return None
        try:
            x, y = (int(part.strip()) for part in values[key].split(","))
        except ValueError:
            raise self.error(f"expected two integers 'send,receive' in ms, got {values[key]!r}", section, key) from None
        return x, y

    def build(self, model: type[BaseModel], data: dict[str, Any], section: str,
              keys: Optional[dict[str, str]] = None) -> Any:
        """Instantiate ``model``; validation errors point at the INI key they came from."""
        try:
            return model.model_validate(data)
        except ValidationError as exc:
            first = exc.errors()[0]
            field = str(first.get("loc", ("",))[0]) if first.get("loc") else ""
            key = (keys or {}).get(field, field.replace("_", "-") or None)
            raise self.error(first.get("msg", "invalid value"), section,
                             key if key and key in self.parser[section] else None) from exc


def _split_section(title: str) -> tuple[str, Optional[str]]:
    kind, _, name = title.partition(" ")
    return kind.strip().lower(), name.strip() or None


def config_load(path: Union[str, Path]) -> PipelineConfig:
    """Parse and validate a pipeline file; unknown sections, keys and references are errors."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror or exc}", path=str(path)) from exc
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="__none__")
    try:
        parser.read_string(text, source=str(path))
    except configparser.DuplicateSectionError as exc:
        raise ConfigError("duplicate section", path=str(path), line=exc.lineno, section=exc.section) from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", path=str(path), line=exc.lineno, section=exc.section,
                          key=exc.option) from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any section", path=str(path), line=exc.lineno) from exc
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("cannot parse line", path=str(path), line=line) from exc

    reader = _Reader(path, parser, _Locator(text))
    raw: dict[str, dict[str, str]] = {kind: {} for kind in ("broker", "queue", "forwarder", "service")}
    config = PipelineConfig(path=path)
    for title in parser.sections():
        kind, name = _split_section(title)
        if kind == "supervisor":
            values = reader.check_keys(title, SUPERVISOR_KEYS)
            data: dict[str, Any] = {}
            if "log-dir" in values:
                data["log_dir"] = reader.path_value(values["log-dir"])
            if "grace" in values:
                data["grace"] = values["grace"]
            config.supervisor = reader.build(SupervisorSettings, data, title)
            continue
        if kind not in raw:
            raise reader.error(f"unknown section type {kind!r}", title)
        if name is None:
            raise reader.error(f"[{kind}] sections need a name, e.g. [{kind} main]", title)
        raw[kind][name] = title

    for name, title in raw["broker"].items():
        values = reader.check_keys(title, BROKER_KEYS)
        uri = reader.require(title, values, "uri")
        tls = None
        if uri.lower().startswith(("stomp+ssl", "stomp+tls", "ssl", "tls")) or \
                any(k in values for k in ("ca-bundle", "cert", "key")):
            tls = TlsConfig(
                ca_bundle=reader.path_value(values["ca-bundle"]) if "ca-bundle" in values else None,
                cert=reader.path_value(values["cert"]) if "cert" in values else None,
                key=reader.path_value(values["key"]) if "key" in values else None,
                verify=reader.boolean(title, values, "verify", True),
            )
        data = {"uri": uri, "tls": tls, "login": values.get("login"), "passcode": values.get("passcode"),
                "vhost": values.get("vhost")}
        heartbeat = reader.heartbeat(title, values)
        if heartbeat is not None:
            data["heartbeat"] = heartbeat
        config.brokers[name] = reader.build(BrokerSettings, data, title)

    for name, title in raw["queue"].items():
        values = reader.check_keys(title, QUEUE_KEYS)
        data = {"path": reader.path_value(reader.require(title, values, "path"))}
        for key in ("granularity", "max-tmp-age", "max-lock-age"):
            if key in values:
                data[key.replace("-", "_")] = values[key]
        config.queues[name] = reader.build(QueueSettings, data, title)

    for name, title in raw["forwarder"].items():
        config.forwarders[name] = _forwarder(reader, config, name, title)

    for name, title in raw["service"].items():
        values = reader.check_keys(title, SERVICE_KEYS)
        try:
            command = shlex.split(reader.require(title, values, "command"))
        except ValueError as exc:
            raise reader.error(f"cannot split command: {exc}", title, "command") from exc
        data = {"name": name, "command": command}
        for key in SERVICE_KEYS - {"command"}:
            if key in values:
                data[key.replace("-", "_")] = values[key]
        config.services.append(reader.build(ServiceSpec, data, title))
    return config


def _endpoint(reader: _Reader, config: PipelineConfig, title: str, values: dict[str, str], side: str) -> Any:
    reference = reader.require(title, values, side)
    kind, _, target = reference.partition(":")
    kind = kind.strip().lower()
    target = target.strip()
    if kind == "queue":
        queue = config.queues.get(target)
        if queue is None:
            raise reader.error(f"no [queue {target}] section", title, side)
        return DirQueueEndpoint(path=queue.path, granularity=queue.granularity)
    if kind == "broker":
        broker = config.brokers.get(target)
        if broker is None:
            raise reader.error(f"no [broker {target}] section", title, side)
        destination = values.get(f"{side}-destination") or values.get("destination")
        data: dict[str, Any] = {"uri": broker.uri, "destination": destination}
        if side == "incoming" and "ack-mode" in values:
            data["ack_mode"] = values["ack-mode"].strip()
        try:
            return BrokerEndpoint.model_validate(data)
        except ValidationError as exc:
            key = f"{side}-destination" if f"{side}-destination" in values else \
                "destination" if "destination" in values else side
            raise reader.error(exc.errors()[0].get("msg", "invalid endpoint"), title, key) from exc
    raise reader.error(f"expected queue:NAME or broker:NAME, got {reference!r}", title, side)


def _forwarder(reader: _Reader, config: PipelineConfig, name: str, title: str) -> ForwarderConfig:
    values = reader.check_keys(title, FORWARDER_KEYS)
    incoming = _endpoint(reader, config, title, values, "incoming")
    outgoing = _endpoint(reader, config, title, values, "outgoing")
    brokers = [config.brokers[v.split(":", 1)[1].strip()] for v in (values["incoming"], values["outgoing"])
               if v.strip().lower().startswith("broker:")]
    broker = brokers[0] if brokers else None
    data: dict[str, Any] = {
        "name": name,
        "incoming": incoming,
        "outgoing": outgoing,
        "reliable": reader.boolean(title, values, "reliable", True),
        "loop": reader.boolean(title, values, "loop", False),
    }
    if broker is not None:
        data.update(tls=broker.tls, login=broker.login, passcode=broker.passcode, vhost=broker.vhost,
                    heartbeat=broker.heartbeat)
    heartbeat = reader.heartbeat(title, values)
    if heartbeat is not None:
        data["heartbeat"] = heartbeat
    for key in ("backoff-initial", "backoff-max", "receipt-timeout", "idle-timeout", "poll-interval",
                "window", "hook"):
        if key in values:
            data[key.replace("-", "_")] = values[key]
    if "poison" in values:
        data["poison_path"] = reader.path_value(values["poison"])
    return reader.build(ForwarderConfig, data, title, keys={"poison_path": "poison"})
