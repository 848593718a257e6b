"""The two pipeline ends that touch Nagios.

``capture`` runs as the service-check hook and queues one event per invocation;
``mq2nagios_run`` drains a queue into the external command pipe as passive checks.
"""
from __future__ import annotations

import logging
import os
import threading
from pathlib import Path
from typing import Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from ..backoff import Backoff
from ..dirq import DEFAULT_GRANULARITY, DirQueue
from ..errors import GridpipeError
from ..message import MessageError, deserialize, serialize
from ..metric import MetricError, MetricEvent, metric_from_env, metric_from_message, metric_to_message

log = logging.getLogger(__name__)

PASSIVE_CHECK_TEMPLATE = "[%d] PROCESS_SERVICE_CHECK_RESULT;%s;%s;%s;%s\n"
# largest line written in one call; matches the FIFO atomicity limit
MAX_LINE_BYTES = 4096
POISON_SUFFIX = ".poison"

PathLike = Union[str, "os.PathLike[str]"]


class PipeWriteError(GridpipeError):
    pass


def sanitize(text: str) -> str:
    """Make ``text`` safe for one field of an external command."""
    return text.replace(";", ",").replace("\r", " ").replace("\n", " ")


class PassiveCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    timestamp: int = Field(ge=0)
    host: str
    service: str
    code: int = Field(ge=0, le=3)
    output: str

    def render(self) -> str:
        return PASSIVE_CHECK_TEMPLATE % (self.timestamp, self.host, self.service, self.code, self.output)

    def render_bytes(self, limit: int = MAX_LINE_BYTES) -> bytes:
        """Encoded line, with the output cut so the whole line fits in ``limit`` bytes."""
        line = self.render().encode("utf-8")
        if len(line) <= limit:
            return line
        output = self.output.encode("utf-8")
        keep = max(0, limit - (len(line) - len(output)))
        log.warning("[Mq2Nagios] output for %s/%s truncated from %d to %d bytes",
                    self.host, self.service, len(output), keep)
        trimmed = self.model_copy(update={"output": output[:keep].decode("utf-8", "ignore")})
        line = trimmed.render().encode("utf-8")
        if len(line) <= limit:
            return line
        # host and service alone overflow: cut the line on a character boundary
        return line[:limit - 1].decode("utf-8", "ignore").encode("utf-8") + b"\n"


def to_passive(event: MetricEvent) -> PassiveCheck:
    # details are dropped: passive check results are single-line
    return PassiveCheck(
        timestamp=event.timestamp,
        host=sanitize(event.host),
        service=sanitize(event.service),
        code=int(event.status),
        output=sanitize(event.summary),
    )


def capture(env: Mapping[str, str], queue_path: PathLike, granularity: int = DEFAULT_GRANULARITY) -> str:
    """Validate the service-check environment and queue it; returns the element name."""
    event = metric_from_env(env)
    name = DirQueue(queue_path, granularity).add(serialize(metric_to_message(event)))
    log.debug("[Capture] %s/%s queued as %s", event.host, event.service, name)
    return name


class Mq2NagiosReport(BaseModel):
    emitted: int = 0
    poison: int = 0


class _CommandPipe:
    """Append-only handle on the command pipe; a regular file works too."""

    def __init__(self, path: Path) -> None:
        self.path = path
        self._fd: Optional[int] = None

    def write_line(self, line: bytes) -> None:
        if self._fd is None:
            self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_NONBLOCK)
        written = os.write(self._fd, line)
        if written != len(line):
            raise OSError(f"short write to {self.path} ({written} of {len(line)} bytes)")

    def close(self) -> None:
        if self._fd is not None:
            try:
                os.close(self._fd)
            except OSError:
                pass
            self._fd = None


def mq2nagios_run(queue_path: PathLike, pipe: PathLike, stop: Optional[threading.Event] = None,
                  once: bool = False, poison_path: Optional[PathLike] = None, max_attempts: int = 5,
                  backoff: Optional[Backoff] = None, poll_interval: float = 0.5) -> Mq2NagiosReport:
    """Drain ``queue_path`` into ``pipe``; an element is removed only after its line was written.

    With ``once`` the call returns when the queue is empty and raises
    :class:`PipeWriteError` after ``max_attempts`` consecutive failed writes.
    """
    stop = stop or threading.Event()
    backoff = backoff or Backoff(1.0, 30.0)
    queue = DirQueue(queue_path)
    poison = DirQueue(poison_path or str(queue.root) + POISON_SUFFIX)
    command_pipe = _CommandPipe(Path(pipe))
    report = Mq2NagiosReport()
    failures = 0
    try:
        while not stop.is_set():
            names = list(queue.iterate())
            progressed = False
            for name in names:
                if stop.is_set():
                    break
                if not queue.lock(name):
                    continue
                progressed = True
                payload = queue.get(name)
                try:
                    event = metric_from_message(deserialize(payload), lenient=True)
                except (MessageError, MetricError) as exc:
                    poison_name = poison.add(payload)
                    queue.remove(name)
                    report.poison += 1
                    log.warning("[Mq2Nagios] %s moved to poison queue as %s: %s", name, poison_name, exc)
                    continue
                try:
                    command_pipe.write_line(to_passive(event).render_bytes())
                except OSError as exc:
                    queue.unlock(name)
                    command_pipe.close()
                    failures += 1
                    if once and failures >= max_attempts:
                        raise PipeWriteError(f"cannot write to {pipe} after {failures} attempts: {exc}") from exc
                    delay = backoff.next_delay()
                    log.warning("[Mq2Nagios] write to %s failed (%s); retrying in %.1fs", pipe, exc, delay)
                    stop.wait(delay)
                    break
                queue.remove(name)
                report.emitted += 1
                failures = 0
                backoff.reset()
            if not names or not progressed:
                if once:
                    break
                stop.wait(poll_interval)
    finally:
        command_pipe.close()
    log.info("[Mq2Nagios] emitted %d, poison %d", report.emitted, report.poison)
    return report
