"""Keeps long-running services (typically forwarders) alive.

One supervision loop owns every child. A child that exits is restarted after a
backoff delay; too many restarts inside the rolling window mark it failed.
"""
from __future__ import annotations

import logging
import os
import signal
import subprocess
import threading
import time
from collections import deque
from enum import Enum
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .. import settings
from ..backoff import Backoff
from ..errors import ConfigError

log = logging.getLogger(__name__)

SPAWN_FAILED = 127


class ServiceSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field(min_length=1)
    command: list[str] = Field(min_length=1)
    expected: Literal["running", "stopped"] = "running"
    backoff_initial: float = Field(default=1.0, gt=0)
    backoff_multiplier: float = Field(default=2.0, ge=1.0)
    backoff_max: float = Field(default=60.0, gt=0)
    max_restarts: int = Field(default=10, ge=0)
    window: float = Field(default=300.0, gt=0)

    @field_validator("name")
    @classmethod
    def _plain_name(cls, value: str) -> str:
        if any(ch.isspace() for ch in value) or "/" in value:
            raise ValueError("service names cannot contain whitespace or '/'")
        return value

    @model_validator(mode="after")
    def _backoff_order(self) -> "ServiceSpec":
        if self.backoff_initial > self.backoff_max:
            raise ValueError("backoff_initial exceeds backoff_max")
        return self


class ServiceState(str, Enum):
    STARTING = "starting"
    UP = "up"
    BACKING_OFF = "backing-off"
    FAILED = "failed"
    STOPPED = "stopped"


class ServiceStatus(BaseModel):
    name: str
    state: ServiceState
    pid: Optional[int] = None
    restarts: int = 0
    last_exit: Optional[int] = None


class SupervisorStatus(BaseModel):
    services: dict[str, ServiceStatus] = Field(default_factory=dict)

    def __getitem__(self, name: str) -> ServiceStatus:
        return self.services[name]


class _Service:
    def __init__(self, spec: ServiceSpec) -> None:
        self.spec = spec
        self.backoff = Backoff(spec.backoff_initial, spec.backoff_max, spec.backoff_multiplier)
        self.state = ServiceState.STOPPED
        self.process: Optional[subprocess.Popen] = None
        self.started_at = 0.0
        self.next_start = 0.0
        self.restarts = 0
        self.last_exit: Optional[int] = None
        self.recent_restarts: deque[float] = deque()

    def snapshot(self) -> ServiceStatus:
        return ServiceStatus(
            name=self.spec.name,
            state=self.state,
            pid=self.process.pid if self.process is not None else None,
            restarts=self.restarts,
            last_exit=self.last_exit,
        )


class Supervisor:
    def __init__(self, specs: Sequence[ServiceSpec], log_dir: Optional[Path] = None,
                 grace: Optional[float] = None, tick: float = 0.1,
                 clock: Callable[[], float] = time.monotonic) -> None:
        names = [spec.name for spec in specs]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ConfigError(f"duplicate service names: {', '.join(duplicates)}")
        self.log_dir = Path(log_dir) if log_dir is not None else Path("logs")
        self.grace = settings.stop_grace() if grace is None else grace
        self.tick_interval = tick
        self._clock = clock
        self._lock = threading.Lock()
        self._services = {spec.name: _Service(spec) for spec in specs}

    # process control

    def _spawn(self, service: _Service, now: float) -> None:
        spec = service.spec
        self.log_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.log_dir / f"{spec.name}.log"
        try:
            with open(log_path, "ab") as out:
                service.process = subprocess.Popen(
                    spec.command, stdin=subprocess.DEVNULL, stdout=out, stderr=subprocess.STDOUT,
                    start_new_session=True,
                )
        except OSError as exc:
            log.error("[Supervisor] %s: cannot start %s: %s", spec.name, spec.command[0], exc)
            service.process = None
            self._on_exit(service, SPAWN_FAILED, now)
            return
        service.started_at = now
        service.state = ServiceState.STARTING
        log.info("[Supervisor] %s started (pid %d)", spec.name, service.process.pid)

    def _on_exit(self, service: _Service, code: int, now: float) -> None:
        spec = service.spec
        service.last_exit = code
        service.process = None
        if now - service.started_at >= spec.backoff_max:
            service.backoff.reset()
        while service.recent_restarts and now - service.recent_restarts[0] > spec.window:
            service.recent_restarts.popleft()
        if spec.max_restarts and len(service.recent_restarts) >= spec.max_restarts:
            service.state = ServiceState.FAILED
            log.error("[Supervisor] %s exited with %d; %d restarts within %.0fs, giving up",
                      spec.name, code, len(service.recent_restarts), spec.window)
            return
        delay = service.backoff.next_delay()
        service.next_start = now + delay
        service.state = ServiceState.BACKING_OFF
        log.warning("[Supervisor] %s exited with %d; restarting in %.1fs", spec.name, code, delay)

    def _restart(self, service: _Service, now: float) -> None:
        service.restarts += 1
        service.recent_restarts.append(now)
        self._spawn(service, now)

    def start(self) -> None:
        now = self._clock()
        with self._lock:
            for service in self._services.values():
                if service.spec.expected == "running" and service.process is None \
                        and service.state is ServiceState.STOPPED:
                    self._spawn(service, now)

    def tick(self) -> None:
        now = self._clock()
        with self._lock:
            for service in self._services.values():
                if service.process is not None:
                    code = service.process.poll()
                    if code is None:
                        if service.state is ServiceState.STARTING:
                            service.state = ServiceState.UP
                        continue
                    self._on_exit(service, code, now)
                elif service.state is ServiceState.BACKING_OFF and now >= service.next_start:
                    self._restart(service, now)

    @staticmethod
    def _signal(process: subprocess.Popen, sig: int) -> None:
        try:
            os.killpg(process.pid, sig)
        except (ProcessLookupError, PermissionError):
            pass

    def shutdown(self) -> None:
        """Terminate every child's process group, escalating to SIGKILL after the grace period."""
        with self._lock:
            running = [s for s in self._services.values() if s.process is not None]
            for service in running:
                log.info("[Supervisor] stopping %s (pid %d)", service.spec.name, service.process.pid)
                self._signal(service.process, signal.SIGTERM)
            deadline = time.monotonic() + self.grace
            for service in running:
                process = service.process
                try:
                    code = process.wait(timeout=max(0.0, deadline - time.monotonic()))
                except subprocess.TimeoutExpired:
                    log.warning("[Supervisor] %s ignored SIGTERM, killing", service.spec.name)
                    self._signal(process, signal.SIGKILL)
                    code = process.wait()
                service.last_exit = code
                service.process = None
            for service in self._services.values():
                if service.state is not ServiceState.FAILED:
                    service.state = ServiceState.STOPPED

    def status(self) -> SupervisorStatus:
        with self._lock:
            return SupervisorStatus(services={name: s.snapshot() for name, s in self._services.items()})

    def run(self, stop: threading.Event) -> SupervisorStatus:
        log.info("[Supervisor] supervising %d services", len(self._services))
        self.start()
        try:
            while not stop.wait(self.tick_interval):
                self.tick()
        finally:
            self.shutdown()
        return self.status()


def supervise(specs: Sequence[ServiceSpec], stop: threading.Event, log_dir: Optional[Path] = None,
              grace: Optional[float] = None) -> SupervisorStatus:
    return Supervisor(specs, log_dir, grace).run(stop)
