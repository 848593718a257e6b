import signal
import sys
import threading
import time

import pytest
from pydantic import ValidationError

from gridpipe.errors import ConfigError
from gridpipe.services.supervisor import SPAWN_FAILED, ServiceSpec, ServiceState, Supervisor, supervise

CRASH = [sys.executable, "-c", "import sys; sys.exit(3)"]
SLEEP = [sys.executable, "-c", "import time; time.sleep(60)"]
STUBBORN = [sys.executable, "-c",
            "import signal, time\n"
            "signal.signal(signal.SIGTERM, signal.SIG_IGN)\n"
            "print('ready', flush=True)\n"
            "time.sleep(60)"]


def spec(name, command, **overrides) -> ServiceSpec:
    fields = dict(name=name, command=command, backoff_initial=0.01, backoff_max=0.05, window=60)
    fields.update(overrides)
    return ServiceSpec(**fields)


def drive(supervisor, until, timeout=15.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        supervisor.tick()
        if until(supervisor.status()):
            return
        time.sleep(0.01)
    raise AssertionError(f"condition not reached: {supervisor.status()}")


def wait_for(predicate, timeout=15.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return
        time.sleep(0.02)
    raise AssertionError("condition not reached")


def test_crashing_service_fails_after_max_restarts(tmp_path):
    supervisor = Supervisor([spec("crasher", CRASH, max_restarts=3)], log_dir=tmp_path, grace=1)
    supervisor.start()
    try:
        drive(supervisor, lambda status: status["crasher"].state is ServiceState.FAILED)
        status = supervisor.status()["crasher"]
        assert status.restarts == 3
        assert status.last_exit == 3
        assert status.pid is None
        for _ in range(20):
            supervisor.tick()
        assert supervisor.status()["crasher"].restarts == 3
    finally:
        supervisor.shutdown()


def test_failure_is_isolated(tmp_path):
    supervisor = Supervisor([spec("crasher", CRASH, max_restarts=2), spec("sleeper", SLEEP)],
                            log_dir=tmp_path, grace=5)
    supervisor.start()
    try:
        pid = supervisor.status()["sleeper"].pid
        drive(supervisor, lambda status: status["crasher"].state is ServiceState.FAILED)
        sleeper = supervisor.status()["sleeper"]
        assert sleeper.state is ServiceState.UP
        assert (sleeper.pid, sleeper.restarts) == (pid, 0)
    finally:
        supervisor.shutdown()
    assert supervisor.status()["sleeper"].state is ServiceState.STOPPED
    assert supervisor.status()["crasher"].state is ServiceState.FAILED


def test_graceful_stop(tmp_path):
    stop = threading.Event()
    result = {}
    worker = threading.Thread(target=lambda: result.update(
        status=supervise([spec("sleeper", SLEEP)], stop, log_dir=tmp_path, grace=5)))
    worker.start()
    time.sleep(0.5)
    stop.set()
    worker.join(timeout=15)
    assert not worker.is_alive()
    status = result["status"]["sleeper"]
    assert status.state is ServiceState.STOPPED
    assert status.last_exit == -signal.SIGTERM
    assert status.restarts == 0


def test_sigterm_ignored_escalates_to_kill(tmp_path):
    supervisor = Supervisor([spec("stubborn", STUBBORN)], log_dir=tmp_path, grace=0.5)
    supervisor.start()
    log_file = tmp_path / "stubborn.log"
    wait_for(lambda: log_file.exists() and "ready" in log_file.read_text())
    supervisor.shutdown()
    status = supervisor.status()["stubborn"]
    assert status.last_exit == -signal.SIGKILL
    assert status.state is ServiceState.STOPPED


def test_output_goes_to_log_file(tmp_path):
    command = [sys.executable, "-c", "import sys, time; print('hello from child'); sys.stdout.flush(); time.sleep(60)"]
    supervisor = Supervisor([spec("talker", command)], log_dir=tmp_path / "logs", grace=5)
    supervisor.start()
    try:
        log_file = tmp_path / "logs" / "talker.log"
        wait_for(lambda: log_file.exists() and "hello from child" in log_file.read_text())
    finally:
        supervisor.shutdown()


def test_expected_stopped_is_not_started(tmp_path):
    supervisor = Supervisor([spec("idle", SLEEP, expected="stopped")], log_dir=tmp_path)
    supervisor.start()
    supervisor.tick()
    status = supervisor.status()["idle"]
    assert (status.state, status.pid) == (ServiceState.STOPPED, None)


def test_spawn_failure_counts_as_exit(tmp_path):
    supervisor = Supervisor([spec("ghost", [str(tmp_path / "no-such-binary")], max_restarts=1)], log_dir=tmp_path)
    supervisor.start()
    assert supervisor.status()["ghost"].last_exit == SPAWN_FAILED
    drive(supervisor, lambda status: status["ghost"].state is ServiceState.FAILED)
    assert supervisor.status()["ghost"].restarts == 1


def test_duplicate_names_rejected():
    with pytest.raises(ConfigError):
        Supervisor([spec("twin", SLEEP), spec("twin", CRASH)])


@pytest.mark.parametrize("overrides", [
    {"name": ""},
    {"name": "has space"},
    {"name": "a/b"},
    {"command": []},
    {"backoff_initial": 10, "backoff_max": 1},
    {"max_restarts": -1},
    {"expected": "maybe"},
])
def test_service_spec_validation(overrides):
    fields = {"name": "svc", "command": SLEEP, **overrides}
    with pytest.raises(ValidationError):
        spec(**fields)
