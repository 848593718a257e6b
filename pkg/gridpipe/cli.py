"""``gridpipe`` command line: one entry point for every pipeline component."""
from __future__ import annotations

import json
import logging
import os
import signal
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import click
from pydantic import ValidationError

from . import __version__, settings
from .config import config_load
from .dirq import DEFAULT_MAX_LOCK_AGE, DEFAULT_MAX_TMP_AGE, DirQueue
from .errors import ConfigError, GridpipeError
from .stomp import TlsConfig

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


@dataclass
class _State:
    env: Mapping[str, str] = field(default_factory=lambda: os.environ)
    stats_json: bool = False

    def emit_stats(self, stats: Mapping[str, Any]) -> None:
        if self.stats_json:
            click.echo(json.dumps(dict(stats), separators=(",", ":"), sort_keys=False))


def _stop_event() -> threading.Event:
    """Event set by SIGINT/SIGTERM (when running on the main thread)."""
    stop = threading.Event()

    def handler(signum, _frame) -> None:
        log.info("[CLI] received signal %d, stopping", signum)
        stop.set()

    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(sig, handler)
        except ValueError:
            pass
    return stop


def _heartbeat(value: Optional[str]) -> Optional[tuple[int, int]]:
    if value is None:
        return None
    try:
        x, y = (int(part) for part in value.split(","))
    except ValueError:
        raise click.BadParameter("expected 'send,receive' in milliseconds", param_hint="--heartbeat") from None
    return x, y


def _tls(ca_bundle: Optional[str], cert: Optional[str], key: Optional[str], verify: bool) -> Optional[TlsConfig]:
    if not (ca_bundle or cert or key) and verify:
        return None
    return TlsConfig(
        ca_bundle=Path(ca_bundle) if ca_bundle else None,
        cert=Path(cert) if cert else None,
        key=Path(key) if key else None,
        verify=verify,
    )


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: $GRIDPIPE_LOG_LEVEL or INFO).")
@click.option("--stats-json", is_flag=True, help="Print a machine-readable stats line on stdout when done.")
@click.option("--env-file", type=click.Path(dir_okay=False), default=None, help="Load defaults from this .env file.")
@click.version_option(__version__, prog_name="gridpipe")
@click.pass_context
def cli(ctx: click.Context, log_level: Optional[str], stats_json: bool, env_file: Optional[str]) -> None:
    """Grid monitoring message pipeline: Nagios -> directory queue -> STOMP broker -> Nagios."""
    settings.load_environment(env_file)
    settings.configure_logging(log_level)
    state = ctx.ensure_object(_State)
    state.stats_json = stats_json


@cli.command()
@click.option("--queue", "queue_path", required=True, type=click.Path(file_okay=False), help="Directory queue to add to.")
@click.option("--granularity", default=60, show_default=True, type=click.IntRange(min=1))
@click.pass_obj
def capture(state: _State, queue_path: str, granularity: int) -> None:
    """Queue the service check described by the NAGIOS_* environment."""
    from .services.nagios_bridge import capture as capture_event

    click.echo(capture_event(state.env, queue_path, granularity))


@cli.command()
@click.option("--queue", "queue_path", required=True, type=click.Path(file_okay=False))
@click.option("--pipe", "pipe_path", required=True, type=click.Path(dir_okay=False),
              help="Nagios command pipe (a regular file is accepted).")
@click.option("--once", is_flag=True, help="Drain the queue and exit instead of polling forever.")
@click.option("--poison", "poison_path", default=None, type=click.Path(file_okay=False),
              help="Queue for unparseable elements (default: QUEUE.poison).")
@click.option("--max-attempts", default=5, show_default=True, type=click.IntRange(min=1),
              help="Consecutive failed writes before --once gives up.")
@click.option("--poll-interval", default=0.5, show_default=True, type=click.FloatRange(min=0.01))
@click.pass_obj
def mq2nagios(state: _State, queue_path: str, pipe_path: str, once: bool, poison_path: Optional[str],
              max_attempts: int, poll_interval: float) -> None:
    """Write queued metrics into the Nagios command pipe as passive checks."""
    from .services.nagios_bridge import mq2nagios_run

    report = mq2nagios_run(queue_path, pipe_path, stop=_stop_event(), once=once, poison_path=poison_path,
                           max_attempts=max_attempts, poll_interval=poll_interval)
    state.emit_stats(report.model_dump())


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--name", default=None, help="Forwarder section to run when the file defines several.")
@click.option("--incoming-dirq", type=click.Path(file_okay=False), default=None)
@click.option("--incoming-broker", default=None, metavar="URI", help="stomp[+tls]://host:port/queue/NAME")
@click.option("--outgoing-dirq", type=click.Path(file_okay=False), default=None)
@click.option("--outgoing-broker", default=None, metavar="URI", help="stomp[+tls]://host:port/queue/NAME")
@click.option("--reliable/--unreliable", default=None, help="Receipts and acknowledgements (default: on).")
@click.option("--loop/--drain", "loop", default=None, help="Run forever or drain once (default: drain).")
@click.option("--ack-mode", type=click.Choice(["auto", "client", "client-individual"]), default=None)
@click.option("--heartbeat", default=None, metavar="SEND,RECV")
@click.option("--ca-bundle", type=click.Path(dir_okay=False), default=None)
@click.option("--cert", type=click.Path(dir_okay=False), default=None)
@click.option("--key", type=click.Path(dir_okay=False), default=None)
@click.option("--no-verify", is_flag=True, help="Do not verify the broker certificate.")
@click.option("--login", default=None)
@click.option("--passcode", default=None)
@click.option("--receipt-timeout", type=float, default=None)
@click.option("--idle-timeout", type=float, default=None)
@click.option("--backoff-initial", type=float, default=None)
@click.option("--backoff-max", type=float, default=None)
@click.option("--window", type=click.IntRange(min=1), default=None)
@click.option("--poison", "poison_path", type=click.Path(file_okay=False), default=None)
@click.option("--hook", default=None, metavar="MODULE:FUNCTION")
@click.pass_obj
def forward(state: _State, config_path: Optional[str], name: Optional[str], **flags: Any) -> None:
    """Move messages between a directory queue and a broker (either direction)."""
    from .services.forwarder import ForwarderConfig, forward_run

    base: dict[str, Any] = {}
    if config_path:
        base = config_load(config_path).forwarder(name).model_dump()
    data = dict(base)
    for side in ("incoming", "outgoing"):
        dirq_path, broker_uri = flags.pop(f"{side}_dirq"), flags.pop(f"{side}_broker")
        if dirq_path and broker_uri:
            raise click.UsageError(f"--{side}-dirq and --{side}-broker are mutually exclusive")
        if dirq_path:
            data[side] = {"kind": "dirq", "path": dirq_path}
        elif broker_uri:
            data[side] = {"kind": "broker", "uri": broker_uri}
        elif side not in data:
            raise click.UsageError(f"no {side} endpoint: use --config or --{side}-dirq/--{side}-broker")
    ack_mode = flags.pop("ack_mode")
    if ack_mode is not None:
        if data["incoming"].get("kind") != "broker":
            raise click.UsageError("--ack-mode only applies to a broker source")
        data["incoming"] = {**data["incoming"], "ack_mode": ack_mode}
    tls = _tls(flags.pop("ca_bundle"), flags.pop("cert"), flags.pop("key"), not flags.pop("no_verify"))
    if tls is not None:
        data["tls"] = tls
    heartbeat = _heartbeat(flags.pop("heartbeat"))
    if heartbeat is not None:
        data["heartbeat"] = heartbeat
    data.update({k: v for k, v in flags.items() if v is not None})
    try:
        config = ForwarderConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(map(str, e['loc'])) or 'forwarder'}: {e['msg']}" for e in exc.errors())
        raise ConfigError(problems, path=config_path) from exc
    report = forward_run(config, _stop_event())
    state.emit_stats(report.stats())


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False, exists=True))
@click.option("--log-dir", type=click.Path(file_okay=False), default=None, help="Overrides [supervisor] log-dir.")
@click.option("--grace", type=float, default=None, help="Seconds between SIGTERM and SIGKILL on stop.")
@click.pass_obj
def supervise(state: _State, config_path: str, log_dir: Optional[str], grace: Optional[float]) -> None:
    """Keep the [service ...] entries of a pipeline file running."""
    from .services.supervisor import supervise as run_supervisor

    config = config_load(config_path)
    if not config.services:
        raise ConfigError("no [service ...] sections", path=config_path)
    status = run_supervisor(
        config.services, _stop_event(),
        log_dir=Path(log_dir) if log_dir else config.supervisor.log_dir,
        grace=grace if grace is not None else config.supervisor.grace,
    )
    state.emit_stats({name: s.model_dump(mode="json") for name, s in status.services.items()})


@cli.command("broker-sim")
@click.option("--bind", default="127.0.0.1:61613", show_default=True, metavar="HOST:PORT")
@click.option("--tls-cert", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--tls-key", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--tls-ca", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Request (and verify) client certificates signed by this CA.")
@click.option("--fault", "faults", multiple=True, metavar="SPEC", help="drop:N, swallow[:FRACTION] or delay:MS")
@click.option("--heartbeat", default=None, metavar="SEND,RECV")
@click.option("--user", "users", multiple=True, metavar="LOGIN:PASSCODE", help="Require these credentials.")
@click.pass_obj
def broker_sim(state: _State, bind: str, tls_cert: Optional[str], tls_key: Optional[str], tls_ca: Optional[str],
               faults: Sequence[str], heartbeat: Optional[str], users: Sequence[str]) -> None:
    """Run the in-memory STOMP broker until interrupted."""
    from .services.broker_sim import BrokerError, FaultPlan, parse_fault, serve_forever

    host, sep, port = bind.rpartition(":")
    if not sep or not port.isdigit():
        raise click.BadParameter("expected HOST:PORT", param_hint="--bind")
    if bool(tls_cert) != bool(tls_key):
        raise click.UsageError("--tls-cert and --tls-key go together")
    tls = TlsConfig(cert=Path(tls_cert), key=Path(tls_key), ca_bundle=Path(tls_ca) if tls_ca else None) \
        if tls_cert else None
    credentials = {}
    for user in users:
        login, sep, passcode = user.partition(":")
        if not sep:
            raise click.BadParameter("expected LOGIN:PASSCODE", param_hint="--user")
        credentials[login] = passcode
    try:
        plan = FaultPlan(faults=[parse_fault(f) for f in faults])
    except BrokerError as exc:
        raise click.BadParameter(str(exc), param_hint="--fault") from exc
    stats = serve_forever(
        host or "127.0.0.1", int(port), _stop_event(), tls=tls, faults=plan,
        credentials=credentials or None, heartbeat=_heartbeat(heartbeat) or (0, 0),
    )
    state.emit_stats({name: s.model_dump() for name, s in stats.items()})


@cli.group()
def dirq() -> None:
    """Directory queue maintenance."""


_existing_dir = click.Path(exists=True, file_okay=False)


@dirq.command("count")
@click.argument("path", type=_existing_dir)
def dirq_count(path: str) -> None:
    """Print the number of ready elements."""
    click.echo(DirQueue(path).count())


@dirq.command("purge")
@click.argument("path", type=_existing_dir, required=False)
@click.option("--config", "config_path", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Pipeline file holding the [queue NAME] section.")
@click.option("--queue", "queue_name", default=None, metavar="NAME", help="Queue section to purge (with --config).")
@click.option("--max-tmp-age", type=click.FloatRange(min=0), default=None,
              help=f"Seconds; overrides the queue section [default: {DEFAULT_MAX_TMP_AGE:g}]")
@click.option("--max-lock-age", type=click.FloatRange(min=0), default=None,
              help=f"Seconds; overrides the queue section [default: {DEFAULT_MAX_LOCK_AGE:g}]")
@click.pass_obj
def dirq_purge(state: _State, path: Optional[str], config_path: Optional[str], queue_name: Optional[str],
               max_tmp_age: Optional[float], max_lock_age: Optional[float]) -> None:
    """Remove stale temporaries, break stale locks and prune old buckets.

    Takes a PATH, or ``--config FILE --queue NAME`` to use that section's path and purge ages.
    """
    tmp_age, lock_age = DEFAULT_MAX_TMP_AGE, DEFAULT_MAX_LOCK_AGE
    if config_path:
        if path or not queue_name:
            raise click.UsageError("--config takes --queue NAME instead of PATH")
        queue = config_load(config_path).queues.get(queue_name)
        if queue is None:
            raise ConfigError(f"no [queue {queue_name}] section", path=config_path)
        if not queue.path.is_dir():
            raise GridpipeError(f"queue directory {queue.path} does not exist")
        path, tmp_age, lock_age = str(queue.path), queue.max_tmp_age, queue.max_lock_age
    elif queue_name:
        raise click.UsageError("--queue needs --config")
    elif not path:
        raise click.UsageError("give a PATH or --config FILE --queue NAME")
    if max_tmp_age is not None:
        tmp_age = max_tmp_age
    if max_lock_age is not None:
        lock_age = max_lock_age
    removed, broken = DirQueue(path).purge(tmp_age, lock_age)
    click.echo(f"removed {removed} temporary files, broke {broken} locks")
    state.emit_stats({"tmp_removed": removed, "locks_broken": broken})


@dirq.command("inspect")
@click.argument("path", type=_existing_dir)
def dirq_inspect(path: str) -> None:
    """List every element with its state and size."""
    for info in DirQueue(path).inspect():
        click.echo(f"{info.name} {info.state.value} {info.size}")


@cli.command()
@click.option("--count", default=100, show_default=True, type=click.IntRange(min=1))
@click.option("--workdir", type=click.Path(file_okay=False), default=None, help="Keep the run's files here.")
@click.pass_obj
def selftest(state: _State, count: int, workdir: Optional[str]) -> int:
    """Run the whole pipeline on loopback and temporary directories."""
    from .services.pipeline import run_pipeline

    if workdir:
        Path(workdir).mkdir(parents=True, exist_ok=True)
        report = run_pipeline(Path(workdir), count)
    else:
        with tempfile.TemporaryDirectory(prefix="gridpipe-selftest-") as tmp:
            report = run_pipeline(Path(tmp), count)
    state.emit_stats(report.outgoing.stats())
    if report.ok:
        click.echo(f"selftest ok: {report.unique}/{report.sent}")
        return EXIT_OK
    click.echo(f"selftest failed: {report.unique}/{report.sent} delivered, {len(report.missing)} missing", err=True)
    return EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None, env: Optional[Mapping[str, str]] = None) -> int:
    """Run the CLI and return its exit code (0 success, 1 runtime failure, 2 usage/config error)."""
    state = _State(env=os.environ if env is None else env)
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="gridpipe",
                          standalone_mode=False, obj=state)
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_FAILURE
    except ConfigError as exc:
        click.echo(f"gridpipe: configuration error: {exc}", err=True)
        return EXIT_USAGE
    except GridpipeError as exc:
        click.echo(f"gridpipe: error: {exc}", err=True)
        return EXIT_FAILURE
    return result if isinstance(result, int) else EXIT_OK
