"""End-to-end run of the whole chain on temporary directories.

capture -> queue -> forwarder -> broker simulator -> forwarder -> queue -> mq2nagios -> command file

Used by ``gridpipe selftest`` and by the acceptance tests.
"""
from __future__ import annotations

import logging
import re
import time
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, Field

from ..backoff import Backoff
from ..dirq import DirQueue
from ..metric import MetricStatus
from ..stomp import TlsConfig
from .broker_sim import BrokerHandle, Fault, FaultPlan, broker_serve
from .forwarder import BrokerEndpoint, DirQueueEndpoint, ForwardReport, ForwarderConfig, forward_run
from .nagios_bridge import capture, mq2nagios_run

log = logging.getLogger(__name__)

DESTINATION = "/queue/gridpipe.selftest"
SERVICE = "org.gridpipe.Selftest"
HOST = "selftest.localdomain"
_TAG_RE = re.compile(r"\btag-(\d{6})\b")


class PipelineReport(BaseModel):
    sent: int = 0
    lines: int = 0
    unique: int = 0
    duplicates: int = 0
    missing: list[str] = Field(default_factory=list)
    in_order: bool = True
    outgoing: ForwardReport = Field(default_factory=ForwardReport)
    incoming: ForwardReport = Field(default_factory=ForwardReport)

    @property
    def ok(self) -> bool:
        return not self.missing and self.unique == self.sent


def tag(index: int) -> str:
    return f"tag-{index:06d}"


def check_env(index: int, now: Optional[int] = None) -> dict[str, str]:
    status = list(MetricStatus)[index % len(MetricStatus)]
    return {
        "NAGIOS_HOSTNAME": HOST,
        "NAGIOS_SERVICEDESC": SERVICE,
        "NAGIOS_SERVICESTATE": status.name,
        "NAGIOS_TIMET": str(now if now is not None else int(time.time())),
        "NAGIOS_SERVICEOUTPUT": f"selftest {tag(index)}",
        "NAGIOS_LONGSERVICEOUTPUT": f"check {index}\nsecond line",
    }


def _merge(total: ForwardReport, part: ForwardReport) -> ForwardReport:
    return ForwardReport(
        forwarded=total.forwarded + part.forwarded,
        retried=total.retried + part.retried,
        failed=total.failed + part.failed,
        in_flight_at_stop=part.in_flight_at_stop,
    )


def _queue_settled(path: Path) -> bool:
    queue = DirQueue(path)
    return queue.count() == 0 and queue.locked_count() == 0


def _broker_settled(broker: BrokerHandle) -> bool:
    stats = broker.stats().get(DESTINATION)
    return stats is None or (stats.stored == 0 and stats.pending == 0)


def run_pipeline(workdir: Path, count: int, *, client_tls: Optional[TlsConfig] = None,
                 server_tls: Optional[TlsConfig] = None, faults: Sequence[Fault] = (),
                 receipt_timeout: float = 1.0, idle_timeout: float = 1.0, max_rounds: int = 20) -> PipelineReport:
    """Push ``count`` tagged checks through every stage and audit the command file."""
    workdir = Path(workdir)
    outgoing = workdir / "outgoing"
    incoming = workdir / "incoming"
    command_file = workdir / "nagios.cmd"
    command_file.touch()
    report = PipelineReport(sent=count)

    now = int(time.time())
    for index in range(count):
        capture(check_env(index, now), outgoing)

    with broker_serve(tls=server_tls, faults=FaultPlan(faults=list(faults))) as broker:
        common = dict(reliable=True, tls=client_tls, backoff_initial=0.05, backoff_max=1.0,
                      receipt_timeout=receipt_timeout, idle_timeout=idle_timeout)
        send = ForwarderConfig(
            name="selftest-send",
            incoming=DirQueueEndpoint(path=outgoing),
            outgoing=BrokerEndpoint(uri=broker.uri(DESTINATION)),
            **common,
        )
        receive = ForwarderConfig(
            name="selftest-receive",
            incoming=BrokerEndpoint(uri=broker.uri(DESTINATION)),
            outgoing=DirQueueEndpoint(path=incoming),
            **common,
        )
        for _ in range(max_rounds):
            report.outgoing = _merge(report.outgoing, forward_run(send))
            if _queue_settled(outgoing):
                break
        for _ in range(max_rounds):
            report.incoming = _merge(report.incoming, forward_run(receive))
            if _broker_settled(broker):
                break

    mq2nagios_run(incoming, command_file, once=True, backoff=Backoff(0.05, 0.5))

    lines = command_file.read_text(encoding="utf-8").splitlines()
    seen: list[int] = []
    for line in lines:
        match = _TAG_RE.search(line)
        if match:
            seen.append(int(match.group(1)))
    counts = Counter(seen)
    report.lines = len(lines)
    report.unique = len(counts)
    report.duplicates = sum(n - 1 for n in counts.values())
    report.missing = [tag(i) for i in range(count) if i not in counts]
    report.in_order = seen == sorted(seen)
    log.info("[Selftest] %d sent, %d lines, %d unique, %d duplicates, %d missing",
             report.sent, report.lines, report.unique, report.duplicates, len(report.missing))
    return report
