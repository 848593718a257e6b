from __future__ import annotations

import datetime
import ipaddress
import os
import socket
import sys
from collections import deque
from pathlib import Path
from types import SimpleNamespace
from typing import Optional

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

from gridpipe.services.broker_sim import broker_serve
from gridpipe.stomp import Frame, FrameParser, encode

REPO_ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture
def queue_dir(tmp_path: Path) -> Path:
    return tmp_path / "queue"


@pytest.fixture
def nagios_env() -> dict[str, str]:
    return {
        "NAGIOS_HOSTNAME": "wn01.example.org",
        "NAGIOS_SERVICEDESC": "org.wlcg.CE-JobSubmit",
        "NAGIOS_SERVICESTATE": "OK",
        "NAGIOS_TIMET": "1433116800",
        "NAGIOS_SERVICEOUTPUT": "job ok",
        "NAGIOS_LONGSERVICEOUTPUT": "",
    }


@pytest.fixture
def broker():
    handle = broker_serve()
    try:
        yield handle
    finally:
        handle.stop()


@pytest.fixture
def subprocess_env() -> dict[str, str]:
    env = dict(os.environ)
    env["PYTHONPATH"] = os.pathsep.join(filter(None, [str(REPO_ROOT), env.get("PYTHONPATH")]))
    return env


@pytest.fixture
def python() -> str:
    return sys.executable


# -- TLS material --------------------------------------------------------------------


def _name(common_name: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])


def _pem_key(key: ec.EllipticCurvePrivateKey) -> bytes:
    return key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                             serialization.NoEncryption())


@pytest.fixture(scope="session")
def tls_material(tmp_path_factory) -> SimpleNamespace:
    """A throwaway CA and a server certificate for localhost / 127.0.0.1, as PEM files."""
    directory = tmp_path_factory.mktemp("tls")
    now = datetime.datetime.now(datetime.timezone.utc)
    ca_key = ec.generate_private_key(ec.SECP256R1())
    ca_cert = (
        x509.CertificateBuilder()
        .subject_name(_name("gridpipe test CA"))
        .issuer_name(_name("gridpipe test CA"))
        .public_key(ca_key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=1))
        .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
        .add_extension(x509.KeyUsage(
            digital_signature=True, content_commitment=False, key_encipherment=False,
            data_encipherment=False, key_agreement=False, key_cert_sign=True, crl_sign=True,
            encipher_only=False, decipher_only=False), critical=True)
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(ca_key.public_key()), critical=False)
        .sign(ca_key, hashes.SHA256())
    )
    server_key = ec.generate_private_key(ec.SECP256R1())
    server_cert = (
        x509.CertificateBuilder()
        .subject_name(_name("localhost"))
        .issuer_name(ca_cert.subject)
        .public_key(server_key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=1))
        .add_extension(x509.SubjectAlternativeName([
            x509.DNSName("localhost"), x509.IPAddress(ipaddress.ip_address("127.0.0.1"))]), critical=False)
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), critical=False)
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(server_key.public_key()), critical=False)
        .add_extension(x509.AuthorityKeyIdentifier.from_issuer_public_key(ca_key.public_key()), critical=False)
        .sign(ca_key, hashes.SHA256())
    )
    paths = SimpleNamespace(ca=directory / "ca.pem", cert=directory / "server.pem", key=directory / "server.key")
    paths.ca.write_bytes(ca_cert.public_bytes(serialization.Encoding.PEM))
    paths.cert.write_bytes(server_cert.public_bytes(serialization.Encoding.PEM))
    paths.key.write_bytes(_pem_key(server_key))
    return paths


# -- fake transport for session tests ---------------------------------------------------


class FakeClock:
    def __init__(self, start: float = 1000.0) -> None:
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


class FakeTransport:
    """Scripted peer: inbound chunks are queued with :meth:`feed`; a read on an empty
    inbox advances the fake clock by the socket timeout and times out."""

    def __init__(self, clock: Optional[FakeClock] = None) -> None:
        self.clock = clock
        self.inbox: deque[bytes] = deque()
        self.sent: list[bytes] = []
        self.sent_at: list[float] = []
        self.closed = False
        self.timeout: Optional[float] = None

    def feed(self, data: bytes) -> None:
        self.inbox.append(data)

    def feed_frame(self, frame: Frame, version: str = "1.2") -> None:
        self.feed(encode(frame, version))

    def sendall(self, data: bytes) -> None:
        if self.closed:
            raise OSError("transport closed")
        self.sent.append(bytes(data))
        self.sent_at.append(self.clock() if self.clock else 0.0)

    def recv(self, size: int) -> bytes:
        if self.inbox:
            return self.inbox.popleft()
        if self.closed:
            return b""
        if self.clock is not None and self.timeout:
            self.clock.advance(self.timeout)
        raise socket.timeout("timed out")

    def settimeout(self, value: Optional[float]) -> None:
        self.timeout = value

    def close(self) -> None:
        self.closed = True

    def frames(self, version: str = "1.2") -> list[Frame]:
        parser = FrameParser(version)
        parser.feed(b"".join(chunk for chunk in self.sent if chunk != b"\n"))
        frames = []
        while (frame := parser.next_frame()) is not None:
            frames.append(frame)
        return frames

    @property
    def heartbeats(self) -> list[float]:
        return [at for chunk, at in zip(self.sent, self.sent_at) if chunk == b"\n"]


def connected_frame(version: str = "1.2", heartbeat: str = "0,0") -> Frame:
    return Frame("CONNECTED", (("version", version), ("heart-beat", heartbeat), ("server", "fake/1")))


@pytest.fixture
def clock() -> FakeClock:
    return FakeClock()


@pytest.fixture
def transport(clock: FakeClock) -> FakeTransport:
    return FakeTransport(clock)
