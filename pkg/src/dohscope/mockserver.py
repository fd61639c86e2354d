"""Local DoH server with fault injection, for hermetic transport and campaign tests.

Each :class:`MockDohServer` listens on loopback and behaves according to a
:class:`MockBehavior`. Certificates come from a throwaway CA generated by
:func:`make_test_pki`; clients trust it via ``TransportOptions.cafile``.
"""

from __future__ import annotations

import base64
import datetime
import ipaddress
import logging
import socket
import ssl
import struct
import tempfile
import threading
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlsplit

import h2.config
import h2.connection
import h2.events
import h2.exceptions

from . import wire

log = logging.getLogger(__name__)

DNS_MESSAGE = "application/dns-message"

MODES = (
    "ok",            # valid answer echoing id and question
    "status",        # HTTP error status with empty body
    "garbage",       # 200 with a non-DNS body
    "mismatch",      # valid DNS response with the wrong message id
    "tls_hang",      # accept TCP, never answer the ClientHello
    "h2_violation",  # negotiate h2, then send a DATA frame on stream 0
    "empty_reply",   # complete TLS, then close without any HTTP response
)


@dataclass(frozen=True)
class TestPKI:
    cafile: str
    certfile: str
    keyfile: str
    wrong_certfile: str
    wrong_keyfile: str


def _write_key(key, path: Path):
    from cryptography.hazmat.primitives import serialization

    path.write_bytes(key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.TraditionalOpenSSL,
        serialization.NoEncryption(),
    ))


def make_test_pki(directory, hostnames=("localhost", "mock.test"), wrong_hostname="wrong.example") -> TestPKI:
    """Generate a CA, a leaf for ``hostnames`` (plus 127.0.0.1), and a leaf for a wrong name."""
    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import ec
    from cryptography.x509.oid import NameOID

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    now = datetime.datetime.now(datetime.timezone.utc)
    ca_key = ec.generate_private_key(ec.SECP256R1())
    ca_name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "dohscope test CA")])
    ca_cert = (
        x509.CertificateBuilder()
        .subject_name(ca_name)
        .issuer_name(ca_name)
        .public_key(ca_key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(days=1))
        .not_valid_after(now + datetime.timedelta(days=30))
        .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
        .add_extension(x509.KeyUsage(
            digital_signature=True, key_cert_sign=True, crl_sign=True, content_commitment=False,
            key_encipherment=False, data_encipherment=False, key_agreement=False,
            encipher_only=False, decipher_only=False), critical=True)
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(ca_key.public_key()), critical=False)
        .sign(ca_key, hashes.SHA256())
    )

    def leaf(names, ips):
        key = ec.generate_private_key(ec.SECP256R1())
        sans = [x509.DNSName(n) for n in names] + [x509.IPAddress(ipaddress.ip_address(i)) for i in ips]
        cert = (
            x509.CertificateBuilder()
            .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, names[0])]))
            .issuer_name(ca_name)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(days=1))
            .not_valid_after(now + datetime.timedelta(days=30))
            .add_extension(x509.SubjectAlternativeName(sans), critical=False)
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .add_extension(x509.ExtendedKeyUsage([x509.oid.ExtendedKeyUsageOID.SERVER_AUTH]), critical=False)
            .add_extension(x509.AuthorityKeyIdentifier.from_issuer_public_key(ca_key.public_key()), critical=False)
            .sign(ca_key, hashes.SHA256())
        )
        return key, cert

    paths = {name: directory / name for name in ("ca.pem", "cert.pem", "key.pem", "wrong-cert.pem", "wrong-key.pem")}
    paths["ca.pem"].write_bytes(ca_cert.public_bytes(serialization.Encoding.PEM))
    key, cert = leaf(list(hostnames), ["127.0.0.1"])
    paths["cert.pem"].write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    _write_key(key, paths["key.pem"])
    key, cert = leaf([wrong_hostname], [])
    paths["wrong-cert.pem"].write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    _write_key(key, paths["wrong-key.pem"])
    return TestPKI(*(str(paths[n]) for n in ("ca.pem", "cert.pem", "key.pem", "wrong-cert.pem", "wrong-key.pem")))


@dataclass
class MockBehavior:
    mode: str = "ok"
    status: int = 500
    delay: float = 0.0          # seconds slept before each response (latency floor)
    rcode: int = 0
    answer: str = "192.0.2.53"
    body: bytes = b"hello"      # for mode "garbage"
    content_type: str = DNS_MESSAGE
    alpn: tuple = ("h2", "http/1.1")
    tls_min: str = "1.2"
    tls_max: str = "1.3"
    wrong_cert: bool = False
    path: str = "/dns-query"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mock mode {self.mode!r}; expected one of {MODES}")


_TLS = {
    "1.0": ssl.TLSVersion.TLSv1,
    "1.1": ssl.TLSVersion.TLSv1_1,
    "1.2": ssl.TLSVersion.TLSv1_2,
    "1.3": ssl.TLSVersion.TLSv1_3,
}


def build_answer(query: bytes, rcode: int = 0, answer: Optional[str] = "192.0.2.53", id_override=None) -> bytes:
    """Turn a query into a response with one A record (name by compression pointer)."""
    if len(query) < wire.HEADER_LEN:
        raise wire.DecodeError("query too short")
    msg_id, flags, qdcount, _an, _ns, _ar = wire.HEADER.unpack_from(query)
    forced = query[:2] + bytes([query[2] | 0x80]) + query[3:]
    summary = wire.decode_response(forced)
    q = summary.question_echo
    question = wire.encode_name(q.name) + struct.pack("!HH", q.qtype, q.qclass) if q else b""
    answers = b""
    ancount = 0
    if q is not None and answer and rcode == 0 and q.qtype == wire.TYPE_A:
        answers = b"\xc0\x0c" + struct.pack("!HHIH", wire.TYPE_A, wire.CLASS_IN, 300, 4)
        answers += socket.inet_aton(answer)
        ancount = 1
    resp_flags = 0x8000 | (flags & 0x0100) | 0x0080 | (rcode & 0xF)
    resp_id = msg_id if id_override is None else id_override
    return wire.HEADER.pack(resp_id, resp_flags, 1 if q else 0, ancount, 0, 0) + question + answers


class MockDohServer:
    """Threaded loopback DoH server. Use as a context manager."""

    def __init__(self, pki: TestPKI, behavior: Optional[MockBehavior] = None, host: str = "127.0.0.1",
                 port: int = 0, hostname: str = "localhost"):
        self.pki = pki
        self.behavior = behavior or MockBehavior()
        self.hostname = hostname
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.address, self.port = self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._conns: list[socket.socket] = []
        self._lock = threading.Lock()
        self.requests = 0
        self.connections = 0
        self._ctx = self._make_context()

    @property
    def url(self) -> str:
        return f"https://{self.hostname}:{self.port}{self.behavior.path}"

    def _make_context(self) -> ssl.SSLContext:
        b = self.behavior
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        if b.tls_min in ("1.0", "1.1") or b.tls_max in ("1.0", "1.1"):
            # legacy versions are refused at the default OpenSSL security level
            ctx.set_ciphers("DEFAULT:@SECLEVEL=0")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DeprecationWarning)
            ctx.minimum_version = _TLS[b.tls_min]
            ctx.maximum_version = _TLS[b.tls_max]
        if b.wrong_cert:
            ctx.load_cert_chain(self.pki.wrong_certfile, self.pki.wrong_keyfile)
        else:
            ctx.load_cert_chain(self.pki.certfile, self.pki.keyfile)
        if b.alpn:
            ctx.set_alpn_protocols(list(b.alpn))
        return ctx

    def start(self) -> "MockDohServer":
        self._thread = threading.Thread(target=self._serve, name=f"mock-doh-{self.port}", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        with self._lock:
            conns, self._conns = self._conns, []
        for conn in conns:
            try:
                conn.close()
            except OSError:
                pass
        self._listener.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def serve_forever(self):
        """Block serving until interrupted (used by the CLI)."""
        self.start()
        try:
            while not self._stop.is_set():
                time.sleep(0.5)
        finally:
            self.stop()

    def _serve(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with self._lock:
                self._conns.append(conn)
                self.connections += 1
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, raw: socket.socket):
        b = self.behavior
        try:
            if b.mode == "tls_hang":
                self._stop.wait()
                return
            raw.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            raw.settimeout(10)
            try:
                tls = self._ctx.wrap_socket(raw, server_side=True)
            except (ssl.SSLError, OSError) as exc:
                log.debug("mock handshake failed: %s", exc)
                return
            with self._lock:
                self._conns.append(tls)
            if b.mode == "empty_reply":
                tls.close()
                return
            if tls.selected_alpn_protocol() == "h2":
                self._serve_h2(tls)
            else:
                self._serve_h1(tls)
        except OSError as exc:
            log.debug("mock connection error: %s", exc)
        finally:
            try:
                raw.close()
            except OSError:
                pass

    def _respond(self, method: str, target: str, body: bytes) -> tuple[int, str, bytes]:
        b = self.behavior
        self.requests += 1
        if b.delay:
            time.sleep(b.delay)
        if b.mode == "status":
            return b.status, "text/plain", b""
        if b.mode == "garbage":
            return 200, b.content_type, b.body
        if method == "GET":
            params = parse_qs(urlsplit(target).query)
            encoded = params.get("dns", [""])[0]
            body = base64.urlsafe_b64decode(encoded + "=" * (-len(encoded) % 4))
        try:
            id_override = None
            if b.mode == "mismatch":
                id_override = (int.from_bytes(body[:2], "big") + 1) & 0xFFFF
            answer = build_answer(body, rcode=b.rcode, answer=b.answer, id_override=id_override)
        except wire.DecodeError:
            return 400, "text/plain", b""
        return 200, b.content_type, answer

    def _serve_h1(self, tls: ssl.SSLSocket):
        reader = tls.makefile("rb")
        while True:
            request_line = reader.readline(65537)
            if not request_line:
                return
            try:
                method, target, _version = request_line.decode("latin-1").split()
            except ValueError:
                return
            headers = {}
            while True:
                line = reader.readline(65537)
                if line in (b"\r\n", b"\n", b""):
                    break
                name, _, value = line.decode("latin-1").partition(":")
                headers[name.strip().lower()] = value.strip()
            length = int(headers.get("content-length", "0") or 0)
            body = reader.read(length) if length else b""
            status, ctype, payload = self._respond(method, target, body)
            keep_alive = headers.get("connection", "").lower() != "close"
            reason = {200: "OK", 400: "Bad Request", 404: "Not Found", 500: "Internal Server Error"}.get(status, "Status")
            head = (
                f"HTTP/1.1 {status} {reason}\r\n"
                f"Content-Type: {ctype}\r\n"
                f"Content-Length: {len(payload)}\r\n"
                f"Connection: {'keep-alive' if keep_alive else 'close'}\r\n\r\n"
            ).encode("latin-1")
            tls.sendall(head + payload)
            if not keep_alive:
                return

    def _serve_h2(self, tls: ssl.SSLSocket):
        if self.behavior.mode == "h2_violation":
            # DATA frame on stream 0 is a connection error of type PROTOCOL_ERROR
            tls.sendall(struct.pack("!I", 4)[1:] + b"\x00\x00" + struct.pack("!I", 0) + b"oops")
            time.sleep(0.2)
            return
        conn = h2.connection.H2Connection(
            config=h2.config.H2Configuration(client_side=False, header_encoding="utf-8"))
        conn.initiate_connection()
        tls.sendall(conn.data_to_send())
        streams: dict[int, dict] = {}
        while True:
            data = tls.recv(65535)
            if not data:
                return
            try:
                events = conn.receive_data(data)
            except h2.exceptions.ProtocolError:
                tls.sendall(conn.data_to_send())
                return
            for event in events:
                if isinstance(event, h2.events.RequestReceived):
                    streams[event.stream_id] = {"headers": dict(event.headers), "body": b""}
                elif isinstance(event, h2.events.DataReceived):
                    streams[event.stream_id]["body"] += event.data
                    conn.acknowledge_received_data(event.flow_controlled_length, event.stream_id)
                elif isinstance(event, h2.events.StreamEnded):
                    st = streams.pop(event.stream_id)
                    status, ctype, payload = self._respond(
                        st["headers"].get(":method", "POST"), st["headers"].get(":path", "/"), st["body"])
                    conn.send_headers(event.stream_id, [
                        (":status", str(status)),
                        ("content-type", ctype),
                        ("content-length", str(len(payload))),
                    ], end_stream=not payload)
                    if payload:
                        conn.send_data(event.stream_id, payload, end_stream=True)
                elif isinstance(event, h2.events.ConnectionTerminated):
                    tls.sendall(conn.data_to_send())
                    return
            pending = conn.data_to_send()
            if pending:
                tls.sendall(pending)


class ClosedPort:
    """A loopback port with nothing listening (bound then released)."""

    def __init__(self):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        self.port = s.getsockname()[1]
        s.close()

    def url(self, hostname="localhost", path="/dns-query") -> str:
        return f"https://{hostname}:{self.port}{path}"


class TcpListener:
    """Plain TCP listener that accepts and immediately closes; RTT fallback target."""

    def __init__(self, host="127.0.0.1"):
        self._sock = socket.create_server((host, 0))
        self._sock.settimeout(0.2)
        self.port = self._sock.getsockname()[1]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
                conn.close()
            except socket.timeout:
                continue
            except OSError:
                return

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join(timeout=2)
        self._sock.close()


def temp_pki() -> TestPKI:
    return make_test_pki(tempfile.mkdtemp(prefix="dohscope-pki-"))
