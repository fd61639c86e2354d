"""Single DoH query execution with per-phase timing and failure classification.

Every phase timestamp is cumulative from the start of the attempt and read
from ``time.perf_counter``. Failures never propagate: they are classified
into :class:`ErrorClass` and returned inside the measurement.
"""

from __future__ import annotations

import base64
import enum
import http.client
import logging
import socket
import ssl
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional
from urllib.parse import urlsplit

import h2.config
import h2.connection
import h2.events
import h2.exceptions

from . import wire

log = logging.getLogger(__name__)

DNS_MESSAGE = "application/dns-message"


class ErrorClass(str, enum.Enum):
    SUCCESS = "Success"
    COULD_NOT_CONNECT = "CouldNotConnect"
    HTTP_ERROR_STATUS = "HttpErrorStatus"
    COULD_NOT_DECODE_RESPONSE = "CouldNotDecodeResponse"
    SSL_CONNECT_ERROR = "SslConnectError"
    NAME_RESOLUTION_FAILURE = "NameResolutionFailure"
    SSL_CERTIFICATE_ERROR = "SslCertificateError"
    SSL_TIMEOUT = "SslTimeout"
    HTTP2_FRAMING_ERROR = "Http2FramingError"
    OTHER_ERROR = "OtherError"


class Stage(str, enum.Enum):
    """Furthest phase an attempt was in when it failed."""

    RESOLVE = "resolve"
    CONNECT = "connect"
    TLS = "tls"
    HTTP = "http"
    DECODE = "decode"


@dataclass(frozen=True)
class Outcome:
    error_class: ErrorClass
    detail: str = ""
    http_status: Optional[int] = None

    def __post_init__(self):
        if self.error_class is ErrorClass.HTTP_ERROR_STATUS:
            if self.http_status is None or not 300 <= self.http_status <= 599:
                raise ValueError(f"HttpErrorStatus needs a 3xx-5xx status, got {self.http_status}")
        elif self.http_status is not None:
            raise ValueError("http_status is only carried by HttpErrorStatus")


SUCCESS = Outcome(ErrorClass.SUCCESS)


@dataclass(frozen=True)
class TransportFailure:
    """What went wrong and where; input to :func:`classify_failure`."""

    stage: Stage
    error: Optional[BaseException] = None
    http_status: Optional[int] = None
    detail: str = ""
    timed_out: bool = False


@dataclass(frozen=True)
class TimingBreakdown:
    name_resolution_ms: Optional[float] = None
    tcp_connect_ms: Optional[float] = None
    tls_handshake_ms: Optional[float] = None
    first_byte_ms: Optional[float] = None
    total_ms: Optional[float] = None

    PHASES = ("name_resolution_ms", "tcp_connect_ms", "tls_handshake_ms", "first_byte_ms", "total_ms")

    def present(self) -> list[float]:
        return [v for v in (getattr(self, p) for p in self.PHASES) if v is not None]

    def is_monotone(self) -> bool:
        values = self.present()
        return all(v >= 0 for v in values) and all(a <= b for a, b in zip(values, values[1:]))

    def to_dict(self) -> dict:
        return {p: getattr(self, p) for p in self.PHASES if getattr(self, p) is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "TimingBreakdown":
        return cls(**{p: d.get(p) for p in cls.PHASES})


@dataclass(frozen=True)
class QueryMeasurement:
    resolver_url: str
    vantage: str
    domain: str
    timestamp_utc: datetime
    timing: TimingBreakdown
    outcome: Outcome
    rcode: Optional[int] = None
    negotiated_http: Optional[str] = None
    negotiated_tls: Optional[str] = None
    address: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.outcome.error_class is ErrorClass.SUCCESS


@dataclass
class TransportOptions:
    connect_timeout: float = 5.0
    total_timeout: float = 15.0
    method: str = "POST"
    reuse: bool = False
    cafile: Optional[str] = None
    # host -> address, bypassing system name resolution (like curl --resolve)
    resolve: dict = field(default_factory=dict)
    alpn: tuple = ("h2", "http/1.1")
    tls_min: str = "1.2"
    tls_max: str = "1.3"
    user_agent: str = "dohscope/0.1"

    def __post_init__(self):
        if self.method.upper() not in ("POST", "GET"):
            raise ValueError(f"unsupported DoH method {self.method!r}")
        self.method = self.method.upper()
        self.alpn = tuple(self.alpn)
        if self.connect_timeout <= 0 or self.total_timeout <= 0:
            raise ValueError("timeouts must be positive")


_TLS_VERSIONS = {
    "1.0": ssl.TLSVersion.TLSv1,
    "1.1": ssl.TLSVersion.TLSv1_1,
    "1.2": ssl.TLSVersion.TLSv1_2,
    "1.3": ssl.TLSVersion.TLSv1_3,
}
_TLS_TAGS = {"TLSv1": "1.0", "TLSv1.1": "1.1", "TLSv1.2": "1.2", "TLSv1.3": "1.3"}


def classify_failure(failure: TransportFailure) -> Outcome:
    """Map a failed attempt onto exactly one non-success class."""
    err = failure.error
    detail = failure.detail or (f"{type(err).__name__}: {err}" if err is not None else "")
    stage = failure.stage
    timed_out = failure.timed_out or isinstance(err, (socket.timeout, TimeoutError))

    if stage is Stage.RESOLVE:
        return Outcome(ErrorClass.NAME_RESOLUTION_FAILURE, detail)
    if stage is Stage.CONNECT:
        return Outcome(ErrorClass.COULD_NOT_CONNECT, detail)
    if stage is Stage.TLS:
        if timed_out:
            return Outcome(ErrorClass.SSL_TIMEOUT, detail)
        if isinstance(err, ssl.SSLCertVerificationError):
            return Outcome(ErrorClass.SSL_CERTIFICATE_ERROR, detail)
        return Outcome(ErrorClass.SSL_CONNECT_ERROR, detail)
    if stage is Stage.HTTP:
        if failure.http_status is not None and failure.http_status >= 300:
            return Outcome(ErrorClass.HTTP_ERROR_STATUS, detail, failure.http_status)
        if isinstance(err, (h2.exceptions.ProtocolError, _H2StreamError)):
            return Outcome(ErrorClass.HTTP2_FRAMING_ERROR, detail)
        return Outcome(ErrorClass.OTHER_ERROR, detail)
    if stage is Stage.DECODE:
        return Outcome(ErrorClass.COULD_NOT_DECODE_RESPONSE, detail)
    return Outcome(ErrorClass.OTHER_ERROR, detail)


class _H2StreamError(Exception):
    """Peer reset the stream or tore down the connection with an error code."""


class _Failed(Exception):
    def __init__(self, failure: TransportFailure):
        super().__init__(failure.detail)
        self.failure = failure


class _Clock:
    def __init__(self, total_timeout: float):
        self.start = time.perf_counter()
        self.deadline = self.start + total_timeout

    def ms(self) -> float:
        return (time.perf_counter() - self.start) * 1000.0

    def remaining(self) -> float:
        return max(self.deadline - time.perf_counter(), 0.0)


@dataclass(frozen=True)
class Target:
    url: str
    host: str
    port: int
    path: str
    query: str

    @property
    def authority(self) -> str:
        return self.host if self.port == 443 else f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, url: str) -> "Target":
        parts = urlsplit(url)
        if parts.scheme.lower() != "https" or not parts.hostname:
            raise ValueError(f"not an https URL: {url!r}")
        return cls(url, parts.hostname, parts.port or 443, parts.path or "/", parts.query)


def resolve_host(host: str, port: int, overrides: dict) -> list[tuple]:
    """Return ``(family, sockaddr)`` candidates, IPv4 first."""
    if host in overrides:
        host = overrides[host]
    infos = socket.getaddrinfo(host, port, type=socket.SOCK_STREAM, proto=socket.IPPROTO_TCP)
    infos.sort(key=lambda info: 0 if info[0] == socket.AF_INET else 1)
    seen = []
    for family, _type, _proto, _canon, sockaddr in infos:
        if (family, sockaddr) not in seen:
            seen.append((family, sockaddr))
    return seen


def make_tls_context(opts: TransportOptions) -> ssl.SSLContext:
    ctx = ssl.create_default_context(cafile=opts.cafile)
    ctx.minimum_version = _TLS_VERSIONS[opts.tls_min]
    ctx.maximum_version = _TLS_VERSIONS[opts.tls_max]
    ctx.set_alpn_protocols(list(opts.alpn))
    return ctx


class _Connection:
    """An established TLS connection speaking either HTTP/1.1 or HTTP/2."""

    def __init__(self, target: Target, sock: ssl.SSLSocket, address: str):
        self.target = target
        self.sock = sock
        self.address = address
        self.http_version = "h2" if sock.selected_alpn_protocol() == "h2" else "h1"
        self.tls_version = _TLS_TAGS.get(sock.version() or "", sock.version())
        self.lock = threading.Lock()
        self._h1: Optional[http.client.HTTPConnection] = None
        self._h2: Optional[h2.connection.H2Connection] = None
        self.usable = True

    def close(self):
        self.usable = False
        try:
            self.sock.close()
        except OSError:
            pass

    def exchange(self, method: str, path: str, body: Optional[bytes], headers: list,
                 clock: _Clock, timing: dict) -> tuple[int, dict, bytes]:
        self.sock.settimeout(max(clock.remaining(), 0.001))
        if self.http_version == "h2":
            return self._exchange_h2(method, path, body, headers, clock, timing)
        return self._exchange_h1(method, path, body, headers, clock, timing)

    def _exchange_h1(self, method, path, body, headers, clock, timing):
        if self._h1 is None:
            conn = http.client.HTTPConnection(self.target.host, self.target.port)
            conn.sock = self.sock
            conn.auto_open = 0
            self._h1 = conn
        conn = self._h1
        conn.putrequest(method, path, skip_host=True, skip_accept_encoding=True)
        conn.putheader("Host", self.target.authority)
        for name, value in headers:
            conn.putheader(name, value)
        if body is not None:
            conn.putheader("Content-Length", str(len(body)))
        conn.endheaders(body)
        resp = conn.getresponse()
        timing["first_byte_ms"] = clock.ms()
        data = resp.read()
        if resp.will_close:
            self.usable = False
        return resp.status, {k.lower(): v for k, v in resp.getheaders()}, data

    def _exchange_h2(self, method, path, body, headers, clock, timing):
        if self._h2 is None:
            conn = h2.connection.H2Connection(
                config=h2.config.H2Configuration(client_side=True, header_encoding="utf-8"))
            conn.initiate_connection()
            self.sock.sendall(conn.data_to_send())
            self._h2 = conn
        conn = self._h2
        stream_id = conn.get_next_available_stream_id()
        request_headers = [
            (":method", method),
            (":scheme", "https"),
            (":authority", self.target.authority),
            (":path", path),
        ] + [(k.lower(), v) for k, v in headers]
        if body is not None:
            request_headers.append(("content-length", str(len(body))))
        conn.send_headers(stream_id, request_headers, end_stream=body is None)
        if body is not None:
            conn.send_data(stream_id, body, end_stream=True)
        self.sock.sendall(conn.data_to_send())

        status = None
        response_headers: dict = {}
        chunks = []
        while True:
            data = self.sock.recv(65535)
            if not data:
                self.usable = False
                raise ConnectionError("connection closed before HTTP/2 stream ended")
            for event in conn.receive_data(data):
                if isinstance(event, h2.events.ResponseReceived) and event.stream_id == stream_id:
                    timing["first_byte_ms"] = clock.ms()
                    response_headers = {k: v for k, v in event.headers}
                    status = int(response_headers.get(":status", 0))
                elif isinstance(event, h2.events.DataReceived) and event.stream_id == stream_id:
                    chunks.append(event.data)
                    conn.acknowledge_received_data(event.flow_controlled_length, stream_id)
                elif isinstance(event, h2.events.StreamReset) and event.stream_id == stream_id:
                    raise _H2StreamError(f"stream reset by peer, error code {event.error_code!r}")
                elif isinstance(event, h2.events.ConnectionTerminated):
                    self.usable = False
                    if event.error_code:
                        raise _H2StreamError(f"GOAWAY with error code {event.error_code!r}")
                    if status is None:
                        raise ConnectionError("peer closed HTTP/2 connection (GOAWAY)")
                elif isinstance(event, h2.events.StreamEnded) and event.stream_id == stream_id:
                    pending = conn.data_to_send()
                    if pending:
                        self.sock.sendall(pending)
                    if status is None:
                        raise _H2StreamError("stream ended without response headers")
                    return status, response_headers, b"".join(chunks)
            pending = conn.data_to_send()
            if pending:
                self.sock.sendall(pending)


def _open_connection(target: Target, opts: TransportOptions, clock: _Clock, timing: dict) -> _Connection:
    try:
        candidates = resolve_host(target.host, target.port, opts.resolve)
        if not candidates:
            raise socket.gaierror(f"no addresses for {target.host}")
    except (OSError, UnicodeError) as exc:
        raise _Failed(TransportFailure(Stage.RESOLVE, exc)) from exc
    timing["name_resolution_ms"] = clock.ms()

    sock = None
    last_exc: Optional[BaseException] = None
    for family, sockaddr in candidates:
        budget = min(opts.connect_timeout, clock.remaining())
        if budget <= 0:
            last_exc = socket.timeout("connect deadline expired")
            break
        sock = socket.socket(family, socket.SOCK_STREAM)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)  # request is several small writes
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(budget)
        try:
            sock.connect(sockaddr)
            break
        except OSError as exc:
            last_exc = exc
            sock.close()
            sock = None
    if sock is None:
        raise _Failed(TransportFailure(Stage.CONNECT, last_exc))
    timing["tcp_connect_ms"] = clock.ms()
    address = sockaddr[0]

    try:
        ctx = make_tls_context(opts)
        tls = ctx.wrap_socket(sock, server_hostname=target.host, do_handshake_on_connect=False)
        tls.settimeout(max(clock.remaining(), 0.001))
        tls.do_handshake()
    except (OSError, ValueError) as exc:
        sock.close()
        raise _Failed(TransportFailure(Stage.TLS, exc)) from exc
    timing["tls_handshake_ms"] = clock.ms()
    return _Connection(target, tls, address)


class ConnectionPool:
    """Keeps established connections for ``reuse`` mode, one per authority."""

    def __init__(self):
        self._conns: dict[tuple, _Connection] = {}
        self._lock = threading.Lock()

    def take(self, target: Target) -> Optional[_Connection]:
        with self._lock:
            conn = self._conns.pop((target.host, target.port), None)
        if conn is not None and not conn.usable:
            conn.close()
            return None
        return conn

    def give(self, conn: _Connection):
        if not conn.usable:
            conn.close()
            return
        with self._lock:
            old = self._conns.pop((conn.target.host, conn.target.port), None)
            self._conns[(conn.target.host, conn.target.port)] = conn
        if old is not None and old is not conn:
            old.close()

    def close(self):
        with self._lock:
            conns, self._conns = list(self._conns.values()), {}
        for conn in conns:
            conn.close()


_default_pool = ConnectionPool()


def _build_request(target: Target, payload: bytes, method: str) -> tuple[str, Optional[bytes], list]:
    headers = [("Accept", DNS_MESSAGE)]
    if method == "GET":
        encoded = base64.urlsafe_b64encode(payload).rstrip(b"=").decode("ascii")
        sep = "&" if target.query else "?"
        base = target.path + (f"?{target.query}" if target.query else "")
        return f"{base}{sep}dns={encoded}", None, headers
    path = target.path + (f"?{target.query}" if target.query else "")
    headers.append(("Content-Type", DNS_MESSAGE))
    return path, payload, headers


def _expected_question(payload: bytes) -> tuple[int, Optional[wire.DnsQuestion]]:
    """Recover id and question from our own query bytes (QR bit is clear)."""
    if len(payload) < wire.HEADER_LEN:
        return 0, None
    msg_id = int.from_bytes(payload[:2], "big")
    try:
        forced = payload[:2] + bytes([payload[2] | 0x80]) + payload[3:]
        return msg_id, wire.decode_response(forced).question_echo
    except wire.DecodeError:
        return msg_id, None


def measure_doh_query(
    resolver_url: str,
    payload: bytes,
    opts: Optional[TransportOptions] = None,
    *,
    vantage: str = "",
    domain: str = "",
    pool: Optional[ConnectionPool] = None,
) -> QueryMeasurement:
    """Send one DoH query and time it end to end.

    ``resolver_url`` may also be a catalog endpoint (anything with a ``url``
    attribute). A fresh TCP+TLS session is opened unless ``opts.reuse``.
    """
    opts = opts or TransportOptions()
    url = getattr(resolver_url, "url", resolver_url)
    pool = pool if pool is not None else _default_pool
    stamp = datetime.now(timezone.utc)
    clock = _Clock(opts.total_timeout)
    timing: dict = {}
    conn: Optional[_Connection] = None
    rcode = None
    outcome = SUCCESS
    address = None
    http_version = tls_version = None

    try:
        target = Target.parse(url)
    except ValueError as exc:
        return QueryMeasurement(url, vantage, domain, stamp, TimingBreakdown(),
                                Outcome(ErrorClass.OTHER_ERROR, str(exc)))

    try:
        if opts.reuse:
            conn = pool.take(target)
            if conn is not None:
                for phase in ("name_resolution_ms", "tcp_connect_ms", "tls_handshake_ms"):
                    timing[phase] = 0.0
        if conn is None:
            conn = _open_connection(target, opts, clock, timing)
        address = conn.address
        http_version, tls_version = conn.http_version, conn.tls_version

        path, body, headers = _build_request(target, payload, opts.method)
        headers.append(("User-Agent", opts.user_agent))
        try:
            status, resp_headers, data = conn.exchange(opts.method, path, body, headers, clock, timing)
        except (OSError, http.client.HTTPException, h2.exceptions.H2Error, _H2StreamError, ValueError) as exc:
            conn.usable = False
            timed_out = isinstance(exc, (socket.timeout, TimeoutError))
            raise _Failed(TransportFailure(Stage.HTTP, exc, timed_out=timed_out)) from exc
        timing["total_ms"] = clock.ms()

        if status >= 300:
            raise _Failed(TransportFailure(Stage.HTTP, http_status=status,
                                           detail=f"HTTP status {status}"))
        if status < 200:
            raise _Failed(TransportFailure(Stage.HTTP, detail=f"unexpected HTTP status {status}"))
        content_type = resp_headers.get("content-type", "").split(";")[0].strip().lower()
        if content_type != DNS_MESSAGE:
            raise _Failed(TransportFailure(Stage.DECODE,
                                           detail=f"content-type {content_type or 'missing'!r}"))
        try:
            summary = wire.decode_response(data)
        except wire.DecodeError as exc:
            raise _Failed(TransportFailure(Stage.DECODE, exc)) from exc
        query_id, question = _expected_question(payload)
        if question is not None and not wire.response_matches(query_id, question, summary):
            raise _Failed(TransportFailure(Stage.DECODE, detail="response id/question does not match query"))
        rcode = summary.rcode
    except _Failed as failed:
        outcome = classify_failure(failed.failure)
        if conn is not None:
            conn.usable = False
    except Exception as exc:  # last-resort catch-all, keeps the campaign running
        log.exception("unexpected transport failure for %s", url)
        outcome = Outcome(ErrorClass.OTHER_ERROR, f"{type(exc).__name__}: {exc}")
        if conn is not None:
            conn.usable = False
    finally:
        if conn is not None:
            if opts.reuse and conn.usable:
                pool.give(conn)
            else:
                conn.close()

    handshake_done = "tls_handshake_ms" in timing
    return QueryMeasurement(
        resolver_url=url,
        vantage=vantage,
        domain=domain,
        timestamp_utc=stamp,
        timing=TimingBreakdown(**timing),
        outcome=outcome,
        rcode=rcode,
        negotiated_http=http_version if handshake_done else None,
        negotiated_tls=tls_version if handshake_done else None,
        address=address,
    )


def negotiate_protocols(resolver_url, opts: Optional[TransportOptions] = None) -> tuple[str, str]:
    """Handshake only; return the negotiated ``(http_version, tls_version)``.

    Raises :class:`NegotiationError` carrying the classified outcome.
    """
    opts = opts or TransportOptions()
    target = Target.parse(getattr(resolver_url, "url", resolver_url))
    clock = _Clock(opts.total_timeout)
    try:
        conn = _open_connection(target, opts, clock, {})
    except _Failed as failed:
        raise NegotiationError(classify_failure(failed.failure)) from None
    try:
        return conn.http_version, conn.tls_version
    finally:
        conn.close()


class NegotiationError(Exception):
    def __init__(self, outcome: Outcome):
        super().__init__(f"{outcome.error_class.value}: {outcome.detail}")
        self.outcome = outcome


def build_payload(domain: str, qtype: int = wire.TYPE_A, id: int = 0, edns: bool = False) -> bytes:
    return wire.encode_query(wire.DnsQuestion(domain, qtype), id=id, edns=edns)
