"""Round-trip latency probes: ICMP echo, or TCP connect time as a fallback.

ICMP needs a raw socket (root or CAP_NET_RAW) or an unprivileged datagram
ICMP socket (``net.ipv4.ping_group_range``). When neither is available and
the fallback is disabled, :class:`InsufficientPrivilege` is raised.
"""

from __future__ import annotations

import itertools
import logging
import os
import select
import socket
import statistics
import struct
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

log = logging.getLogger(__name__)

ICMP_ECHO_REQUEST = 8
ICMP_ECHO_REPLY = 0
ICMP6_ECHO_REQUEST = 128
ICMP6_ECHO_REPLY = 129

METHOD_ICMP = "icmp"
METHOD_TCP = "tcp-fallback"

_ident_counter = itertools.count()
_ident_lock = threading.Lock()


class InsufficientPrivilege(PermissionError):
    """No ICMP socket could be opened and the TCP fallback is disabled."""


@dataclass(frozen=True)
class PingMeasurement:
    host: str
    vantage: str
    timestamp_utc: datetime
    rtts_ms: tuple = ()
    sent: int = 0
    method: str = METHOD_ICMP
    address: Optional[str] = None
    family: Optional[str] = None
    detail: str = ""

    @property
    def received(self) -> int:
        return len(self.rtts_ms)

    @property
    def average_ms(self) -> Optional[float]:
        return statistics.fmean(self.rtts_ms) if self.rtts_ms else None

    @property
    def lost(self) -> int:
        return self.sent - self.received


@dataclass
class PingOptions:
    count: int = 4
    interval: float = 1.0
    timeout: float = 2.0
    payload_size: int = 56
    fallback: bool = False
    fallback_port: Optional[int] = None  # None: 443, or the resolver URL's port in campaigns
    resolve: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("probe count must be at least 1")
        if self.interval < 0 or self.timeout <= 0:
            raise ValueError("interval must be >= 0 and timeout > 0")


def checksum(data: bytes) -> int:
    """RFC 1071 Internet checksum."""
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_echo_request(ident: int, seq: int, payload: bytes, v6: bool = False) -> bytes:
    icmp_type = ICMP6_ECHO_REQUEST if v6 else ICMP_ECHO_REQUEST
    header = struct.pack("!BBHHH", icmp_type, 0, 0, ident, seq)
    # kernel fills in the ICMPv6 checksum (it covers a pseudo-header)
    csum = 0 if v6 else checksum(header + payload)
    return struct.pack("!BBHHH", icmp_type, 0, csum, ident, seq) + payload


def parse_echo_reply(packet: bytes, has_ip_header: bool, v6: bool = False) -> Optional[tuple[int, int]]:
    """Return ``(ident, seq)`` if ``packet`` is an echo reply, else None."""
    offset = 0
    if has_ip_header and not v6:
        if not packet:
            return None
        offset = (packet[0] & 0x0F) * 4
    if len(packet) < offset + 8:
        return None
    icmp_type, code, _csum, ident, seq = struct.unpack_from("!BBHHH", packet, offset)
    if icmp_type != (ICMP6_ECHO_REPLY if v6 else ICMP_ECHO_REPLY) or code != 0:
        return None
    return ident, seq


def _next_ident() -> int:
    with _ident_lock:
        n = next(_ident_counter)
    return (os.getpid() * 31 + n) & 0xFFFF


def resolve_address(host: str, overrides: Optional[dict] = None) -> tuple[str, int]:
    """Resolve ``host`` preferring IPv4. Returns ``(address, family)``."""
    target = (overrides or {}).get(host, host)
    infos = socket.getaddrinfo(target, None, type=socket.SOCK_STREAM)
    infos.sort(key=lambda info: 0 if info[0] == socket.AF_INET else 1)
    family, *_rest, sockaddr = infos[0]
    return sockaddr[0], family


def open_icmp_socket(family: int = socket.AF_INET) -> tuple[socket.socket, bool]:
    """Open an ICMP socket; returns ``(sock, is_raw)``.

    Raises ``PermissionError`` when neither raw nor datagram ICMP is allowed.
    """
    proto = socket.IPPROTO_ICMP if family == socket.AF_INET else socket.IPPROTO_ICMPV6
    try:
        return socket.socket(family, socket.SOCK_RAW, proto), True
    except PermissionError:
        pass
    return socket.socket(family, socket.SOCK_DGRAM, proto), False


def _family_name(family: int) -> str:
    return "ipv6" if family == socket.AF_INET6 else "ipv4"


def ping_host(host: str, opts: Optional[PingOptions] = None, vantage: str = "") -> PingMeasurement:
    """Send ``opts.count`` echo requests spaced by ``opts.interval``.

    Only replies that match this call's identifier and sequence numbers are
    counted. With ``opts.fallback`` a missing ICMP privilege switches to
    :func:`tcp_rtt_fallback` instead of raising.
    """
    opts = opts or PingOptions()
    stamp = datetime.now(timezone.utc)
    try:
        address, family = resolve_address(host, opts.resolve)
    except (OSError, UnicodeError) as exc:
        return PingMeasurement(host, vantage, stamp, (), opts.count, METHOD_ICMP, detail=f"resolve: {exc}")

    try:
        sock, is_raw = open_icmp_socket(family)
    except PermissionError as exc:
        if opts.fallback:
            return tcp_rtt_fallback(host, opts.fallback_port or 443, opts, vantage=vantage)
        raise InsufficientPrivilege(f"cannot open ICMP socket: {exc}") from exc

    v6 = family == socket.AF_INET6
    ident = _next_ident()
    payload = bytes((i & 0xFF) for i in range(opts.payload_size))
    rtts = []
    errors = []
    with sock:
        for seq in range(opts.count):
            if seq:
                time.sleep(opts.interval)
            packet = build_echo_request(ident, seq, payload, v6)
            sent_at = time.perf_counter()
            try:
                sock.sendto(packet, (address, 0))
            except OSError as exc:
                errors.append(str(exc))
                continue
            rtt = _await_reply(sock, ident, seq, sent_at, opts.timeout, is_raw, v6)
            if rtt is not None:
                rtts.append(rtt)
    detail = "; ".join(sorted(set(errors)))
    return PingMeasurement(host, vantage, stamp, tuple(rtts), opts.count, METHOD_ICMP,
                           address, _family_name(family), detail)


def _await_reply(sock, ident, seq, sent_at, timeout, is_raw, v6) -> Optional[float]:
    deadline = sent_at + timeout
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return None
        ready, _, _ = select.select([sock], [], [], remaining)
        if not ready:
            return None
        packet = sock.recv(65535)
        received_at = time.perf_counter()
        parsed = parse_echo_reply(packet, has_ip_header=is_raw, v6=v6)
        if parsed is None:
            continue
        reply_ident, reply_seq = parsed
        # datagram ICMP sockets rewrite the identifier; the kernel demultiplexes for us
        if (reply_ident == ident or not is_raw) and reply_seq == seq:
            return (received_at - sent_at) * 1000.0


def tcp_rtt_fallback(host: str, port: int = 443, opts: Optional[PingOptions] = None,
                     vantage: str = "") -> PingMeasurement:
    """Use TCP connect time to ``host:port`` as a round-trip proxy."""
    opts = opts or PingOptions()
    stamp = datetime.now(timezone.utc)
    try:
        address, family = resolve_address(host, opts.resolve)
    except (OSError, UnicodeError) as exc:
        return PingMeasurement(host, vantage, stamp, (), opts.count, METHOD_TCP, detail=f"resolve: {exc}")
    rtts = []
    errors = []
    for seq in range(opts.count):
        if seq:
            time.sleep(opts.interval)
        with socket.socket(family, socket.SOCK_STREAM) as sock:
            sock.settimeout(opts.timeout)
            start = time.perf_counter()
            try:
                sock.connect((address, port))
            except OSError as exc:
                errors.append(type(exc).__name__)
                continue
            rtts.append((time.perf_counter() - start) * 1000.0)
    return PingMeasurement(host, vantage, stamp, tuple(rtts), opts.count, METHOD_TCP,
                           address, _family_name(family), "; ".join(sorted(set(errors))))
