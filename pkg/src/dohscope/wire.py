"""DNS message encoding for DoH payloads and validation of DoH response bodies.

Only the header and the question section are decoded. Answer records are
counted but their RDATA is never parsed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

TYPE_A = 1
TYPE_AAAA = 28
TYPE_OPT = 41
CLASS_IN = 1

HEADER = struct.Struct("!6H")
HEADER_LEN = HEADER.size

_MAX_NAME_TEXT = 253
_MAX_LABEL = 63
_MAX_POINTER_HOPS = 128


class InvalidName(ValueError):
    """Domain name cannot be encoded in wire format."""


class DecodeError(ValueError):
    """Byte sequence is not a decodable DNS response."""


@dataclass(frozen=True)
class DnsQuestion:
    name: str
    qtype: int = TYPE_A
    qclass: int = CLASS_IN


@dataclass(frozen=True)
class DnsResponseSummary:
    id: int
    rcode: int
    answer_count: int
    question_echo: Optional[DnsQuestion]
    qr_flag: bool
    opcode: int = 0
    truncated: bool = False


def split_labels(name: str) -> list[str]:
    """Split a presentation-format name into labels, validating RFC 1035 limits.

    The root name "." yields an empty list. A single trailing dot is allowed.
    """
    if name == ".":
        return []
    if not name:
        raise InvalidName("empty name")
    try:
        name.encode("ascii")
    except UnicodeEncodeError:
        raise InvalidName(f"non-ASCII name: {name!r}") from None
    text = name[:-1] if name.endswith(".") else name
    if len(text) > _MAX_NAME_TEXT:
        raise InvalidName(f"name longer than {_MAX_NAME_TEXT} octets")
    labels = text.split(".")
    for label in labels:
        if not label:
            raise InvalidName(f"empty label in {name!r}")
        if len(label) > _MAX_LABEL:
            raise InvalidName(f"label longer than {_MAX_LABEL} octets: {label[:16]}...")
    return labels


def encode_name(name: str) -> bytes:
    out = bytearray()
    for label in split_labels(name):
        out.append(len(label))
        out += label.encode("ascii")
    out.append(0)
    return bytes(out)


def encode_query(
    question: DnsQuestion,
    id: int = 0,
    recursion_desired: bool = True,
    edns: bool = False,
) -> bytes:
    """Build a single-question query message.

    With ``edns`` a minimal OPT record advertising a 4096-byte UDP payload is
    appended. Compression pointers are never emitted.
    """
    if not 0 <= id <= 0xFFFF:
        raise ValueError(f"message id out of range: {id}")
    for field, value in (("qtype", question.qtype), ("qclass", question.qclass)):
        if not 0 <= value <= 0xFFFF:
            raise ValueError(f"{field} out of range: {value}")
    flags = 0x0100 if recursion_desired else 0
    arcount = 1 if edns else 0
    msg = HEADER.pack(id, flags, 1, 0, 0, arcount)
    msg += encode_name(question.name)
    msg += struct.pack("!HH", question.qtype, question.qclass)
    if edns:
        # root owner, TYPE=OPT, CLASS=udp size, TTL=0, RDLEN=0
        msg += b"\x00" + struct.pack("!HHIH", TYPE_OPT, 4096, 0, 0)
    return msg


def _escape_label(raw: bytes) -> str:
    chars = []
    for b in raw:
        if b in (0x2E, 0x5C):  # '.', '\\'
            chars.append("\\" + chr(b))
        elif 0x21 <= b <= 0x7E:
            chars.append(chr(b))
        else:
            chars.append(f"\\{b:03d}")
    return "".join(chars)


def decode_name(data: bytes, offset: int) -> tuple[str, int]:
    """Read a possibly compressed name starting at ``offset``.

    Returns the presentation-format name and the offset just past the name
    in the original (uncompressed) position.
    """
    labels: list[str] = []
    end = None
    hops = 0
    seen = set()
    pos = offset
    while True:
        if pos >= len(data):
            raise DecodeError("name runs past end of message")
        length = data[pos]
        kind = length & 0xC0
        if kind == 0xC0:
            if pos + 1 >= len(data):
                raise DecodeError("truncated compression pointer")
            target = ((length & 0x3F) << 8) | data[pos + 1]
            if end is None:
                end = pos + 2
            if target in seen or hops >= _MAX_POINTER_HOPS:
                raise DecodeError("compression pointer loop")
            seen.add(target)
            hops += 1
            pos = target
            continue
        if kind:
            raise DecodeError(f"unsupported label type 0x{kind:02x}")
        if length == 0:
            pos += 1
            break
        if pos + 1 + length > len(data):
            raise DecodeError("label runs past end of message")
        labels.append(_escape_label(data[pos + 1:pos + 1 + length]))
        pos += 1 + length
    if end is None:
        end = pos
    return (".".join(labels) if labels else "."), end


def decode_response(body: bytes) -> DnsResponseSummary:
    if len(body) < HEADER_LEN:
        raise DecodeError(f"message shorter than header ({len(body)} bytes)")
    msg_id, flags, qdcount, ancount, _nscount, _arcount = HEADER.unpack_from(body)
    qr = bool(flags & 0x8000)
    if not qr:
        raise DecodeError("QR bit not set; message is not a response")
    question = None
    if qdcount:
        name, pos = decode_name(body, HEADER_LEN)
        if pos + 4 > len(body):
            raise DecodeError("question section truncated")
        qtype, qclass = struct.unpack_from("!HH", body, pos)
        question = DnsQuestion(name, qtype, qclass)
    return DnsResponseSummary(
        id=msg_id,
        rcode=flags & 0x000F,
        answer_count=ancount,
        question_echo=question,
        qr_flag=qr,
        opcode=(flags >> 11) & 0x0F,
        truncated=bool(flags & 0x0200),
    )


def _canonical(name: str) -> str:
    if name != "." and name.endswith("."):
        name = name[:-1]
    return name.lower()


def names_equal(a: str, b: str) -> bool:
    """Case-insensitive comparison of presentation-format names."""
    return _canonical(a) == _canonical(b)


def response_matches(query_id: int, question: DnsQuestion, response: DnsResponseSummary) -> bool:
    echo = response.question_echo
    return (
        response.id == query_id
        and response.qr_flag
        and echo is not None
        and echo.qtype == question.qtype
        and echo.qclass == question.qclass
        and names_equal(echo.name, question.name)
    )
