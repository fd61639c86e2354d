"""Append-only JSON Lines storage for measurement records.

One JSON object per line. Field names are fixed by the output schema; unknown
fields found on load are kept in ``Record.extras`` and written back verbatim.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

from .ping import PingMeasurement
from .transport import ErrorClass, Outcome, QueryMeasurement, TimingBreakdown

log = logging.getLogger(__name__)

KIND_DOH = "doh"
KIND_PING = "ping"

_DOH_KEYS = {"kind", "campaign_id", "round", "vantage", "resolver_url", "domain", "ts_utc", "timing",
             "outcome", "http_status", "rcode", "http_version", "tls_version", "detail", "address"}
_PING_KEYS = {"kind", "campaign_id", "round", "vantage", "host", "ts_utc", "timing", "outcome",
              "rtts_ms", "avg_rtt_ms", "sent", "received", "method", "detail", "address", "family"}


class SchemaError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TruncatedRecordWarning(UserWarning):
    """The final line of a record file was cut off mid-write."""


Measurement = Union[QueryMeasurement, PingMeasurement]


@dataclass(frozen=True)
class Record:
    measurement: Measurement
    campaign_id: str
    round: int
    extras: dict = field(default_factory=dict, compare=True)

    @property
    def kind(self) -> str:
        return KIND_DOH if isinstance(self.measurement, QueryMeasurement) else KIND_PING

    @property
    def vantage(self) -> str:
        return self.measurement.vantage


def format_ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


def parse_ts(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


def ping_outcome(m: PingMeasurement) -> ErrorClass:
    """Ping rounds reuse the error vocabulary: no address means resolution failed."""
    if m.received:
        return ErrorClass.SUCCESS
    if m.address is None:
        return ErrorClass.NAME_RESOLUTION_FAILURE
    return ErrorClass.COULD_NOT_CONNECT


def record_to_dict(record: Record) -> dict:
    m = record.measurement
    d: dict = {"kind": record.kind, "campaign_id": record.campaign_id, "round": record.round,
               "vantage": m.vantage}
    if isinstance(m, QueryMeasurement):
        d["resolver_url"] = m.resolver_url
        d["domain"] = m.domain
        d["ts_utc"] = format_ts(m.timestamp_utc)
        d["timing"] = m.timing.to_dict()
        d["outcome"] = m.outcome.error_class.value
        optional = {
            "http_status": m.outcome.http_status,
            "rcode": m.rcode,
            "http_version": m.negotiated_http,
            "tls_version": m.negotiated_tls,
            "detail": m.outcome.detail or None,
            "address": m.address,
        }
    else:
        d["host"] = m.host
        d["ts_utc"] = format_ts(m.timestamp_utc)
        d["timing"] = {}
        d["outcome"] = ping_outcome(m).value
        d["rtts_ms"] = list(m.rtts_ms)
        optional = {
            "avg_rtt_ms": m.average_ms,
            "sent": m.sent,
            "received": m.received,
            "method": m.method,
            "detail": m.detail or None,
            "address": m.address,
            "family": m.family,
        }
    d.update({k: v for k, v in optional.items() if v is not None})
    for k, v in record.extras.items():
        d.setdefault(k, v)
    return d


def record_from_dict(d: dict, line_no: int = 0) -> Record:
    try:
        kind = d["kind"]
        if kind == KIND_DOH:
            outcome_class = ErrorClass(d["outcome"])
            detail = d.get("detail") or ""
            outcome = Outcome(outcome_class, detail, d.get("http_status"))
            m = QueryMeasurement(
                resolver_url=d["resolver_url"],
                vantage=d["vantage"],
                domain=d.get("domain", ""),
                timestamp_utc=parse_ts(d["ts_utc"]),
                timing=TimingBreakdown.from_dict(d.get("timing") or {}),
                outcome=outcome,
                rcode=d.get("rcode"),
                negotiated_http=d.get("http_version"),
                negotiated_tls=d.get("tls_version"),
                address=d.get("address"),
            )
            known = _DOH_KEYS
        elif kind == KIND_PING:
            rtts = tuple(float(x) for x in d.get("rtts_ms") or ())
            if "received" in d and d["received"] != len(rtts):
                raise ValueError("received does not match length of rtts_ms")
            m = PingMeasurement(
                host=d["host"],
                vantage=d["vantage"],
                timestamp_utc=parse_ts(d["ts_utc"]),
                rtts_ms=rtts,
                sent=int(d.get("sent", len(rtts))),
                method=d.get("method", "icmp"),
                address=d.get("address"),
                family=d.get("family"),
                detail=d.get("detail") or "",
            )
            known = _PING_KEYS
        else:
            raise ValueError(f"unknown record kind {kind!r}")
        extras = {k: v for k, v in d.items() if k not in known}
        return Record(m, str(d["campaign_id"]), int(d["round"]), extras)
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        msg = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
        raise SchemaError(line_no, msg) from None


def dumps(record: Record) -> str:
    return json.dumps(record_to_dict(record), separators=(",", ":"), ensure_ascii=False)


def repair_tail(path) -> int:
    """Drop a trailing partial line left by a crash. Returns bytes removed."""
    path = Path(path)
    if not path.exists():
        return 0
    with path.open("rb+") as fh:
        size = fh.seek(0, os.SEEK_END)
        if size == 0:
            return 0
        fh.seek(size - 1)
        if fh.read(1) == b"\n":
            return 0
        # scan back for the last complete line
        pos = size
        keep = 0
        while pos > 0:
            step = min(4096, pos)
            pos -= step
            fh.seek(pos)
            chunk = fh.read(step)
            idx = chunk.rfind(b"\n")
            if idx >= 0:
                keep = pos + idx + 1
                break
        fh.truncate(keep)
    log.warning("removed %d bytes of partial record from %s", size - keep, path)
    return size - keep


class RecordWriter:
    """Thread-safe append-only sink; each record is written as one ``write`` call."""

    def __init__(self, path, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.repaired_bytes = repair_tail(self.path)
        self._fh = self.path.open("a", encoding="utf-8")
        self._lock = threading.Lock()
        self.count = 0

    def write(self, record: Record):
        line = dumps(record) + "\n"
        with self._lock:
            self._fh.write(line)
            self._fh.flush()
            self.count += 1

    def sync(self):
        with self._lock:
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())

    def close(self):
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
                self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def persist_record(record: Record, path) -> None:
    """Append a single record (opens and closes the file)."""
    with RecordWriter(path, fsync=False) as writer:
        writer.write(record)


def iter_records(path) -> Iterator[Record]:
    path = Path(path)
    with path.open("rb") as fh:
        data = fh.read()
    lines = data.split(b"\n")
    complete = data.endswith(b"\n") or not data
    if complete:
        lines = lines[:-1]
    last = len(lines)
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            if line_no == last and not complete:
                warnings.warn(f"{path}: ignoring truncated final line {line_no}", TruncatedRecordWarning,
                              stacklevel=2)
                return
            raise SchemaError(line_no, f"invalid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise SchemaError(line_no, "record is not a JSON object")
        yield record_from_dict(obj, line_no)


def load_records(path) -> list[Record]:
    return list(iter_records(path))


def load_many(paths: Iterable) -> list[Record]:
    """Merge record files (e.g. one per vantage point)."""
    out: list[Record] = []
    for p in paths:
        out.extend(load_records(p))
    return out


def query_measurements(records: Iterable[Record]) -> list[QueryMeasurement]:
    return [r.measurement for r in records if isinstance(r.measurement, QueryMeasurement)]


def ping_measurements(records: Iterable[Record]) -> list[PingMeasurement]:
    return [r.measurement for r in records if isinstance(r.measurement, PingMeasurement)]


def last_round(path, campaign_id: Optional[str] = None) -> int:
    """Highest round index persisted for ``campaign_id`` (-1 when none)."""
    if not Path(path).exists():
        return -1
    best = -1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncatedRecordWarning)
        for rec in iter_records(path):
            if campaign_id is None or rec.campaign_id == campaign_id:
                best = max(best, rec.round)
    return best
