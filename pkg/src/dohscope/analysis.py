"""Derived statistics over persisted measurement records.

Timing statistics use successful DoH attempts only; failures feed the
availability verdicts and the error table. RTT statistics use ICMP rounds
only (TCP-fallback rounds are never mixed in) and operate on each round's
average. Ties are always broken by resolver URL.
"""

from __future__ import annotations

import csv
import enum
import io
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence
from urllib.parse import urlsplit

import numpy as np

from .catalog import Region, ResolverEndpoint
from .ping import METHOD_ICMP, PingMeasurement
from .records import Record
from .transport import ErrorClass, QueryMeasurement

ERROR_LABELS = {
    ErrorClass.COULD_NOT_CONNECT: "Couldn't Connect to Server",
    ErrorClass.HTTP_ERROR_STATUS: "HTTP Error Status",
    ErrorClass.COULD_NOT_DECODE_RESPONSE: "Couldn't Decode Response",
    ErrorClass.SSL_CONNECT_ERROR: "SSL Connect Error",
    ErrorClass.NAME_RESOLUTION_FAILURE: "Couldn't Resolve the Resolver's Domain Name",
    ErrorClass.SSL_CERTIFICATE_ERROR: "SSL Certificate Error",
    ErrorClass.OTHER_ERROR: "Other Error",
    ErrorClass.SSL_TIMEOUT: "SSL Timeout",
    ErrorClass.HTTP2_FRAMING_ERROR: "Error in the HTTP/2 Framing Layer",
}
SUCCESS_LABEL = "Successful Responses"
ALL_ERRORS_LABEL = "All Errors"
_CLASS_ORDER = {c: i for i, c in enumerate(ErrorClass)}


class NoData(LookupError):
    """No qualifying records for the requested resolver/vantage."""


class Availability(str, enum.Enum):
    AVAILABLE = "available"
    UNRESPONSIVE = "unresponsive"


def _queries(records: Iterable) -> list[QueryMeasurement]:
    out = []
    for r in records:
        m = r.measurement if isinstance(r, Record) else r
        if isinstance(m, QueryMeasurement):
            out.append(m)
    return out


def _pings(records: Iterable) -> list[PingMeasurement]:
    out = []
    for r in records:
        m = r.measurement if isinstance(r, Record) else r
        if isinstance(m, PingMeasurement):
            out.append(m)
    return out


def median(values: Sequence[float]) -> float:
    """Median; for even counts the mean of the two central values."""
    if len(values) == 0:
        raise NoData("median of empty sample")
    return float(np.median(np.asarray(values, dtype=float)))


def availability(records: Iterable, resolver: str, vantage: str) -> Availability:
    attempts = [q for q in _queries(records) if q.resolver_url == resolver and q.vantage == vantage]
    if not attempts:
        raise NoData(f"no attempts for {resolver} from {vantage}")
    if any(q.ok for q in attempts):
        return Availability.AVAILABLE
    return Availability.UNRESPONSIVE


def unresponsive_everywhere(records: Iterable) -> list[str]:
    """Resolvers with zero successes from every vantage that measured them."""
    seen = set()
    good = set()
    for q in _queries(records):
        seen.add(q.resolver_url)
        if q.ok:
            good.add(q.resolver_url)
    return sorted(seen - good)


def success_times(records: Iterable, resolver: str, vantage: str) -> np.ndarray:
    return np.array([q.timing.total_ms for q in _queries(records)
                     if q.resolver_url == resolver and q.vantage == vantage and q.ok
                     and q.timing.total_ms is not None], dtype=float)


def median_response_time(records: Iterable, resolver: str, vantage: str) -> float:
    samples = success_times(records, resolver, vantage)
    if samples.size == 0:
        raise NoData(f"no successful queries for {resolver} from {vantage}")
    return median(samples)


@dataclass(frozen=True)
class ErrorRow:
    label: str
    count: int
    fraction: float
    error_class: Optional[ErrorClass] = None

    @property
    def percent_text(self) -> str:
        return format_percent(self.fraction, self.count)


def format_percent(fraction: float, count: int = 1) -> str:
    """One decimal place, trailing ``.0`` dropped; nonzero shares that round to 0.0 print ``<1%``."""
    value = round(fraction * 100.0, 1)
    if count and value == 0.0:
        return "<1%"
    text = f"{value:.1f}"
    if text.endswith(".0"):
        text = text[:-2]
    return f"{text}%"


def error_table(records: Iterable) -> list[ErrorRow]:
    """Error rows by descending count, then the success and all-errors totals."""
    return error_table_from_counts(Counter(q.outcome.error_class for q in _queries(records)))


def error_table_from_counts(counts: Mapping[ErrorClass, int]) -> list[ErrorRow]:
    """Same layout as :func:`error_table`, from pre-aggregated counts."""
    total = sum(counts.values())
    if total == 0:
        return []
    errors = [(c, n) for c, n in counts.items() if c is not ErrorClass.SUCCESS and n > 0]
    errors.sort(key=lambda cn: (-cn[1], _CLASS_ORDER[cn[0]]))
    rows = [ErrorRow(ERROR_LABELS[c], n, n / total, c) for c, n in errors]
    successes = counts.get(ErrorClass.SUCCESS, 0)
    rows.append(ErrorRow(SUCCESS_LABEL, successes, successes / total, ErrorClass.SUCCESS))
    rows.append(ErrorRow(ALL_ERRORS_LABEL, total - successes, (total - successes) / total))
    return rows


def render_error_table(rows: Sequence[ErrorRow]) -> str:
    width = max([len(r.label) for r in rows] + [5])
    lines = [f"{'Error':<{width}}  {'Count':>9}  % of All Responses"]
    for row in rows:
        if row.label == SUCCESS_LABEL:
            lines.append("-" * (width + 32))
        lines.append(f"{row.label:<{width}}  {row.count:>9,}  {row.percent_text}")
    return "\n".join(lines)


@dataclass(frozen=True)
class ResolverSummary:
    resolver_url: str
    vantage: str
    total_attempts: int
    successes: int
    error_histogram: dict
    median_response_ms: Optional[float]
    median_rtt_ms: Optional[float]
    region: Region = Region.UNKNOWN
    mainstream: bool = False

    @property
    def available(self) -> bool:
        return self.successes >= 1

    @property
    def ratio(self) -> Optional[float]:
        if self.median_response_ms is None or self.median_rtt_ms is None or self.median_rtt_ms <= 0:
            return None
        return self.median_response_ms / self.median_rtt_ms


def _hostname(url: str) -> str:
    return (urlsplit(url).hostname or "").lower()


def _endpoint_index(endpoints: Optional[Iterable[ResolverEndpoint]]) -> dict:
    return {e.url: e for e in endpoints or ()}


def rtt_rounds(records: Iterable, host: str, vantage: str) -> np.ndarray:
    """Per-round ICMP averages for ``host`` from ``vantage`` (rounds with no reply skipped)."""
    return np.array([p.average_ms for p in _pings(records)
                     if p.host.lower() == host.lower() and p.vantage == vantage
                     and p.method == METHOD_ICMP and p.average_ms is not None], dtype=float)


def summarize(records: Iterable, endpoints: Optional[Iterable[ResolverEndpoint]] = None) -> list[ResolverSummary]:
    """One summary per (resolver, vantage) that has DoH attempts, sorted by vantage then URL."""
    records = list(records)
    index = _endpoint_index(endpoints)
    queries = _queries(records)
    by_key = defaultdict(list)
    for q in queries:
        by_key[(q.resolver_url, q.vantage)].append(q)

    rtt_by_key = defaultdict(list)
    for p in _pings(records):
        if p.method == METHOD_ICMP and p.average_ms is not None:
            rtt_by_key[(p.host.lower(), p.vantage)].append(p.average_ms)

    out = []
    for (url, vantage), attempts in sorted(by_key.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        hist = Counter(q.outcome.error_class for q in attempts if not q.ok)
        times = [q.timing.total_ms for q in attempts if q.ok and q.timing.total_ms is not None]
        successes = sum(1 for q in attempts if q.ok)
        rtts = rtt_by_key.get((_hostname(url), vantage), [])
        endpoint = index.get(url)
        out.append(ResolverSummary(
            resolver_url=url,
            vantage=vantage,
            total_attempts=len(attempts),
            successes=successes,
            error_histogram=dict(hist),
            median_response_ms=median(times) if times else None,
            median_rtt_ms=median(rtts) if rtts else None,
            region=endpoint.region if endpoint else Region.UNKNOWN,
            mainstream=endpoint.mainstream if endpoint else False,
        ))
    return out


@dataclass(frozen=True)
class ComparisonRow:
    resolver_url: str
    median_a: float
    median_b: float

    @property
    def difference(self) -> float:
        return abs(self.median_a - self.median_b)


def regional_comparison(records: Iterable, endpoints: Iterable[ResolverEndpoint], resolver_region: Region,
                        vantage_a: str, vantage_b: str, k: int = 5) -> list[ComparisonRow]:
    """Top-``k`` resolvers of one region by absolute median difference between two vantages."""
    records = list(records)
    urls = sorted(e.url for e in endpoints if e.region == resolver_region)
    rows = []
    for url in urls:
        a = success_times(records, url, vantage_a)
        b = success_times(records, url, vantage_b)
        if a.size and b.size:
            rows.append(ComparisonRow(url, median(a), median(b)))
    if not rows:
        raise NoData(f"no {resolver_region.value} resolver has successes from both {vantage_a} and {vantage_b}")
    rows.sort(key=lambda r: (-r.difference, r.resolver_url))
    return rows[:max(k, 0)]


@dataclass(frozen=True)
class RatioFlag:
    resolver_url: str
    vantage: str
    median_response_ms: float
    median_rtt_ms: float
    ratio: float


@dataclass
class RatioReport:
    flagged: list = field(default_factory=list)
    within: list = field(default_factory=list)
    unratable: list = field(default_factory=list)  # (resolver_url, vantage)


def latency_ratio_flags(summaries: Iterable[ResolverSummary], threshold: float = 4.0) -> RatioReport:
    """Flag available resolvers whose median response time exceeds ``threshold`` x median RTT."""
    report = RatioReport()
    for s in sorted(summaries, key=lambda s: (s.vantage, s.resolver_url)):
        if not s.available:
            continue
        ratio = s.ratio
        if ratio is None:
            report.unratable.append((s.resolver_url, s.vantage))
            continue
        flag = RatioFlag(s.resolver_url, s.vantage, s.median_response_ms, s.median_rtt_ms, ratio)
        (report.flagged if ratio > threshold else report.within).append(flag)
    return report


def rank_resolvers(summaries: Iterable[ResolverSummary], vantage: str, k: int = 5) -> list[ResolverSummary]:
    """Available resolvers at ``vantage`` by ascending median response time."""
    candidates = [s for s in summaries if s.vantage == vantage and s.available and s.median_response_ms is not None]
    if not candidates:
        raise NoData(f"no available resolvers at {vantage}")
    candidates.sort(key=lambda s: (s.median_response_ms, s.resolver_url))
    return candidates[:max(k, 0)]


@dataclass(frozen=True)
class SeriesExport:
    vantage: str
    region: Region
    resolver_url: str
    label: str
    mainstream: bool
    series: str          # "dns" or "ping"
    samples: np.ndarray  # retained samples, ascending
    cdf: np.ndarray      # empirical CDF at each retained sample, over all samples
    overflow: int

    @property
    def total(self) -> int:
        return int(self.samples.size) + self.overflow


DISTRIBUTION_COLUMNS = ["vantage", "region", "resolver_url", "label", "mainstream", "series",
                        "rank", "value_ms", "cdf", "n_total", "overflow"]


def _series(values, truncate_at: Optional[float]) -> tuple[np.ndarray, np.ndarray, int]:
    values = np.sort(np.asarray(values, dtype=float))
    n = values.size
    cdf = np.arange(1, n + 1, dtype=float) / n if n else np.empty(0)
    if truncate_at is None:
        return values, cdf, 0
    keep = values <= truncate_at
    return values[keep], cdf[keep], int(n - keep.sum())


def distribution_export(records: Iterable, endpoints: Optional[Iterable[ResolverEndpoint]] = None,
                        truncate_at: Optional[float] = 500.0) -> list[SeriesExport]:
    """Sorted samples and CDF points per (vantage, region, resolver), DNS then ping series.

    Samples above ``truncate_at`` leave the plotted range but are counted in
    ``overflow``; the CDF is computed over the full sample so the truncated
    curve keeps its true height.
    """
    records = list(records)
    index = _endpoint_index(endpoints)
    dns = defaultdict(list)
    for q in _queries(records):
        if q.ok and q.timing.total_ms is not None:
            dns[(q.vantage, q.resolver_url)].append(q.timing.total_ms)
    pings = defaultdict(list)
    for p in _pings(records):
        if p.method == METHOD_ICMP and p.average_ms is not None:
            pings[(p.vantage, p.host.lower())].append(p.average_ms)

    out = []
    for (vantage, url), samples in dns.items():
        endpoint = index.get(url)
        region = endpoint.region if endpoint else Region.UNKNOWN
        label = endpoint.label if endpoint else _hostname(url)
        mainstream = endpoint.mainstream if endpoint else False
        kept, cdf, overflow = _series(samples, truncate_at)
        out.append(SeriesExport(vantage, region, url, label, mainstream, "dns", kept, cdf, overflow))
        rtts = pings.get((vantage, _hostname(url)))
        if rtts:
            kept, cdf, overflow = _series(rtts, truncate_at)
            out.append(SeriesExport(vantage, region, url, label, mainstream, "ping", kept, cdf, overflow))
    out.sort(key=lambda s: (s.vantage, s.region.value, s.resolver_url, s.series))
    return out


def distribution_csv(series: Iterable[SeriesExport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DISTRIBUTION_COLUMNS)
    for s in series:
        for rank, (value, p) in enumerate(zip(s.samples, s.cdf), start=1):
            writer.writerow([s.vantage, s.region.value, s.resolver_url, s.label, int(s.mainstream), s.series,
                             rank, f"{value:.3f}", f"{p:.6f}", s.total, s.overflow])
    return buf.getvalue()


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.2f}"


def summaries_csv(summaries: Iterable[ResolverSummary]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    classes = [c for c in ErrorClass if c is not ErrorClass.SUCCESS]
    writer.writerow(["vantage", "resolver_url", "region", "mainstream", "total_attempts", "successes", "available",
                     "median_response_ms", "median_rtt_ms", "ratio"] + [c.value for c in classes])
    for s in summaries:
        writer.writerow([s.vantage, s.resolver_url, s.region.value, int(s.mainstream), s.total_attempts,
                         s.successes, int(s.available), _fmt(s.median_response_ms), _fmt(s.median_rtt_ms),
                         _fmt(s.ratio)] + [s.error_histogram.get(c, 0) for c in classes])
    return buf.getvalue()


def error_table_csv(rows: Iterable[ErrorRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["error", "count", "percent"])
    for r in rows:
        writer.writerow([r.label, r.count, r.percent_text])
    return buf.getvalue()


def comparison_csv(rows: Iterable[ComparisonRow], vantage_a: str, vantage_b: str) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["resolver_url", f"median_ms_{vantage_a}", f"median_ms_{vantage_b}", "abs_difference_ms"])
    for r in rows:
        writer.writerow([r.resolver_url, _fmt(r.median_a), _fmt(r.median_b), _fmt(r.difference)])
    return buf.getvalue()


def ranking_csv(rows: Iterable[ResolverSummary]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["rank", "vantage", "resolver_url", "mainstream", "median_response_ms"])
    for i, s in enumerate(rows, start=1):
        writer.writerow([i, s.vantage, s.resolver_url, int(s.mainstream), _fmt(s.median_response_ms)])
    return buf.getvalue()


def flags_csv(report: RatioReport, threshold: float) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["vantage", "resolver_url", "median_response_ms", "median_rtt_ms", "ratio", "status"])
    for status, items in (("flagged", report.flagged), ("within", report.within)):
        for f in items:
            writer.writerow([f.vantage, f.resolver_url, _fmt(f.median_response_ms), _fmt(f.median_rtt_ms),
                             f"{f.ratio:.3f}", status])
    for url, vantage in report.unratable:
        writer.writerow([vantage, url, "", "", "", "unratable"])
    return buf.getvalue()
