"""Resolver list ingestion, region annotation and mainstream tagging."""

from __future__ import annotations

import csv
import enum
import io
import ipaddress
import logging
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Optional
from urllib.parse import urlsplit, urlunsplit

log = logging.getLogger(__name__)

DEFAULT_PATH = "/dns-query"


class Region(str, enum.Enum):
    NORTH_AMERICA = "NorthAmerica"
    ASIA = "Asia"
    EUROPE = "Europe"
    UNKNOWN = "Unknown"

    @classmethod
    def parse(cls, text: str) -> "Region":
        key = re.sub(r"[\s_-]", "", text).lower()
        for region in cls:
            if region.value.lower() == key:
                return region
        raise ValueError(f"unknown region {text!r}")


class InvalidUrl(ValueError):
    def __init__(self, line_no: int, text: str, reason: str):
        super().__init__(f"line {line_no}: {reason}: {text!r}")
        self.line_no = line_no
        self.text = text
        self.reason = reason


@dataclass(frozen=True)
class ResolverEndpoint:
    url: str
    hostname: str
    region: Region = Region.UNKNOWN
    mainstream: bool = False
    label: str = ""

    @property
    def port(self) -> int:
        return urlsplit(self.url).port or 443


class ParsedCatalog(NamedTuple):
    endpoints: list
    errors: list


def normalize_url(text: str) -> str:
    """Lowercase scheme and host, drop the default port, keep path and query verbatim."""
    parts = urlsplit(text.strip())
    if parts.scheme.lower() != "https":
        raise ValueError("https scheme required")
    host = parts.hostname
    if not host:
        raise ValueError("missing host")
    try:
        port = parts.port
    except ValueError:
        raise ValueError("invalid port") from None
    if parts.username or parts.password:
        raise ValueError("credentials not allowed in resolver URL")
    if ":" in host:
        host = f"[{host}]"
    netloc = host if port in (None, 443) else f"{host}:{port}"
    return urlunsplit(("https", netloc, parts.path or "/", parts.query, ""))


def make_endpoint(url: str) -> ResolverEndpoint:
    norm = normalize_url(url)
    parts = urlsplit(norm)
    label = parts.hostname if parts.path == DEFAULT_PATH else f"{parts.hostname}{parts.path}"
    return ResolverEndpoint(url=norm, hostname=parts.hostname, label=label)


def parse_resolver_list(text: str) -> ParsedCatalog:
    """One endpoint per non-empty, non-comment line; first occurrence wins."""
    endpoints = []
    errors = []
    seen = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            endpoint = make_endpoint(line)
        except ValueError as exc:
            errors.append(InvalidUrl(line_no, line, str(exc)))
            continue
        if endpoint.url in seen:
            log.debug("duplicate resolver %s on line %d", endpoint.url, line_no)
            continue
        seen.add(endpoint.url)
        endpoints.append(endpoint)
    for err in errors:
        log.warning("skipping resolver: %s", err)
    return ParsedCatalog(endpoints, errors)


def format_resolver_list(endpoints: Iterable[ResolverEndpoint]) -> str:
    return "".join(f"{e.url}\n" for e in endpoints)


def load_resolver_list(path) -> ParsedCatalog:
    return parse_resolver_list(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class GeoMapping:
    """Ordered ``(key, region)`` rows; a key is a hostname or a CIDR network."""

    rows: tuple
    source: str = ""
    fetched: Optional[str] = None

    def lookup(self, hostname: str, addresses: Iterable[str] = ()) -> Region:
        host = hostname.lower().rstrip(".")
        for key, region in self.rows:
            if isinstance(key, str) and key == host:
                return region
        ips = []
        for addr in addresses:
            try:
                ips.append(ipaddress.ip_address(addr))
            except ValueError:
                continue
        try:
            ips.append(ipaddress.ip_address(host))
        except ValueError:
            pass
        for key, region in self.rows:
            if not isinstance(key, str) and any(ip.version == key.version and ip in key for ip in ips):
                return region
        return Region.UNKNOWN


def parse_geo_mapping(text: str, source: str = "") -> GeoMapping:
    """CSV with header ``key,region``. ``# fetched: <date>`` comment lines are recorded."""
    fetched = None
    body = []
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.startswith("#"):
            m = re.match(r"#\s*fetched\s*:\s*(\S+)", stripped, re.I)
            if m:
                fetched = m.group(1)
            continue
        if stripped:
            body.append(line)
    reader = csv.DictReader(io.StringIO("\n".join(body)))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["key", "region"]:
        raise ValueError(f"geo mapping {source or '<text>'} must have header 'key,region'")
    rows = []
    for row in reader:
        key = row["key"].strip().lower()
        region = Region.parse(row["region"].strip())
        if "/" in key or _is_ip(key):
            rows.append((ipaddress.ip_network(key, strict=False), region))
        else:
            rows.append((key.rstrip("."), region))
    return GeoMapping(tuple(rows), source, fetched)


def _is_ip(text: str) -> bool:
    try:
        ipaddress.ip_address(text)
        return True
    except ValueError:
        return False


def load_geo_mapping(path) -> GeoMapping:
    path = Path(path)
    return parse_geo_mapping(path.read_text(encoding="utf-8"), str(path))


def annotate_region(endpoint: ResolverEndpoint, mapping: GeoMapping,
                    resolver: Optional[Callable[[str], list]] = None) -> ResolverEndpoint:
    """Set the region from the mapping; ``resolver`` supplies addresses for CIDR rows."""
    addresses = resolver(endpoint.hostname) if resolver else ()
    return replace(endpoint, region=mapping.lookup(endpoint.hostname, addresses))


def parse_host_set(text: str) -> frozenset:
    hosts = set()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip().lower().rstrip(".")
        if line:
            hosts.add(line)
    return frozenset(hosts)


def load_host_set(path) -> frozenset:
    return parse_host_set(Path(path).read_text(encoding="utf-8"))


def tag_mainstream(endpoint: ResolverEndpoint, hosts: Optional[frozenset] = None) -> ResolverEndpoint:
    hosts = default_mainstream_hosts() if hosts is None else hosts
    return replace(endpoint, mainstream=endpoint.hostname.lower() in hosts)


def _data_text(name: str) -> str:
    return resources.files("dohscope.data").joinpath(name).read_text(encoding="utf-8")


def default_mainstream_hosts() -> frozenset:
    return parse_host_set(_data_text("mainstream_hosts.txt"))


def default_geo_mapping() -> GeoMapping:
    return parse_geo_mapping(_data_text("regions.csv"), "dohscope.data/regions.csv")


def bundled_resolver_text() -> str:
    return _data_text("resolvers.txt")


def build_catalog(resolver_text: str, mapping: Optional[GeoMapping] = None,
                  mainstream_hosts: Optional[frozenset] = None) -> ParsedCatalog:
    """Parse, then annotate region and mainstream flag on every endpoint."""
    parsed = parse_resolver_list(resolver_text)
    out = []
    for endpoint in parsed.endpoints:
        if mapping is not None:
            endpoint = annotate_region(endpoint, mapping)
        endpoint = tag_mainstream(endpoint, mainstream_hosts)
        out.append(endpoint)
    return ParsedCatalog(out, parsed.errors)


def load_catalog(resolver_list_path, geo_mapping_path=None, mainstream_set_path=None) -> ParsedCatalog:
    mapping = load_geo_mapping(geo_mapping_path) if geo_mapping_path else default_geo_mapping()
    hosts = load_host_set(mainstream_set_path) if mainstream_set_path else None
    text = Path(resolver_list_path).read_text(encoding="utf-8")
    return build_catalog(text, mapping, hosts)


def catalog_csv(endpoints: Iterable[ResolverEndpoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["url", "hostname", "region", "mainstream", "label"])
    for e in endpoints:
        writer.writerow([e.url, e.hostname, e.region.value, int(e.mainstream), e.label])
    return buf.getvalue()


def region_counts(endpoints: Iterable[ResolverEndpoint]) -> dict:
    counts = {region: 0 for region in Region}
    for e in endpoints:
        counts[e.region] += 1
    return counts
