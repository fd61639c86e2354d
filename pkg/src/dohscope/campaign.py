"""Measurement campaigns: rounds of DoH queries followed by a ping round per resolver."""

from __future__ import annotations

import dataclasses
import logging
import os
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import catalog as cat
from .ping import InsufficientPrivilege, PingMeasurement, PingOptions, open_icmp_socket, ping_host
from .records import Record, RecordWriter, last_round
from .transport import ConnectionPool, ErrorClass, TransportOptions, build_payload, measure_doh_query

log = logging.getLogger(__name__)

OUTPUT_ENV = "DOHSCOPE_OUTPUT"


class ConfigError(ValueError):
    """Campaign configuration is unusable."""


@dataclass
class CampaignConfig:
    resolver_list_path: str
    output_path: str
    geo_mapping_path: Optional[str] = None
    mainstream_set_path: Optional[str] = None
    domains: list = field(default_factory=lambda: ["google.com", "netflix.com"])
    vantage_label: str = "local"
    round_interval: float = 300.0
    rounds: Optional[int] = None
    duration: Optional[float] = None
    parallelism: int = 8
    campaign_id: Optional[str] = None
    resume: bool = False
    ping_enabled: bool = True
    transport: TransportOptions = field(default_factory=TransportOptions)
    ping: PingOptions = field(default_factory=PingOptions)

    def validate(self):
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if not self.domains:
            raise ConfigError("domains must be non-empty")
        if self.round_interval <= 0:
            raise ConfigError("round_interval must be > 0")
        if self.rounds is None and self.duration is None:
            raise ConfigError("one of rounds or duration is required")
        if self.rounds is not None and self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.duration is not None and self.duration <= 0:
            raise ConfigError("duration must be > 0")


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def config_from_dict(data: dict, base_dir: Optional[Path] = None) -> CampaignConfig:
    data = dict(data)
    transport = _build(TransportOptions, dict(data.pop("transport", {})), "[transport]")
    ping = _build(PingOptions, dict(data.pop("ping", {})), "[ping]")
    if base_dir is not None:
        for key in ("resolver_list_path", "geo_mapping_path", "mainstream_set_path", "output_path"):
            if data.get(key):
                p = Path(data[key])
                data[key] = str(p if p.is_absolute() else base_dir / p)
        if transport.cafile and not Path(transport.cafile).is_absolute():
            transport.cafile = str(base_dir / transport.cafile)
    if os.environ.get(OUTPUT_ENV):
        data["output_path"] = os.environ[OUTPUT_ENV]
    for key in ("resolver_list_path", "output_path"):
        if not data.get(key):
            raise ConfigError(f"missing required key {key!r}")
    config = _build(CampaignConfig, {**data, "transport": transport, "ping": ping}, "config")
    config.validate()
    return config


def load_config(path, overrides: Optional[dict] = None) -> CampaignConfig:
    """Read a TOML config; ``overrides`` (e.g. from CLI flags) win over file values."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, sub = key.split(".", 1)
            data.setdefault(section, {})[sub] = value
        else:
            data[key] = value
    return config_from_dict(data, base_dir=path.parent)


@dataclass
class CampaignSummary:
    campaign_id: str
    output_path: str
    rounds_completed: int = 0
    doh_records: int = 0
    ping_records: int = 0
    successes: int = 0
    interrupted: bool = False
    outcome_counts: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [
            f"campaign {self.campaign_id}: {self.rounds_completed} round(s) -> {self.output_path}",
            f"  doh records: {self.doh_records} ({self.successes} successful)",
            f"  ping records: {self.ping_records}",
        ]
        for name, count in sorted(self.outcome_counts.items(), key=lambda kv: (-kv[1], kv[0])):
            out.append(f"  {name}: {count}")
        if self.interrupted:
            out.append("  interrupted before the stop condition")
        return out


class _Tally:
    def __init__(self, summary: CampaignSummary):
        self.summary = summary
        self.lock = threading.Lock()

    def add(self, record: Record):
        with self.lock:
            s = self.summary
            if record.kind == "doh":
                s.doh_records += 1
                name = record.measurement.outcome.error_class.value
                s.outcome_counts[name] = s.outcome_counts.get(name, 0) + 1
                if record.measurement.outcome.error_class is ErrorClass.SUCCESS:
                    s.successes += 1
            else:
                s.ping_records += 1


def measure_resolver(endpoint: cat.ResolverEndpoint, config: CampaignConfig, emit: Callable[[Record], None],
                     campaign_id: str, round_index: int, pool: Optional[ConnectionPool] = None):
    """Run one resolver's round: every domain over DoH, then one ping round."""
    for domain in config.domains:
        payload = build_payload(domain)
        m = measure_doh_query(endpoint.url, payload, config.transport, vantage=config.vantage_label,
                              domain=domain, pool=pool)
        emit(Record(m, campaign_id, round_index))
    if config.ping_enabled:
        emit(Record(_ping(endpoint, config), campaign_id, round_index))


def _ping(endpoint: cat.ResolverEndpoint, config: CampaignConfig) -> PingMeasurement:
    opts = config.ping
    changes = {}
    if not opts.resolve and config.transport.resolve:
        changes["resolve"] = config.transport.resolve
    if opts.fallback_port is None:
        changes["fallback_port"] = endpoint.port
    if changes:
        opts = dataclasses.replace(opts, **changes)
    return ping_host(endpoint.hostname, opts, vantage=config.vantage_label)


def run_campaign(config: CampaignConfig, *, stop_event: Optional[threading.Event] = None,
                 endpoints: Optional[list] = None) -> CampaignSummary:
    """Execute rounds until the stop condition; every record is appended to ``config.output_path``.

    Per round, each resolver's chain runs on one worker (at most
    ``parallelism`` resolvers in flight). The output is fsynced before the
    round counts as complete.
    """
    config.validate()
    if endpoints is None:
        try:
            parsed = cat.load_catalog(config.resolver_list_path, config.geo_mapping_path,
                                      config.mainstream_set_path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load catalog: {exc}") from None
        endpoints = parsed.endpoints
    if not endpoints:
        raise ConfigError("resolver catalog is empty")
    if config.ping_enabled and not config.ping.fallback:
        _check_icmp_privilege()

    campaign_id = config.campaign_id or uuid.uuid4().hex[:12]
    first_round = 0
    if config.resume:
        first_round = last_round(config.output_path, campaign_id) + 1
    try:
        writer = RecordWriter(config.output_path)
    except OSError as exc:
        raise ConfigError(f"cannot open output {config.output_path}: {exc}") from None

    summary = CampaignSummary(campaign_id, config.output_path)
    tally = _Tally(summary)
    stop_event = stop_event or threading.Event()
    pool = ConnectionPool() if config.transport.reuse else None

    def emit(record: Record):
        writer.write(record)
        tally.add(record)

    started = time.monotonic()
    round_index = first_round
    executor = ThreadPoolExecutor(max_workers=config.parallelism, thread_name_prefix="resolver")
    try:
        while True:
            round_start = time.monotonic()
            log.info("round %d: %d resolvers", round_index, len(endpoints))
            futures = [executor.submit(measure_resolver, e, config, emit, campaign_id, round_index, pool)
                       for e in endpoints]
            wait(futures)
            for f in futures:
                if f.exception() is not None:
                    raise f.exception()
            writer.sync()
            summary.rounds_completed += 1
            log.info("round %d complete", round_index)
            round_index += 1
            if config.rounds is not None and summary.rounds_completed >= config.rounds:
                break
            next_start = round_start + config.round_interval
            if config.duration is not None and next_start - started >= config.duration:
                break
            if stop_event.wait(max(next_start - time.monotonic(), 0.0)):
                summary.interrupted = True
                break
    except KeyboardInterrupt:
        summary.interrupted = True
        log.warning("interrupted; flushing completed records")
    finally:
        executor.shutdown(wait=True, cancel_futures=True)
        writer.close()
        if pool is not None:
            pool.close()
    return summary


def _check_icmp_privilege():
    try:
        sock, _ = open_icmp_socket()
        sock.close()
    except PermissionError as exc:
        raise InsufficientPrivilege(
            "ICMP probes need a raw or datagram ICMP socket; run with privileges "
            "or set ping.fallback = true") from exc
