"""Availability and response-time measurement for public DNS-over-HTTPS resolvers."""

from .analysis import (
    Availability,
    NoData,
    ResolverSummary,
    availability,
    distribution_export,
    error_table,
    latency_ratio_flags,
    median_response_time,
    rank_resolvers,
    regional_comparison,
    summarize,
)
from .campaign import CampaignConfig, load_config, run_campaign
from .catalog import (
    GeoMapping,
    Region,
    ResolverEndpoint,
    annotate_region,
    parse_resolver_list,
    tag_mainstream,
)
from .ping import PingMeasurement, PingOptions, ping_host, tcp_rtt_fallback
from .records import Record, load_records, persist_record
from .transport import (
    ErrorClass,
    QueryMeasurement,
    TimingBreakdown,
    TransportOptions,
    classify_failure,
    measure_doh_query,
    negotiate_protocols,
)
from .wire import DnsQuestion, decode_response, encode_query, response_matches

__version__ = "0.1.0"
