"""Command-line entry point: ``dohscope {measure,catalog,analyze,mock-server}``.

Exit codes: 0 success, 1 fatal configuration or I/O error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from . import analysis
from . import catalog as cat
from .campaign import ConfigError, load_config, run_campaign
from .ping import InsufficientPrivilege
from .records import SchemaError, load_many

log = logging.getLogger("dohscope")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_USAGE = 2


class Fatal(Exception):
    pass


def _write(text: str, output):
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
        if text and not text.endswith("\n"):
            sys.stdout.write("\n")


def cmd_measure(args) -> int:
    overrides = {
        "output_path": args.output,
        "vantage_label": args.vantage,
        "rounds": args.rounds,
        "duration": args.duration,
        "round_interval": args.interval,
        "parallelism": args.parallelism,
        "campaign_id": args.campaign_id,
        "resume": True if args.resume else None,
        "domains": args.domain,
        "ping_enabled": False if args.no_ping else None,
        "ping.fallback": True if args.ping_fallback else None,
        "transport.method": args.method,
        "transport.cafile": args.cafile,
    }
    config = load_config(args.config, overrides)
    stop = threading.Event()
    previous = signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        summary = run_campaign(config, stop_event=stop)
    finally:
        signal.signal(signal.SIGTERM, previous)
    print("\n".join(summary.lines()))
    return EXIT_OK


def _load_endpoints(args):
    if not getattr(args, "resolvers", None):
        return []
    mapping = cat.load_geo_mapping(args.geo) if args.geo else cat.default_geo_mapping()
    hosts = cat.load_host_set(args.mainstream) if args.mainstream else None
    text = Path(args.resolvers).read_text(encoding="utf-8")
    return cat.build_catalog(text, mapping, hosts).endpoints


def cmd_catalog(args) -> int:
    if args.resolvers:
        text = Path(args.resolvers).read_text(encoding="utf-8")
    else:
        text = cat.bundled_resolver_text()
    mapping = cat.load_geo_mapping(args.geo) if args.geo else cat.default_geo_mapping()
    hosts = cat.load_host_set(args.mainstream) if args.mainstream else None
    parsed = cat.build_catalog(text, mapping, hosts)
    for err in parsed.errors:
        print(f"invalid: {err}", file=sys.stderr)
    _write(cat.catalog_csv(parsed.endpoints), args.output)
    counts = cat.region_counts(parsed.endpoints)
    print(f"{len(parsed.endpoints)} resolvers; " + ", ".join(f"{r.value}={n}" for r, n in counts.items()),
          file=sys.stderr)
    return EXIT_OK


def cmd_analyze(args) -> int:
    records = load_many(args.input)
    endpoints = _load_endpoints(args)
    what = args.analysis
    if what == "errors":
        rows = analysis.error_table(records)
        text = analysis.error_table_csv(rows) if args.csv else analysis.render_error_table(rows) + "\n"
    elif what == "summary":
        text = analysis.summaries_csv(analysis.summarize(records, endpoints))
    elif what == "availability":
        lines = ["vantage,resolver_url,availability"]
        for s in analysis.summarize(records, endpoints):
            lines.append(f"{s.vantage},{s.resolver_url},{'available' if s.available else 'unresponsive'}")
        text = "\n".join(lines) + "\n"
    elif what == "compare":
        region = cat.Region.parse(args.region)
        rows = analysis.regional_comparison(records, endpoints, region, args.vantage_a, args.vantage_b, args.k)
        text = analysis.comparison_csv(rows, args.vantage_a, args.vantage_b)
    elif what == "rank":
        rows = analysis.rank_resolvers(analysis.summarize(records, endpoints), args.vantage, args.k)
        text = analysis.ranking_csv(rows)
    elif what == "flags":
        report = analysis.latency_ratio_flags(analysis.summarize(records, endpoints), args.threshold)
        text = analysis.flags_csv(report, args.threshold)
    elif what == "distribution":
        truncate = None if args.no_truncate else args.truncate_at
        text = analysis.distribution_csv(analysis.distribution_export(records, endpoints, truncate))
    else:  # pragma: no cover - argparse restricts choices
        raise Fatal(f"unknown analysis {what}")
    _write(text, args.output)
    return EXIT_OK


def cmd_mock_server(args) -> int:
    from .mockserver import MockBehavior, MockDohServer, make_test_pki

    pki = make_test_pki(args.pki_dir)
    alpn = ("http/1.1",) if args.http1_only else ("h2", "http/1.1")
    behavior = MockBehavior(mode=args.mode, status=args.status, delay=args.delay / 1000.0, alpn=alpn,
                            tls_min=args.tls_min, tls_max=args.tls_max, wrong_cert=args.wrong_cert)
    server = MockDohServer(pki, behavior, port=args.port)
    print(f"url={server.url}", flush=True)
    print(f"cafile={pki.cafile}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dohscope", description="DoH resolver availability and latency measurement")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("measure", help="run a measurement campaign")
    p.add_argument("--config", required=True, help="TOML campaign config")
    p.add_argument("--output", help="JSONL output (overrides config; env DOHSCOPE_OUTPUT wins over both)")
    p.add_argument("--vantage")
    p.add_argument("--rounds", type=int)
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p.add_argument("--interval", type=float, help="seconds between round starts")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--campaign-id")
    p.add_argument("--resume", action="store_true", help="continue round numbering of --campaign-id")
    p.add_argument("--domain", action="append", help="query domain (repeatable)")
    p.add_argument("--method", choices=["POST", "GET"])
    p.add_argument("--cafile")
    p.add_argument("--no-ping", action="store_true")
    p.add_argument("--ping-fallback", action="store_true", help="use TCP connect RTT when ICMP is unavailable")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("catalog", help="parse, annotate and print a resolver list as CSV")
    p.add_argument("--resolvers", help="resolver list (default: bundled list)")
    p.add_argument("--geo", help="CSV key,region mapping (default: bundled)")
    p.add_argument("--mainstream", help="mainstream hostname set (default: bundled)")
    p.add_argument("--output")
    p.set_defaults(func=cmd_catalog)

    p = sub.add_parser("analyze", help="derive tables and plot data from JSONL records")
    asub = p.add_subparsers(dest="analysis", required=True)

    def common(ap, catalog=True):
        ap.add_argument("--input", required=True, action="append", help="JSONL record file (repeatable)")
        ap.add_argument("--output")
        if catalog:
            ap.add_argument("--resolvers", help="resolver list for region/mainstream annotation")
            ap.add_argument("--geo")
            ap.add_argument("--mainstream")
        return ap

    ap = common(asub.add_parser("errors", help="error table"), catalog=False)
    ap.add_argument("--csv", action="store_true")
    common(asub.add_parser("summary", help="per resolver/vantage summary"))
    common(asub.add_parser("availability", help="available/unresponsive verdicts"))
    ap = common(asub.add_parser("compare", help="largest median differences between two vantages"))
    ap.add_argument("--region", required=True)
    ap.add_argument("--vantage-a", required=True)
    ap.add_argument("--vantage-b", required=True)
    ap.add_argument("-k", type=int, default=5)
    ap = common(asub.add_parser("rank", help="fastest resolvers at a vantage"))
    ap.add_argument("--vantage", required=True)
    ap.add_argument("-k", type=int, default=5)
    ap = common(asub.add_parser("flags", help="response time vs RTT ratio flags"))
    ap.add_argument("--threshold", type=float, default=4.0)
    ap = common(asub.add_parser("distribution", help="sorted samples and CDF points"))
    ap.add_argument("--truncate-at", type=float, default=500.0)
    ap.add_argument("--no-truncate", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("mock-server", help="run a local fault-injecting DoH server")
    from .mockserver import MODES

    p.add_argument("--mode", choices=MODES, default="ok")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--status", type=int, default=500)
    p.add_argument("--delay", type=float, default=0.0, help="milliseconds before each response")
    p.add_argument("--tls-min", default="1.2", choices=["1.0", "1.1", "1.2", "1.3"])
    p.add_argument("--tls-max", default="1.3", choices=["1.0", "1.1", "1.2", "1.3"])
    p.add_argument("--http1-only", action="store_true")
    p.add_argument("--wrong-cert", action="store_true")
    p.add_argument("--pki-dir", default="mock-pki")
    p.set_defaults(func=cmd_mock_server)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, InsufficientPrivilege, Fatal, OSError, ValueError, analysis.NoData) as exc:
        print(f"dohscope: error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
