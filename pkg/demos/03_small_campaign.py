"""
A miniature campaign
====================

Two loopback resolvers, two domains, three rounds. Each round queries
both domains per resolver, then pings the resolver host. Ping needs raw
socket privileges, so this falls back to TCP connect time when run
unprivileged.
"""

import os
import tempfile
from pathlib import Path

from dohscope import analysis
from dohscope.campaign import CampaignConfig, run_campaign
from dohscope.mockserver import MockBehavior, MockDohServer, temp_pki
from dohscope.ping import PingOptions
from dohscope.records import load_records
from dohscope.transport import TransportOptions

pki = temp_pki()
work = Path(tempfile.mkdtemp(prefix="dohscope-demo-"))
fast, slow = MockDohServer(pki, MockBehavior(delay=0.005)), MockDohServer(pki, MockBehavior(delay=0.06))

with fast, slow:
    (work / "resolvers.txt").write_text(f"{fast.url}\n{slow.url}\n")
    config = CampaignConfig(
        resolver_list_path=str(work / "resolvers.txt"),
        output_path=str(work / "records.jsonl"),
        vantage_label="laptop",
        rounds=3,
        round_interval=0.2,
        transport=TransportOptions(cafile=pki.cafile),
        ping=PingOptions(count=4, interval=0.01, timeout=0.5, fallback=os.geteuid() != 0),
    )
    summary = run_campaign(config)

print("\n".join(summary.lines()))

records = load_records(config.output_path)
for s in analysis.summarize(records):
    print(f"{s.resolver_url}: median {s.median_response_ms:.1f} ms over {s.successes}/{s.total_attempts}, "
          f"rtt {s.median_rtt_ms:.2f} ms")
print(analysis.render_error_table(analysis.error_table(records)))
