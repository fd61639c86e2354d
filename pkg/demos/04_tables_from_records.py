"""
Tables and plot data from records
=================================

Analysis works on plain record lists, so synthetic data is enough to see
every output: the error table, regional medians, ratio flags, and the
truncated distribution export.
"""

import random
from datetime import datetime, timezone

import numpy as np

from dohscope import analysis as an
from dohscope import catalog as cat
from dohscope.ping import PingMeasurement
from dohscope.records import Record
from dohscope.transport import ErrorClass, Outcome, QueryMeasurement, TimingBreakdown

rng = np.random.default_rng(1)
now = datetime.now(timezone.utc)
endpoints = cat.build_catalog(cat.bundled_resolver_text(), cat.default_geo_mapping()).endpoints
chosen = [e for e in endpoints if e.hostname in ("dns.google", "ordns.he.net", "dnsforge.de", "doh.xfinity.com")]
typical = {"dns.google": 30, "ordns.he.net": 25, "dnsforge.de": 160, "doh.xfinity.com": 870}
rtt = {"dns.google": 8, "ordns.he.net": 7, "dnsforge.de": 90, "doh.xfinity.com": 166}


def query(e, ms=None, error=ErrorClass.SUCCESS):
    timing = TimingBreakdown(total_ms=ms) if ms is not None else TimingBreakdown()
    m = QueryMeasurement(e.url, "Ohio", "google.com", now, timing, Outcome(error), 0 if ms else None)
    return Record(m, "demo", 0)


records = []
for e in chosen:
    for ms in rng.lognormal(np.log(typical[e.hostname]), 0.4, 200):
        records.append(query(e, float(ms)) if rng.random() > 0.05 else query(e, error=ErrorClass.SSL_CONNECT_ERROR))
    for _ in range(50):
        rtts = tuple(float(x) for x in rng.normal(rtt[e.hostname], 1.0, 4))
        records.append(Record(PingMeasurement(e.hostname, "Ohio", now, rtts, 4), "demo", 0))

print(an.render_error_table(an.error_table(records)))

summaries = an.summarize(records, endpoints)
print("\nfastest:", [s.resolver_url for s in an.rank_resolvers(summaries, "Ohio", k=3)])

report = an.latency_ratio_flags(summaries)
for f in report.flagged:
    print(f"flagged {f.resolver_url}: {f.median_response_ms:.0f} ms vs rtt {f.median_rtt_ms:.0f} ms "
          f"(x{f.ratio:.1f})")

series = an.distribution_export(records, endpoints)
for s in series:
    print(f"{s.series:<4} {s.label:<18} kept {s.samples.size:4d}  overflow {s.overflow:4d}")

# hand the CSV to any plotting tool; cdf keeps its true height under truncation
csv_text = an.distribution_csv(series)
print(csv_text.splitlines()[0])
print(random.choice(csv_text.splitlines()[1:]))
