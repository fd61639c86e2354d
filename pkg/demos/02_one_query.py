"""
Timing a single DoH query
=========================

A loopback server with a throwaway CA stands in for a public resolver.
Every query opens a fresh TCP+TLS session, so the phases add up to the
full cost a client pays.
"""

from dohscope.mockserver import MockBehavior, MockDohServer, temp_pki
from dohscope.transport import TransportOptions, build_payload, measure_doh_query

pki = temp_pki()
opts = TransportOptions(cafile=pki.cafile)
payload = build_payload("netflix.com")

with MockDohServer(pki, MockBehavior(delay=0.01)) as server:
    m = measure_doh_query(server.url, payload, opts, vantage="laptop", domain="netflix.com")

print(m.outcome.error_class.value, "rcode", m.rcode, m.negotiated_http, "TLS", m.negotiated_tls)
for phase, value in m.timing.to_dict().items():
    print(f"  {phase:<20} {value:8.2f} ms")

# the same call against misbehaving servers: each failure gets one class
for label, behavior in [("HTTP 503", MockBehavior(mode="status", status=503)),
                        ("garbage body", MockBehavior(mode="garbage")),
                        ("wrong cert", MockBehavior(wrong_cert=True)),
                        ("h2 violation", MockBehavior(mode="h2_violation"))]:
    with MockDohServer(pki, behavior) as server:
        m = measure_doh_query(server.url, payload, opts)
    print(f"{label:<14} -> {m.outcome.error_class.value}")
