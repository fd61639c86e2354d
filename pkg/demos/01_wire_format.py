"""
DNS messages on the wire
========================

Build the query a DoH client POSTs, then read back a response.
"""

from dohscope import wire
from dohscope.mockserver import build_answer

q = wire.DnsQuestion("google.com", wire.TYPE_A)
msg = wire.encode_query(q, id=0, recursion_desired=True)
print(len(msg), "bytes:", msg.hex())

# header: id, flags, and the four section counts
print("header:", wire.HEADER.unpack(msg[:12]))

# the mock server's answer uses a compression pointer for the owner name
answer = build_answer(msg)
summary = wire.decode_response(answer)
print(summary)
print("matches query:", wire.response_matches(0, q, summary))

# names are compared case-insensitively
print("GOOGLE.COM matches:", wire.response_matches(0, wire.DnsQuestion("GOOGLE.COM"), summary))

try:
    wire.encode_query(wire.DnsQuestion("x" * 64 + ".com"), id=0)
except wire.InvalidName as exc:
    print("rejected:", exc)
