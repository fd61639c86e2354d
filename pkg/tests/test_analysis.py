import csv
import io
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import doh, host_of, ping
from reference_data import (
    ASIA_MEDIANS,
    ERROR_COUNTS,
    ERROR_TABLE,
    EUROPE_MEDIANS,
    UNRESPONSIVE_HOSTS,
    VANTAGES,
)
from dohscope import analysis as an
from dohscope import catalog as cat
from dohscope.catalog import Region
from dohscope.transport import ErrorClass


def around(target, n, rng, spread=0.5):
    """``n`` (odd) samples whose median is exactly ``target``."""
    half = n // 2
    low = [target * (1 - spread * rng.random()) for _ in range(half)]
    high = [target * (1 + spread * rng.random()) for _ in range(half)]
    return low + [target] + high


def oracle_median(values):
    s = sorted(values)
    n = len(s)
    mid = n // 2
    return s[mid] if n % 2 else (s[mid - 1] + s[mid]) / 2


@pytest.fixture(scope="module")
def bundled():
    return cat.build_catalog(cat.bundled_resolver_text(), cat.default_geo_mapping()).endpoints


# --- medians ---

def test_median_examples():
    recs = [doh("u", "v", t) for t in (1, 2, 3)]
    assert an.median_response_time(recs, "u", "v") == 2
    recs = [doh("u", "v", t) for t in (10, 20, 30, 40)]
    assert an.median_response_time(recs, "u", "v") == 25


def test_median_ignores_failures():
    recs = [doh("u", "v", 5), doh("u", "v", error=ErrorClass.SSL_TIMEOUT), doh("u", "v", 7)]
    assert an.median_response_time(recs, "u", "v") == 6


def test_median_no_data():
    with pytest.raises(an.NoData):
        an.median_response_time([doh("u", "v", error=ErrorClass.OTHER_ERROR)], "u", "v")
    with pytest.raises(an.NoData):
        an.median_response_time([], "u", "v")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(min_value=0, max_value=1e6, allow_nan=False), min_size=1, max_size=1000))
def test_median_matches_oracle(values):
    recs = [doh("u", "v", x) for x in values]
    assert an.median_response_time(recs, "u", "v") == oracle_median(values)


def test_twnic_medians():
    rng = random.Random(3)
    url = "https://dns.twnic.tw/dns-query"
    seoul, frankfurt = ASIA_MEDIANS[url]
    recs = [doh(url, "Seoul", t) for t in around(seoul, 101, rng)]
    recs += [doh(url, "Frankfurt", t) for t in around(frankfurt, 51, rng)]
    recs += [doh(url, "Seoul", error=ErrorClass.COULD_NOT_CONNECT) for _ in range(5)]
    assert an.median_response_time(recs, url, "Seoul") == pytest.approx(31_606.61, abs=1e-9)
    assert an.median_response_time(recs, url, "Frankfurt") == pytest.approx(32_319.90, abs=1e-9)


# --- availability ---

def test_availability_definitions():
    fails = [doh("u", "v", error=ErrorClass.COULD_NOT_CONNECT) for _ in range(10)]
    assert an.availability(fails, "u", "v") is an.Availability.UNRESPONSIVE
    mixed = [doh("u", "v", error=ErrorClass.OTHER_ERROR) for _ in range(99)] + [doh("u", "v", 12)]
    assert an.availability(mixed, "u", "v") is an.Availability.AVAILABLE
    with pytest.raises(an.NoData):
        an.availability(mixed, "u", "elsewhere")


def test_eleven_unresponsive(bundled):
    rng = random.Random(11)
    dead = {e.url for e in bundled if e.hostname in UNRESPONSIVE_HOSTS}
    assert {host_of(u) for u in dead} == set(UNRESPONSIVE_HOSTS)
    errors = [c for c in ErrorClass if c is not ErrorClass.SUCCESS]
    recs = []
    for e in bundled:
        for vantage in VANTAGES:
            for i in range(6):
                if e.url in dead or i == 0 and rng.random() < 0.3:
                    recs.append(doh(e.url, vantage, error=rng.choice(errors), round=i))
                else:
                    recs.append(doh(e.url, vantage, rng.uniform(20, 900), round=i))
    assert set(an.unresponsive_everywhere(recs)) == dead
    for url in dead:
        for vantage in VANTAGES:
            assert an.availability(recs, url, vantage) is an.Availability.UNRESPONSIVE
    summaries = an.summarize(recs, bundled)
    for vantage in VANTAGES:
        ranked = {s.resolver_url for s in an.rank_resolvers(summaries, vantage, k=100)}
        assert not ranked & dead
    flagged = an.latency_ratio_flags(summaries)
    assert not {f.resolver_url for f in flagged.flagged + flagged.within} & dead


# --- error table ---

def test_error_table_reference_counts():
    rows = an.error_table_from_counts(ERROR_COUNTS)
    assert [(r.label, r.count, r.percent_text) for r in rows] == ERROR_TABLE
    assert sum(ERROR_COUNTS.values()) == 675_378


def test_error_table_reference_fractions_independently():
    total = sum(ERROR_COUNTS.values())
    assert round(100 * 47_377 / total, 1) == 7.0
    assert round(100 * 531_528 / total, 1) == 78.7
    assert round(100 * (total - 531_528) / total, 1) == 21.3


def test_error_table_single_success():
    rows = an.error_table([doh("u", "v", 1)])
    assert [(r.label, r.count, r.percent_text) for r in rows] == [
        ("Successful Responses", 1, "100%"), ("All Errors", 0, "0%")]


def test_error_table_quarter():
    recs = [doh("u", "v", error=ErrorClass.COULD_NOT_CONNECT)] + [doh("u", "v", 1) for _ in range(3)]
    rows = {r.label: r.percent_text for r in an.error_table(recs)}
    assert rows["Couldn't Connect to Server"] == "25%"
    assert rows["Successful Responses"] == "75%"


def test_error_table_empty():
    assert an.error_table([]) == []


def test_error_table_ignores_pings():
    rows = an.error_table([doh("u", "v", 1), ping("u", "v", [])])
    assert rows[-2].count == 1 and rows[-1].count == 0


@pytest.mark.parametrize("fraction,text", [(0.0, "0%"), (0.0004, "<1%"), (0.00049, "<1%"), (0.0005, "0.1%"),
                                            (0.0051, "0.5%"), (0.07, "7%"), (0.787, "78.7%"), (1.0, "100%")])
def test_format_percent(fraction, text):
    assert an.format_percent(fraction, 0 if fraction == 0 else 1) == text


def test_render_error_table_layout():
    text = an.render_error_table(an.error_table_from_counts(ERROR_COUNTS))
    lines = text.splitlines()
    assert lines[0].startswith("Error")
    assert "47,377" in lines[1] and lines[1].rstrip().endswith("7%")
    assert any(set(ln) == {"-"} for ln in lines)
    assert lines[-1].startswith("All Errors")


# --- summaries and conservation ---

def random_dataset(seed, n_resolvers=5, vantages=VANTAGES, max_attempts=60):
    rng = random.Random(seed)
    errors = [c for c in ErrorClass if c is not ErrorClass.SUCCESS]
    recs = []
    for i in range(n_resolvers):
        url = f"https://r{i}.example/dns-query"
        for vantage in vantages:
            for j in range(rng.randrange(1, max_attempts)):
                if rng.random() < 0.2:
                    recs.append(doh(url, vantage, error=rng.choice(errors), round=j))
                else:
                    recs.append(doh(url, vantage, rng.lognormvariate(5, 1), round=j))
                if rng.random() < 0.5:
                    rtts = [rng.uniform(1, 300) for _ in range(rng.randrange(5))]
                    recs.append(ping(host_of(url), vantage, rtts, round=j))
    return recs


@pytest.mark.parametrize("seed", range(5))
def test_conservation(seed):
    recs = random_dataset(seed)
    summaries = an.summarize(recs)
    for s in summaries:
        assert s.successes + sum(s.error_histogram.values()) == s.total_attempts
        assert s.available == (s.successes >= 1)
        assert (s.ratio is not None) == (s.median_response_ms is not None and s.median_rtt_ms is not None
                                          and s.median_rtt_ms > 0)
    rows = an.error_table(recs)
    assert rows[-1].count + rows[-2].count == sum(s.total_attempts for s in summaries)
    assert rows[-2].count == sum(s.successes for s in summaries)


def test_summary_rtt_uses_round_averages_icmp_only():
    url = "https://a.example/dns-query"
    recs = [doh(url, "v", 100),
            ping("a.example", "v", [10, 30]),          # average 20
            ping("a.example", "v", [40]),              # average 40
            ping("a.example", "v", []),                # no reply: skipped
            ping("a.example", "v", [1], method="tcp-fallback"),
            ping("a.example", "other", [999])]
    (s,) = an.summarize(recs)
    assert s.median_rtt_ms == 30
    assert s.ratio == pytest.approx(100 / 30)


def test_summaries_are_deterministic():
    recs = random_dataset(9)
    shuffled = recs[:]
    random.Random(1).shuffle(shuffled)
    assert an.summarize(recs) == an.summarize(shuffled)
    assert an.summaries_csv(an.summarize(recs)) == an.summaries_csv(an.summarize(shuffled))


# --- ratio flags ---

def xfinity_records():
    url = "https://doh.xfinity.com/dns-query"
    rng = random.Random(5)
    recs = [doh(url, "Ohio", t) for t in around(872.0, 41, rng)]
    recs += [ping("doh.xfinity.com", "Ohio", [r] * 4) for r in around(166.0, 41, rng, spread=0.2)]
    return recs


def test_xfinity_flagged():
    report = an.latency_ratio_flags(an.summarize(xfinity_records()))
    (flag,) = report.flagged
    assert flag.resolver_url == "https://doh.xfinity.com/dns-query"
    assert flag.median_response_ms == 872.0 and flag.median_rtt_ms == 166.0
    assert flag.ratio == pytest.approx(5.25, abs=0.01)


def test_ratio_three_not_flagged():
    recs = [doh("https://a.example/dns-query", "v", 30), ping("a.example", "v", [10])]
    report = an.latency_ratio_flags(an.summarize(recs))
    assert not report.flagged
    assert report.within[0].ratio == 3.0


def test_ratio_exactly_threshold_not_flagged():
    recs = [doh("https://a.example/dns-query", "v", 40), ping("a.example", "v", [10])]
    assert not an.latency_ratio_flags(an.summarize(recs)).flagged


def test_no_ping_replies_unratable():
    recs = [doh("https://a.example/dns-query", "v", 30), ping("a.example", "v", [])]
    report = an.latency_ratio_flags(an.summarize(recs))
    assert report.unratable == [("https://a.example/dns-query", "v")]
    assert not report.flagged and not report.within


# --- regional comparison ---

def regional_records(rng):
    recs = []
    for url, (seoul, frankfurt) in ASIA_MEDIANS.items():
        recs += [doh(url, "Seoul", t) for t in around(seoul, 31, rng)]
        recs += [doh(url, "Frankfurt", t) for t in around(frankfurt, 31, rng)]
    for url, frankfurt, seoul in EUROPE_MEDIANS:
        recs += [doh(url, "Frankfurt", t) for t in around(frankfurt, 31, rng)]
        recs += [doh(url, "Seoul", t) for t in around(seoul, 31, rng)]
    return recs


def test_asia_comparison(bundled):
    rows = an.regional_comparison(regional_records(random.Random(2)), bundled, Region.ASIA, "Seoul", "Frankfurt")
    assert {r.resolver_url for r in rows} == set(ASIA_MEDIANS)
    for r in rows:
        assert (r.median_a, r.median_b) == pytest.approx(ASIA_MEDIANS[r.resolver_url])
    diffs = [r.difference for r in rows]
    assert diffs == sorted(diffs, reverse=True)


def test_europe_comparison(bundled):
    rows = an.regional_comparison(regional_records(random.Random(4)), bundled, Region.EUROPE,
                                  "Frankfurt", "Seoul", k=5)
    assert [(r.resolver_url, round(r.median_a, 2), round(r.median_b, 2)) for r in rows] == EUROPE_MEDIANS
    dnsforge = rows[3]
    assert (dnsforge.median_a, dnsforge.median_b) == pytest.approx((31.86, 1_043.03))


def test_comparison_ties_and_clamping():
    eps = [cat.ResolverEndpoint(f"https://{n}.example/dns-query", f"{n}.example", Region.EUROPE)
           for n in ("b", "a", "c")]
    recs = []
    for e in eps:
        recs += [doh(e.url, "X", 10), doh(e.url, "Y", 10)]
    rows = an.regional_comparison(recs, eps, Region.EUROPE, "X", "Y", k=10)
    assert [r.resolver_url for r in rows] == sorted(e.url for e in eps)
    assert all(r.difference == 0 for r in rows)
    with pytest.raises(an.NoData):
        an.regional_comparison(recs, eps, Region.ASIA, "X", "Y")


# --- ranking ---

def fake_summary(url, median, vantage="v", successes=1):
    return an.ResolverSummary(url, vantage, 1, successes, {}, median, None)


def test_rank_examples():
    summaries = [fake_summary("a", 10), fake_summary("b", 5), fake_summary("c", 20)]
    assert [s.resolver_url for s in an.rank_resolvers(summaries, "v", 2)] == ["b", "a"]
    assert an.rank_resolvers(summaries, "v", 0) == []
    tied = [fake_summary("z", 1), fake_summary("y", 1)]
    assert [s.resolver_url for s in an.rank_resolvers(tied, "v")] == ["y", "z"]
    with pytest.raises(an.NoData):
        an.rank_resolvers(summaries, "nowhere")


def test_ordns_beats_google_and_cloudflare_everywhere(bundled):
    rng = random.Random(8)
    medians = {
        "https://ordns.he.net/dns-query": {"Ohio": 18.0, "Seoul": 21.0, "Frankfurt": 16.0},
        "https://dns.google/dns-query": {"Ohio": 24.0, "Seoul": 33.0, "Frankfurt": 27.0},
        "https://dns.cloudflare.com/dns-query": {"Ohio": 26.0, "Seoul": 29.0, "Frankfurt": 22.0},
        "https://doh.ffmuc.net/dns-query": {"Ohio": 210.0, "Seoul": 1309.0, "Frankfurt": 109.0},
    }
    recs = []
    for url, per_vantage in medians.items():
        for vantage, m in per_vantage.items():
            recs += [doh(url, vantage, t) for t in around(m, 21, rng, spread=0.3)]
    summaries = an.summarize(recs, bundled)
    for vantage in VANTAGES:
        order = [s.resolver_url for s in an.rank_resolvers(summaries, vantage, k=5)]
        he = order.index("https://ordns.he.net/dns-query")
        assert he < order.index("https://dns.google/dns-query")
        assert he < order.index("https://dns.cloudflare.com/dns-query")
    by_url = {s.resolver_url: s for s in summaries}
    assert by_url["https://dns.google/dns-query"].mainstream
    assert not by_url["https://ordns.he.net/dns-query"].mainstream


# --- distribution export ---

def test_truncation_example():
    recs = [doh("https://a.example/dns-query", "v", t) for t in (600, 100, 400)]
    (s,) = an.distribution_export(recs)
    assert s.samples.tolist() == [100, 400]
    assert s.overflow == 1
    assert s.cdf.tolist() == pytest.approx([1 / 3, 2 / 3])
    (full,) = an.distribution_export(recs, truncate_at=None)
    assert full.samples.tolist() == [100, 400, 600] and full.overflow == 0


def test_ping_series_and_flags(bundled):
    url = "https://dns.google/dns-query"
    recs = [doh(url, "Ohio", 20), ping("dns.google", "Ohio", [5, 7]), doh("https://ordns.he.net/dns-query", "Ohio", 9)]
    series = an.distribution_export(recs, bundled)
    kinds = {(s.resolver_url, s.series) for s in series}
    assert kinds == {(url, "dns"), (url, "ping"), ("https://ordns.he.net/dns-query", "dns")}
    assert all(s.mainstream == (s.resolver_url == url) for s in series)
    assert all(s.region is not Region.UNKNOWN for s in series)


@pytest.mark.parametrize("seed", range(3))
def test_distribution_csv_recount(seed):
    recs = random_dataset(seed, n_resolvers=3)
    series = an.distribution_export(recs)
    text = an.distribution_csv(series)
    rows = list(csv.DictReader(io.StringIO(text)))
    # independent recount straight from the records
    expected = 0
    for r in recs:
        m = r.measurement
        if r.kind == "doh" and m.ok and m.timing.total_ms <= 500:
            expected += 1
    for host in {host_of(r.measurement.resolver_url) for r in recs if r.kind == "doh"}:
        for vantage in VANTAGES:
            has_dns = any(r.kind == "doh" and r.measurement.ok and r.measurement.vantage == vantage
                          and host_of(r.measurement.resolver_url) == host for r in recs)
            if has_dns:
                expected += sum(1 for r in recs if r.kind == "ping" and r.measurement.host == host
                                and r.measurement.vantage == vantage and r.measurement.received
                                and r.measurement.average_ms <= 500)
    assert len(rows) == expected
    assert text.count("\n") == expected + 1
    assert list(rows[0]) == an.DISTRIBUTION_COLUMNS


@pytest.mark.parametrize("seed", range(5))
def test_truncation_conservation(seed):
    recs = random_dataset(seed)
    for s in an.distribution_export(recs):
        if s.series == "dns":
            assert s.total == len(an.success_times(recs, s.resolver_url, s.vantage))
        assert np.all(s.samples <= 500)
        assert np.all(np.diff(s.samples) >= 0)


# --- csv writers ---

def test_csv_writers_have_headers():
    recs = xfinity_records()
    summaries = an.summarize(recs)
    assert an.summaries_csv(summaries).startswith("vantage,resolver_url,region,mainstream")
    assert an.error_table_csv(an.error_table(recs)).splitlines()[0] == "error,count,percent"
    assert an.ranking_csv(an.rank_resolvers(summaries, "Ohio")).splitlines()[1].startswith("1,Ohio,")
    flags = an.flags_csv(an.latency_ratio_flags(summaries), 4.0).splitlines()
    assert flags[1].endswith(",flagged")
