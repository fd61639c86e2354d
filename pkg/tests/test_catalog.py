import pytest

from dohscope import catalog as cat
from dohscope.catalog import Region

UNRESPONSIVE = [
    "dns1.dnscrypt.ca", "dns2.dnscrypt.ca", "doh.cleanbrowsing.org", "doh.post-factum.tk",
    "doh.linuxsec.org", "doh.tiar.app", "jp.tiar.app", "doh.appliedprivacy.net",
    "doh.bortzmeyer.fr", "doh.chewbacca.meganerd.nl", "doh.powerdns.org",
]


@pytest.fixture(scope="module")
def bundled():
    return cat.build_catalog(cat.bundled_resolver_text(), cat.default_geo_mapping())


def url_lines(text):
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def test_bundled_list_has_repeats():
    lines = url_lines(cat.bundled_resolver_text())
    assert len(lines) == 76
    assert lines.count("https://doh.cleanbrowsing.org/dns-query") == 3
    assert lines.count("https://dns9.quad9.net/dns-query") == 2


def test_bundled_list_deduplicates(bundled):
    assert not bundled.errors
    urls = [e.url for e in bundled.endpoints]
    assert len(urls) == len(set(urls)) == 70
    assert len(set(url_lines(cat.bundled_resolver_text()))) == 70


def test_dedup_keeps_every_hostname(bundled):
    raw_hosts = {ln.split("/")[2].lower() for ln in url_lines(cat.bundled_resolver_text())}
    assert {e.hostname for e in bundled.endpoints} == raw_hosts


def test_unresponsive_hosts_present(bundled):
    hosts = {e.hostname for e in bundled.endpoints}
    assert set(UNRESPONSIVE) <= hosts


def test_bundled_regions_cover_everything(bundled):
    counts = cat.region_counts(bundled.endpoints)
    assert counts[Region.UNKNOWN] == 0
    assert sum(counts.values()) == 70


def test_http_rejected():
    parsed = cat.parse_resolver_list("http://insecure.example/dns-query\nhttps://ok.example/dns-query\n")
    assert [e.url for e in parsed.endpoints] == ["https://ok.example/dns-query"]
    assert len(parsed.errors) == 1
    err = parsed.errors[0]
    assert isinstance(err, cat.InvalidUrl)
    assert err.line_no == 1


def test_host_case_collapses():
    parsed = cat.parse_resolver_list("https://DNS.Google/dns-query\nhttps://dns.google/dns-query\n")
    assert [e.url for e in parsed.endpoints] == ["https://dns.google/dns-query"]


def test_default_port_elided_and_paths_distinct():
    parsed = cat.parse_resolver_list(
        "https://a.example:443/dns-query\n"
        "https://a.example/dns-query\n"
        "https://a.example/family\n"
        "https://a.example:8443/dns-query\n")
    assert [e.url for e in parsed.endpoints] == [
        "https://a.example/dns-query", "https://a.example/family", "https://a.example:8443/dns-query"]
    assert parsed.endpoints[2].port == 8443
    assert parsed.endpoints[1].label == "a.example/family"


def test_comments_and_blank_lines():
    text = "# header\n\n  https://x.example/dns-query  # trailing\n"
    assert [e.url for e in cat.parse_resolver_list(text).endpoints] == ["https://x.example/dns-query"]


def test_roundtrip(bundled):
    again = cat.parse_resolver_list(cat.format_resolver_list(bundled.endpoints))
    assert [e.url for e in again.endpoints] == [e.url for e in bundled.endpoints]
    assert not again.errors


def test_region_lookup():
    mapping = cat.parse_geo_mapping("key,region\ndns.google,NorthAmerica\n10.0.0.0/8,Asia\n")
    ep = cat.make_endpoint("https://dns.google/dns-query")
    assert cat.annotate_region(ep, mapping).region is Region.NORTH_AMERICA
    other = cat.make_endpoint("https://unlisted.example/dns-query")
    assert cat.annotate_region(other, mapping).region is Region.UNKNOWN
    by_net = cat.annotate_region(other, mapping, resolver=lambda host: ["10.1.2.3"])
    assert by_net.region is Region.ASIA


def test_region_lookup_is_deterministic(bundled):
    mapping = cat.default_geo_mapping()
    first = [cat.annotate_region(e, mapping).region for e in bundled.endpoints]
    assert first == [cat.annotate_region(e, mapping).region for e in bundled.endpoints]


def test_geo_mapping_metadata_and_header():
    mapping = cat.default_geo_mapping()
    assert mapping.fetched == "2021-10-20"
    with pytest.raises(ValueError):
        cat.parse_geo_mapping("host,where\na,Asia\n")


def test_mainstream_tags():
    assert cat.tag_mainstream(cat.make_endpoint("https://dns.google/dns-query")).mainstream
    assert not cat.tag_mainstream(cat.make_endpoint("https://ordns.he.net/dns-query")).mainstream


def test_empty_host_set_tags_nothing(bundled, tmp_path):
    empty = tmp_path / "hosts.txt"
    empty.write_text("")
    hosts = cat.load_host_set(empty)
    assert not any(cat.tag_mainstream(e, hosts).mainstream for e in bundled.endpoints)


def test_catalog_csv_shape(bundled):
    lines = cat.catalog_csv(bundled.endpoints).splitlines()
    assert lines[0] == "url,hostname,region,mainstream,label"
    assert len(lines) == 71
