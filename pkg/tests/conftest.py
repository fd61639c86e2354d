import contextlib

import pytest

from dohscope.mockserver import MockBehavior, MockDohServer, make_test_pki
from dohscope.transport import TransportOptions


@pytest.fixture(scope="session")
def pki(tmp_path_factory):
    return make_test_pki(tmp_path_factory.mktemp("pki"))


@pytest.fixture
def mock_server(pki):
    """Factory: ``mock_server(**behavior_kwargs)`` starts a server torn down after the test."""
    with contextlib.ExitStack() as stack:
        def start(hostname="localhost", **kwargs):
            return stack.enter_context(MockDohServer(pki, MockBehavior(**kwargs), hostname=hostname))
        yield start


@pytest.fixture
def opts(pki):
    return TransportOptions(cafile=pki.cafile, connect_timeout=2.0, total_timeout=3.0)


@pytest.fixture
def campaign_dir(tmp_path, pki, mock_server):
    """Factory writing a resolver list and TOML config for ``n`` mock resolvers.

    Returns ``(config_path, servers)``; extra URLs (e.g. unreachable ones)
    are appended to the list verbatim.
    """
    def make(n=2, rounds=3, extra_urls=(), delay=0.0, parallelism=8, interval=0.05, **extra):
        servers = [mock_server(delay=delay) for _ in range(n)]
        urls = [s.url for s in servers] + list(extra_urls)
        (tmp_path / "resolvers.txt").write_text("\n".join(urls) + "\n")
        lines = [
            'resolver_list_path = "resolvers.txt"',
            'output_path = "out.jsonl"',
            'vantage_label = "lab"',
            f"rounds = {rounds}",
            f"round_interval = {interval}",
            f"parallelism = {parallelism}",
            *(f"{k} = {v!r}" if not isinstance(v, bool) else f"{k} = {str(v).lower()}" for k, v in extra.items()),
            "[transport]",
            f'cafile = "{pki.cafile}"',
            "connect_timeout = 2.0",
            "total_timeout = 3.0",
            "[ping]",
            "count = 2",
            "interval = 0.01",
            "timeout = 0.5",
        ]
        path = tmp_path / "campaign.toml"
        path.write_text("\n".join(lines) + "\n")
        return path, servers
    return make


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, elapsed, bound, detail = ACCEPTANCE[number]
        line = f"criterion {number}: {status}  {title}  [{elapsed:.1f}s / limit {bound}s]"
        if detail:
            line += f"  {detail}"
        terminalreporter.write_line(line)
