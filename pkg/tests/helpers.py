"""Synthetic record builders and harness utilities shared by the test modules."""

import contextlib
import signal
import subprocess
import sys
import time
import warnings
from datetime import datetime, timedelta, timezone

from dohscope.ping import PingMeasurement
from dohscope.records import Record
from dohscope.transport import ErrorClass, Outcome, QueryMeasurement, TimingBreakdown

T0 = datetime(2021, 10, 15, tzinfo=timezone.utc)


def doh(url, vantage, total_ms=None, error=ErrorClass.SUCCESS, round=0, domain="google.com",
        status=None, campaign="c1", ts=None):
    if error is ErrorClass.SUCCESS:
        t = float(total_ms)
        timing = TimingBreakdown(t * 0.05, t * 0.2, t * 0.5, t * 0.9, t)
        outcome, rcode = Outcome(error), 0
    else:
        timing = TimingBreakdown(name_resolution_ms=1.0)
        if error is ErrorClass.HTTP_ERROR_STATUS and status is None:
            status = 500
        outcome, rcode = Outcome(error, "synthetic", status), None
    m = QueryMeasurement(url, vantage, domain, ts or T0 + timedelta(seconds=round), timing, outcome, rcode,
                         "h2" if rcode is not None else None, "1.3" if rcode is not None else None)
    return Record(m, campaign, round)


def ping(host, vantage, rtts=(), round=0, sent=4, method="icmp", campaign="c1"):
    m = PingMeasurement(host, vantage, T0 + timedelta(seconds=round), tuple(float(r) for r in rtts), sent,
                        method, address="192.0.2.1" if rtts else None, family="ipv4" if rtts else None)
    return Record(m, campaign, round)


def host_of(url):
    return url.split("/")[2]


# --- acceptance reporting ---

ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(number, title, bound_s):
    """Time a criterion, record PASS/FAIL with detail, and fail on overrun."""
    notes = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        ACCEPTANCE[number] = ("FAIL", title, elapsed, bound_s, "; ".join(notes + [reason]))
        print(f"criterion {number}: FAIL  {title} ({elapsed:.1f}s) {reason}")
        raise
    elapsed = time.perf_counter() - start
    status = "PASS" if elapsed < bound_s else "FAIL"
    if status == "FAIL":
        notes.append(f"runtime {elapsed:.1f}s exceeds {bound_s}s")
    ACCEPTANCE[number] = (status, title, elapsed, bound_s, "; ".join(notes))
    print(f"criterion {number}: {status}  {title} ({elapsed:.1f}s)")
    assert elapsed < bound_s, f"runtime {elapsed:.1f}s exceeds {bound_s}s"


# --- crash harness ---

def measure_cmd(config_path, *extra):
    return [sys.executable, "-m", "dohscope", "measure", "--config", str(config_path), *extra]


def kill_mid_campaign(config_path, out, min_lines, extra=(), timeout=60):
    """Start ``measure`` and SIGKILL it once ``out`` has ``min_lines`` lines."""
    proc = subprocess.Popen(measure_cmd(config_path, *extra), stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if out.exists() and out.read_bytes().count(b"\n") >= min_lines:
                break
            time.sleep(0.01)
        proc.send_signal(signal.SIGKILL)
    finally:
        proc.wait(timeout=10)


def load_tolerant(path):
    from dohscope.records import TruncatedRecordWarning, load_records

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncatedRecordWarning)
        return load_records(path)
