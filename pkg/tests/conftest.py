import json
import logging
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")

logging.getLogger("scapy").setLevel(logging.ERROR)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def real_headers():
    return json.loads((FIXTURES / "real_headers.json").read_text())


@pytest.fixture(scope="session")
def real_frames():
    from trafficbench.codec import read_pcap

    return read_pcap((FIXTURES / "real_frames.pcap").read_bytes(), trace_id="real")


def scapy_bytes(pkt) -> bytes:
    """Serialize a scapy packet (scapy computes lengths and checksums itself)."""
    return bytes(pkt)


def raw_from(frame: bytes, linktype: int = 1, uid: int = 0, trace_id: str = "t"):
    from trafficbench.codec import RawPacket

    return RawPacket(uid=uid, ts_sec=0, ts_frac=0, data=frame, trace_id=trace_id, linktype=linktype)


def synth_packets(spec):
    """Decoded packets and trace labels for a synthetic corpus."""
    from trafficbench.codec import decode, read_pcap
    from trafficbench.synth import generate_corpus

    corpus = generate_corpus(spec)
    packets, uid = [], 0
    for tid, data in corpus.traces.items():
        raws = read_pcap(data, trace_id=tid, first_uid=uid)
        uid += len(raws)
        packets += [decode(r) for r in raws]
    return packets, corpus.labels


# acceptance criteria get one PASS/FAIL line each in the terminal summary
_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, _, title = name[len("test_criterion_"):].partition("_")
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[int(number)] = (title.replace("_", " "), "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, verdict, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}" + (f"  ({detail})" if detail else ""))
