"""Deterministic synthetic labeled traces with controllable class signal.

Each class gets its own trace (labels by trace_id). By default every class
reuses the same pool of 5-tuples, so addresses and ports say nothing about the
class even jointly; only flow membership (seq/ack ranges, clock values) links a
packet to its class. TCP structure is plausible: random ISNs per direction,
seq/ack advancing by payload sizes, a timestamp option driven by host clocks,
and valid checksums.
"""

from __future__ import annotations

import ipaddress
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .codec import IPv4, TCP, UDP, ParsedPacket, RawPacket, fill_checksums, write_pcap
from .seeding import stream

EPOCH = 1_700_000_000
CLIENT_MAC = bytes.fromhex("020000000001")
SERVER_MAC = bytes.fromhex("020000000002")
BROADCAST = b"\xff" * 6
TCP_ACK, TCP_PSH = 0x10, 0x08
WINDOWS = (501, 502, 1024, 2048, 29200, 65535)
EXTRANEOUS = ("arp", "mdns", "ntp", "llmnr", "nbns", "ssdp", "icmp")


@dataclass
class SynthSpec:
    n_classes: int = 2
    flows_per_class: int = 4
    packets_per_flow: int = 20
    length_dist: str = "fixed"  # fixed | geometric (mean packets_per_flow, capped at max_packets)
    max_packets: int = 5000
    class_signal: str = "none"  # none | server_ip_per_class | payload_length_per_class
    seed: int = 0
    extraneous: dict[str, int] = field(default_factory=dict)
    shared_tuples: bool = True
    n_client_hosts: int = 4
    n_server_hosts: int = 4
    n_clocks: int = 4  # host clocks per side, independent of addresses
    capture_seconds: float = 60.0
    mean_gap: float = 0.2

    def __post_init__(self) -> None:
        for name in ("n_classes", "flows_per_class", "packets_per_flow", "max_packets",
                     "n_client_hosts", "n_server_hosts", "n_clocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.class_signal not in ("none", "server_ip_per_class", "payload_length_per_class"):
            raise ValueError(f"unknown class_signal {self.class_signal!r}")
        if self.length_dist not in ("fixed", "geometric"):
            raise ValueError(f"unknown length_dist {self.length_dist!r}")
        bad = set(self.extraneous) - set(EXTRANEOUS)
        if bad:
            raise ValueError(f"unsupported extraneous protocols {sorted(bad)}; choose from {EXTRANEOUS}")
        if any(n < 0 for n in self.extraneous.values()):
            raise ValueError("extraneous counts must be >= 0")

    @classmethod
    def from_json(cls, path: str | Path) -> SynthSpec:
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthCorpus:
    traces: dict[str, bytes]  # trace_id -> pcap bytes
    labels: dict[str, int]  # trace_id -> class

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for tid, data in self.traces.items():
            p = out / f"{tid}.pcap"
            p.write_bytes(data)
            paths.append(p)
        (out / "labels.json").write_text(json.dumps(self.labels, indent=1, sort_keys=True))
        return paths


def _ip(text: str) -> bytes:
    return ipaddress.IPv4Address(text).packed


def client_ip(i: int) -> bytes:
    return _ip(f"192.168.1.{10 + i}")


def server_ip(i: int) -> bytes:
    return _ip(f"10.20.0.{10 + i}")


def class_server_ip(c: int) -> bytes:
    # distinct in the third and fourth octet so one octet alone never separates all classes
    return _ip(f"172.16.{c % 256}.{(10 + 7 * c) % 250 + 1}")


def _frame(src_mac: bytes, dst_mac: bytes, net: IPv4, transport, payload: bytes) -> ParsedPacket:
    net.total_length = net.header_len + transport.header_len + len(payload)
    if isinstance(transport, UDP):
        transport.length = 8 + len(payload)
    raw = RawPacket(uid=0, ts_sec=0, ts_frac=0, data=b"\x00")
    pkt = ParsedPacket(raw, "ethernet", dst_mac + src_mac + b"\x08\x00", ethertype=0x0800, net=net,
                       transport=transport, payload=payload)
    fill_checksums(pkt)
    return pkt


def _ts_option(tsval: int, tsecr: int) -> bytes:
    return b"\x01\x01\x08\x0a" + struct.pack("!II", tsval, tsecr)


def _flow_packets(spec: SynthSpec, c: int, j: int) -> list[tuple[float, bytes]]:
    """(relative time, frame bytes) for flow ``j`` of class ``c``."""
    rng = stream(spec.seed, "synth-flow", c, j)
    if spec.length_dist == "fixed":
        n = spec.packets_per_flow
    else:
        n = int(min(rng.geometric(1.0 / spec.packets_per_flow), spec.max_packets))
    # 5-tuple: slot j is shared by every class unless tuples are made unique
    slot = j if spec.shared_tuples else c * spec.flows_per_class + j
    cip = client_ip(slot % spec.n_client_hosts)
    sip = class_server_ip(c) if spec.class_signal == "server_ip_per_class" else server_ip(slot % spec.n_server_hosts)
    cport = 49152 + (slot * 7919) % 16000
    sport = 443
    # clocks are picked by slot, never by class
    c_clock = stream(spec.seed, "synth-clock", "client", slot % spec.n_clocks).integers(0, 2**32)
    s_clock = stream(spec.seed, "synth-clock", "server", slot % spec.n_clocks).integers(0, 2**32)
    start = rng.uniform(0, spec.capture_seconds)
    c_next = int(rng.integers(0, 2**32)) + 1
    s_next = int(rng.integers(0, 2**32)) + 1
    out = []
    t = start
    last_c = int(c_clock + start * 1000) % 2**32
    last_s = int(s_clock + start * 1000) % 2**32
    for k in range(n):
        t += float(rng.exponential(spec.mean_gap)) if k else 0.0
        from_client = k == 0 or rng.random() < 0.5
        if spec.class_signal == "payload_length_per_class":
            center = 100 + (1200 * c) // max(spec.n_classes - 1, 1)
            plen = int(np.clip(center + rng.integers(-40, 41), 0, 1400))
        else:
            plen = 0 if rng.random() < 0.3 else int(rng.integers(1, 1401))
        payload = rng.bytes(plen)
        now_ms = int(t * 1000)
        if from_client:
            tsval = int(c_clock + now_ms) % 2**32
            last_c = tsval
            opts = _ts_option(tsval, last_s)
            seq, ack = c_next % 2**32, s_next % 2**32
            c_next += plen
            src, dst, sp, dp, ttl, smac, dmac = cip, sip, cport, sport, 64, CLIENT_MAC, SERVER_MAC
        else:
            tsval = int(s_clock + now_ms) % 2**32
            last_s = tsval
            opts = _ts_option(tsval, last_c)
            seq, ack = s_next % 2**32, c_next % 2**32
            s_next += plen
            src, dst, sp, dp, ttl, smac, dmac = sip, cip, sport, cport, 54, SERVER_MAC, CLIENT_MAC
        net = IPv4(4, 5, 0, 0, int(rng.integers(0, 2**16)), 0x2, 0, ttl, 6, 0, src, dst)
        flags = TCP_ACK | (TCP_PSH if plen else 0)
        tcp = TCP(sp, dp, seq, ack, 8, flags, int(rng.choice(WINDOWS)), 0, 0, opts,
                  tsval=tsval, tsecr=struct.unpack("!I", opts[8:12])[0], ts_index=2, option_kinds=(1, 1, 8))
        out.append((t, _frame(smac, dmac, net, tcp, payload).to_bytes()))
    return out


def extraneous_frame(tag: str, rng: np.random.Generator) -> bytes:
    """One frame of a link-local / management protocol, built by hand."""
    host = client_ip(int(rng.integers(0, 4)))
    if tag == "arp":
        body = struct.pack("!HHBBH6s4s6s4s", 1, 0x0800, 6, 4, 1, CLIENT_MAC, host, b"\x00" * 6, server_ip(0))
        return BROADCAST + CLIENT_MAC + b"\x08\x06" + body
    if tag == "icmp":
        from .codec import ICMP

        net = IPv4(4, 5, 0, 0, int(rng.integers(0, 2**16)), 0, 0, 64, 1, 0, host, server_ip(0))
        return _frame(CLIENT_MAC, SERVER_MAC, net, ICMP(8, 0, 0, b"\x00\x01\x00\x01"), rng.bytes(32)).to_bytes()
    port, dst = {
        "mdns": (5353, "224.0.0.251"),
        "llmnr": (5355, "224.0.0.252"),
        "nbns": (137, "192.168.1.255"),
        "ssdp": (1900, "239.255.255.250"),
        "ntp": (123, "10.20.0.1"),
    }[tag]
    net = IPv4(4, 5, 0, 0, int(rng.integers(0, 2**16)), 0, 0, 1 if tag != "ntp" else 64, 17, 0, host, _ip(dst))
    udp = UDP(port, port, 0, 1)  # nonzero so a real checksum gets filled in
    return _frame(CLIENT_MAC, BROADCAST, net, udp, rng.bytes(48)).to_bytes()


def _to_records(timed: list[tuple[float, bytes]], trace_id: str) -> list[RawPacket]:
    timed.sort(key=lambda x: x[0])
    out = []
    for i, (t, data) in enumerate(timed):
        us = int(round(t * 1e6))
        out.append(RawPacket(i, EPOCH + us // 1_000_000, (us % 1_000_000) * 1000, data, trace_id))
    return out


def _class_frames(spec: SynthSpec, c: int) -> list[tuple[float, bytes]]:
    timed = []
    for j in range(spec.flows_per_class):
        timed += _flow_packets(spec, c, j)
    # extraneous packets are dealt round-robin over class traces
    for tag in sorted(spec.extraneous):
        rng = stream(spec.seed, "synth-extra", tag, c)
        for i in range(spec.extraneous[tag]):
            if i % spec.n_classes == c:
                timed.append((float(rng.uniform(0, spec.capture_seconds)), extraneous_frame(tag, rng)))
    return timed


def trace_name(c: int) -> str:
    return f"class{c:03d}"


def generate_corpus(spec: SynthSpec) -> SynthCorpus:
    """One pcap per class; labels map trace_id -> class."""
    traces, labels = {}, {}
    for c in range(spec.n_classes):
        tid = trace_name(c)
        traces[tid] = write_pcap(_to_records(_class_frames(spec, c), tid))
        labels[tid] = c
    return SynthCorpus(traces, labels)


def tuple_key(src: bytes, sport: int, dst: bytes, dport: int, proto: int = 6) -> str:
    a, b = (src, sport), (dst, dport)
    lo, hi = (a, b) if a <= b else (b, a)
    return f"{proto}:{ipaddress.ip_address(lo[0])}:{lo[1]}-{ipaddress.ip_address(hi[0])}:{hi[1]}"


def generate_trace(spec: SynthSpec) -> tuple[bytes, dict[str, int]]:
    """Single pcap holding every class, labels keyed by direction-free 5-tuple.

    A single file cannot disambiguate shared 5-tuples, so tuples are made
    unique per flow here; prefer :func:`generate_corpus` for shortcut studies.
    """
    if spec.shared_tuples and spec.n_classes > 1:
        spec = SynthSpec(**{**spec.to_dict(), "shared_tuples": False})
    timed, labels = [], {}
    for c in range(spec.n_classes):
        frames = _class_frames(spec, c)
        timed += frames
        for j in range(spec.flows_per_class):
            slot = c * spec.flows_per_class + j
            sip = class_server_ip(c) if spec.class_signal == "server_ip_per_class" else server_ip(slot % spec.n_server_hosts)
            labels[tuple_key(client_ip(slot % spec.n_client_hosts), 49152 + (slot * 7919) % 16000, sip, 443)] = c
    return write_pcap(_to_records(timed, "synth")), labels


def label_packets(packets, tuple_labels: dict[str, int]) -> dict[int, int]:
    """packet uid -> class for packets whose 5-tuple appears in ``tuple_labels``."""
    out = {}
    for p in packets:
        net, t = p.net, p.transport
        if net is None or t is None or not hasattr(t, "src_port"):
            continue
        key = tuple_key(net.src_addr, t.src_port, net.dst_addr, t.dst_port, net.upper_protocol)
        if key in tuple_labels:
            out[p.raw.uid] = tuple_labels[key]
    return out
