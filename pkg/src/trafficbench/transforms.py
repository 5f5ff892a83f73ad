"""Field-level anonymization and shortcut-removal transforms.

A :class:`TransformSpec` is an ordered list of atomic steps. Field mutations
run in the listed order, then ``strip_payload``, then checksum recomputation,
and header stripping last: checksums are computed while the pseudo-header
addresses are still available.

Randomization modes:
  per_packet           independent uniform draws for every packet
  per_flow_consistent  offsets/values derived from hash(seed, flow_uid, endpoint),
                       so a flow stays internally consistent across packets
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .codec import IPv4, IPv6, ParsedPacket, fill_checksums
from .seeding import derive_seed, stream

PER_PACKET = "per_packet"
PER_FLOW = "per_flow_consistent"

MUTATIONS = ("randomize_ip", "zero_ip", "zero_ports", "randomize_ports", "randomize_seq_ack",
             "randomize_tcp_timestamp", "randomize_ttl")
STRIPS = ("strip_ip_header", "strip_transport_header")
ATOMIC = MUTATIONS + ("strip_payload",) + STRIPS + ("recompute_checksums",)
MODAL = ("randomize_ip", "randomize_ports", "randomize_seq_ack", "randomize_tcp_timestamp", "randomize_ttl")

SCOPES = {"train": "train", "train_only": "train", "test": "test", "test_only": "test", "both": "both"}

TTL_RANGE = (32, 255)
NO_NEXT_HEADER = 59

PRESETS: dict[str, list[dict]] = {
    # removes the IP header entirely and hides ports
    "etbert": [{"op": "strip_ip_header"}, {"op": "zero_ports"}],
    # random addresses, ports set to zero
    "yatc": [{"op": "randomize_ip"}, {"op": "zero_ports"}],
    # random addresses and ports
    "trafficformer": [{"op": "randomize_ip"}, {"op": "randomize_ports"}],
    # implicit flow IDs destroyed: seq/ack and TCP timestamps
    "table5": [{"op": "randomize_seq_ack"}, {"op": "randomize_tcp_timestamp"}],
    # header ablations
    "table6-no-ip": [{"op": "zero_ip"}],
    "table6-no-header": [{"op": "strip_ip_header"}, {"op": "strip_transport_header"}],
    "table6-no-payload": [{"op": "strip_payload"}],
}


@dataclass
class Step:
    op: str
    mode: str = PER_PACKET

    def __post_init__(self) -> None:
        if self.op not in ATOMIC:
            raise ValueError(f"unknown transform {self.op!r}")
        if self.mode not in (PER_PACKET, PER_FLOW):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class TransformSpec:
    steps: list[Step] = field(default_factory=list)
    scope: str = "both"
    seed: int = 0
    recompute: bool = True  # add recompute_checksums after any mutation

    def __post_init__(self) -> None:
        self.steps = [s if isinstance(s, Step) else Step(**s) for s in self.steps]
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        self.scope = SCOPES[self.scope]
        ops = [s.op for s in self.steps]
        if "recompute_checksums" in ops and ops.index("recompute_checksums") != len(ops) - 1:
            raise ValueError("recompute_checksums must be the last step")

    @property
    def ops(self) -> list[str]:
        return [s.op for s in self.steps]

    def wants_checksums(self) -> bool:
        if "recompute_checksums" in self.ops:
            return True
        return self.recompute and any(op in MUTATIONS or op == "strip_payload" for op in self.ops)

    @classmethod
    def preset(cls, name: str, scope: str = "both", seed: int = 0, mode: str = PER_PACKET) -> TransformSpec:
        if name not in PRESETS:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        steps = [Step(d["op"], mode if d["op"] in MODAL else PER_PACKET) for d in PRESETS[name]]
        return cls(steps, scope, seed)

    @classmethod
    def from_dict(cls, d: Mapping) -> TransformSpec:
        if "preset" in d:
            return cls.preset(d["preset"], d.get("scope", "both"), d.get("seed", 0), d.get("mode", PER_PACKET))
        return cls([Step(**s) for s in d.get("steps", [])], d.get("scope", "both"), d.get("seed", 0),
                   d.get("recompute", True))

    @classmethod
    def load(cls, name_or_path: str, scope: str | None = None, seed: int | None = None) -> TransformSpec:
        """Preset name or path to a JSON spec; ``scope``/``seed`` override the file."""
        if name_or_path in PRESETS:
            d: dict = {"preset": name_or_path}
        else:
            d = json.loads(Path(name_or_path).read_text())
        if scope is not None:
            d["scope"] = scope
        if seed is not None:
            d["seed"] = seed
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {"steps": [{"op": s.op, "mode": s.mode} for s in self.steps], "scope": self.scope,
                "seed": self.seed, "recompute": self.recompute}


@dataclass
class TransformReport:
    affected: Counter = field(default_factory=Counter)
    skipped: Counter = field(default_factory=Counter)
    out_of_scope: int = 0

    def to_dict(self) -> dict:
        ops = sorted(set(self.affected) | set(self.skipped))
        return {"per_transform": {op: {"affected": self.affected[op], "skipped": self.skipped[op]} for op in ops},
                "out_of_scope": self.out_of_scope}


def _endpoint(pkt: ParsedPacket, sender: bool) -> tuple:
    net, t = pkt.net, pkt.transport
    addr = (net.src_addr if sender else net.dst_addr) if net is not None else b""
    port = getattr(t, "src_port" if sender else "dst_port", 0) if t is not None else 0
    return addr.hex(), port


class _Ctx:
    def __init__(self, spec: TransformSpec, flow_uid: int | None, rng: np.random.Generator):
        self.spec, self.flow_uid, self.rng = spec, flow_uid, rng

    def flow_value(self, op: str, *parts: object) -> int:
        return derive_seed(self.spec.seed, op, self.flow_uid, *parts)


def _randomize_ip(pkt: ParsedPacket, step: Step, ctx: _Ctx) -> bool:
    net = pkt.net
    if net is None:
        return False
    n = len(net.src_addr)
    if step.mode == PER_PACKET:
        net.src_addr = ctx.rng.bytes(n)
        net.dst_addr = ctx.rng.bytes(n)
    else:
        # an address maps to the same replacement in both directions of the flow
        for attr in ("src_addr", "dst_addr"):
            old = getattr(net, attr)
            setattr(net, attr, stream(ctx.spec.seed, "ip", ctx.flow_uid, old.hex()).bytes(n))
    return True


def _zero_ip(pkt: ParsedPacket, step: Step, ctx: _Ctx) -> bool:
    net = pkt.net
    if net is None:
        return False
    net.src_addr = bytes(len(net.src_addr))
    net.dst_addr = bytes(len(net.dst_addr))
    return True


def _has_ports(pkt: ParsedPacket) -> bool:
    return pkt.tcp is not None or pkt.udp is not None


def _zero_ports(pkt: ParsedPacket, step: Step, ctx: _Ctx) -> bool:
    if not _has_ports(pkt):
        return False
    pkt.transport.src_port = pkt.transport.dst_port = 0
    return True


def _randomize_ports(pkt: ParsedPacket, step: Step, ctx: _Ctx) -> bool:
    if not _has_ports(pkt):
        return False
    t = pkt.transport
    if step.mode == PER_PACKET:
        t.src_port, t.dst_port = (int(v) for v in ctx.rng.integers(0, 2**16, size=2))
    else:
        t.src_port = ctx.flow_value("port", *_endpoint(pkt, True)) & 0xFFFF
        t.dst_port = ctx.flow_value("port", *_endpoint(pkt, False)) & 0xFFFF
    return True


def _randomize_seq_ack(pkt: ParsedPacket, step: Step, ctx: _Ctx) -> bool:
    t = pkt.tcp
    if t is None:
        return False
    if step.mode == PER_PACKET:
        t.seq_no, t.ack_no = (int(v) for v in ctx.rng.integers(0, 2**32, size=2))
    else:
        # the sender's seq space and the receiver's (acknowledged) seq space shift by fixed offsets
        t.seq_no = (t.seq_no + ctx.flow_value("seq", *_endpoint(pkt, True))) % 2**32
        t.ack_no = (t.ack_no + ctx.flow_value("seq", *_endpoint(pkt, False))) % 2**32
    return True


def _randomize_tcp_timestamp(pkt: ParsedPacket, step: Step, ctx: _Ctx) -> bool:
    t = pkt.tcp
    if t is None or t.tsval is None:
        return False
    if step.mode == PER_PACKET:
        t.tsval, t.tsecr = (int(v) for v in ctx.rng.integers(0, 2**32, size=2))
    else:
        t.tsval = (t.tsval + ctx.flow_value("ts", *_endpoint(pkt, True))) % 2**32
        t.tsecr = (t.tsecr + ctx.flow_value("ts", *_endpoint(pkt, False))) % 2**32
    return True


def _randomize_ttl(pkt: ParsedPacket, step: Step, ctx: _Ctx) -> bool:
    net = pkt.net
    if net is None:
        return False
    lo, hi = TTL_RANGE
    if step.mode == PER_PACKET:
        ttl = int(ctx.rng.integers(lo, hi + 1))
    else:
        ttl = lo + ctx.flow_value("ttl", *_endpoint(pkt, True)) % (hi - lo + 1)
    if isinstance(net, IPv4):
        net.ttl = ttl
    else:
        net.hop_limit = ttl
    return True


def _fix_lengths(pkt: ParsedPacket) -> None:
    net = pkt.net
    body = (pkt.transport.header_len if pkt.transport is not None else 0) + len(pkt.payload)
    if isinstance(net, IPv4):
        net.total_length = net.header_len + body
    elif isinstance(net, IPv6):
        net.payload_length = len(net.ext) + body
    if pkt.udp is not None:
        pkt.udp.length = 8 + len(pkt.payload)


def strip_payload(pkt: ParsedPacket) -> bool:
    """Truncate at the payload offset and fix every length field."""
    if pkt.transport is None:
        return False
    pkt.payload = b""
    pkt.trailer = b""
    _fix_lengths(pkt)
    return True


def strip_ip_header(pkt: ParsedPacket) -> bool:
    """Drop the link and network headers; the packet now starts at the transport layer."""
    if pkt.net is None:
        return False
    pkt.stripped_proto = pkt.net.upper_protocol if pkt.transport is not None else 0
    pkt.net = None
    pkt.link = "stripped"
    pkt.link_header = b""
    pkt.vlan_tags = []
    pkt.ethertype = None
    pkt.trailer = b""
    return True


def _set_upper_protocol(net: IPv4 | IPv6, proto: int) -> None:
    if isinstance(net, IPv4):
        net.protocol = proto
    elif net.ext:
        # the last extension header's first byte names the upper layer; walk the chain to find it
        i, nxt = 0, net.next_header
        while i < len(net.ext):
            last = i
            hlen = 8 if nxt == 44 else ((net.ext[i + 1] + 2) * 4 if nxt == 51 else (net.ext[i + 1] + 1) * 8)
            nxt = net.ext[i]
            i += hlen
        net.ext = net.ext[:last] + bytes([proto]) + net.ext[last + 1:]
    else:
        net.next_header = proto
    if isinstance(net, IPv6):
        net.upper_protocol = proto


def strip_transport_header(pkt: ParsedPacket) -> bool:
    """Drop the transport header, keeping its payload.

    If a network header remains, its upper-protocol field becomes 59 (no next
    header) so the bytes still decode consistently.
    """
    if pkt.transport is None:
        return False
    pkt.transport = None
    if pkt.net is not None:
        _set_upper_protocol(pkt.net, NO_NEXT_HEADER)
        _fix_lengths(pkt)
    else:
        pkt.stripped_proto = 0
    return True


def recompute_checksums(pkt: ParsedPacket) -> bool:
    if pkt.net is None:
        return False
    fill_checksums(pkt)
    return True


_MUTATORS = {
    "randomize_ip": _randomize_ip,
    "zero_ip": _zero_ip,
    "zero_ports": _zero_ports,
    "randomize_ports": _randomize_ports,
    "randomize_seq_ack": _randomize_seq_ack,
    "randomize_tcp_timestamp": _randomize_tcp_timestamp,
    "randomize_ttl": _randomize_ttl,
}


def apply_transforms(pkt: ParsedPacket, spec: TransformSpec, flow_uid: int | None = None,
                     rng: np.random.Generator | None = None, report: TransformReport | None = None) -> ParsedPacket:
    """Return a transformed copy of ``pkt``; the input is never modified."""
    out = pkt.copy()
    if not spec.steps:
        return out
    if rng is None:
        rng = stream(spec.seed, "transform", pkt.raw.uid)
    ctx = _Ctx(spec, flow_uid if flow_uid is not None else pkt.raw.uid, rng)
    report = report if report is not None else TransformReport()

    def count(op: str, done: bool) -> None:
        (report.affected if done else report.skipped)[op] += 1

    for step in spec.steps:
        if step.op in _MUTATORS:
            count(step.op, _MUTATORS[step.op](out, step, ctx))
    if "strip_payload" in spec.ops:
        count("strip_payload", strip_payload(out))
    if spec.wants_checksums():
        # a checksum pass is only meaningful for packets that still carry a network header
        count("recompute_checksums", recompute_checksums(out))
    for step in spec.steps:
        if step.op == "strip_ip_header":
            count(step.op, strip_ip_header(out))
        elif step.op == "strip_transport_header":
            count(step.op, strip_transport_header(out))
    if out.net is not None and "strip_transport_header" in spec.ops and spec.wants_checksums():
        fill_checksums(out)  # the network header changed after the checksum pass
    return out


def in_scope(partition: str | None, scope: str) -> bool:
    if scope == "both":
        return True
    if scope == "test":
        return partition == "test"
    return partition in ("train", "val")


def transform_corpus(packets: Sequence[ParsedPacket], spec: TransformSpec,
                     flow_of: Mapping[int, int] | None = None,
                     partition_of: Mapping[int, str] | None = None) -> tuple[list[ParsedPacket], TransformReport]:
    """Transform every in-scope packet; out-of-scope packets come back unchanged (same object)."""
    report = TransformReport()
    out = []
    for pkt in packets:
        uid = pkt.raw.uid
        part = partition_of.get(uid) if partition_of is not None else None
        if partition_of is not None and not in_scope(part, spec.scope):
            report.out_of_scope += 1
            out.append(pkt)
            continue
        flow = flow_of.get(uid) if flow_of is not None else None
        out.append(apply_transforms(pkt, spec, flow, report=report))
    return out, report


def describe_presets() -> Iterable[str]:
    for name, steps in PRESETS.items():
        yield f"{name}: " + ", ".join(s["op"] for s in steps)
