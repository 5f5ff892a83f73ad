"""Extraneous-protocol filtering with an auditable report.

Protocols are recognized from link/network headers and well-known ports only;
anything we cannot name confidently stays "tcp"/"udp"/"unknown" and is kept.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .codec import ParsedPacket

# group -> protocol tags, in the order of the published filter table
DEFAULT_GROUPS: dict[str, list[str]] = {
    "link-local protocols": ["llmnr", "nbns", "mdns", "lsd"],
    "network management protocols": ["icmp", "icmpv6", "dhcp", "dhcpv6", "igmp", "snmp", "arp", "cops"],
    "nat protocols": ["nat-pmp", "rsip", "stun"],
    "route management protocols": ["db-lsp", "db-lsp-disc", "pathport", "stp", "bfd echo", "bgp", "ecmp", "asap"],
    "service management protocols": ["ssdp", "lldp", "srvloc", "opa", "cbsp"],
    "real time protocols": ["rtcp"],
    "network time protocols": ["ntp"],
    "link management protocols": ["llc", "ipxsap"],
    "distributed protocols": ["thrift", "dcerpc", "rmi"],
    "security protocols": ["ocsp", "pkix-cert", "egd", "chargen", "tpm", "knet"],
    "industrial protocols": ["r-goose", "dcp-pft", "dcp-af", "vicp", "nxp 802154 sniffer", "enip", "c1222", "ax4000"],
    "remote access protocols": ["vnc", "x11", "msnms"],
    "file protocols": ["lanman", "bjnp", "spoolss", "ndps", "laplink", "bzr", "cvspserver"],
    "quake protocols": ["quake", "quake2", "quake3", "quakeworld"],
    "mobile protocols": ["gsm", "ipa", "gtp"],
    "iot management protocols": ["bat.vis", "tplink-smarthome", "coap", "mqtt"],
    "others protocols": ["tds", "bitcoin"],
}

# (transport, port) -> tag; "any" matches both TCP and UDP.
# Ports shared by two table entries are left out on purpose (ambiguous -> kept).
WELL_KNOWN_PORTS: dict[tuple[str, int], str] = {
    ("udp", 5355): "llmnr", ("tcp", 5355): "llmnr",
    ("udp", 137): "nbns",
    ("udp", 5353): "mdns",
    ("udp", 6771): "lsd",
    ("udp", 67): "dhcp", ("udp", 68): "dhcp",
    ("udp", 546): "dhcpv6", ("udp", 547): "dhcpv6",
    ("udp", 161): "snmp", ("udp", 162): "snmp",
    ("tcp", 3288): "cops",
    ("udp", 5351): "nat-pmp", ("udp", 5350): "nat-pmp",
    ("any", 4555): "rsip",
    ("any", 3478): "stun", ("any", 5349): "stun",
    ("tcp", 17500): "db-lsp", ("udp", 17500): "db-lsp-disc",
    ("any", 3792): "pathport",
    ("udp", 3785): "bfd echo",
    ("tcp", 179): "bgp",
    ("any", 6160): "ecmp",
    ("any", 3863): "asap",
    ("udp", 1900): "ssdp",
    ("any", 427): "srvloc",
    ("tcp", 48049): "cbsp",
    ("udp", 123): "ntp",
    ("tcp", 135): "dcerpc",
    ("tcp", 1099): "rmi",
    ("any", 19): "chargen",
    ("udp", 102): "r-goose",
    ("tcp", 1861): "vicp",
    ("any", 44818): "enip", ("udp", 2222): "enip",
    ("any", 1153): "c1222",
    ("tcp", 5900): "vnc", ("tcp", 5901): "vnc", ("tcp", 5902): "vnc", ("tcp", 5903): "vnc",
    **{("tcp", 6000 + i): "x11" for i in range(64)},
    ("tcp", 1863): "msnms",
    ("tcp", 139): "lanman",
    ("any", 8611): "bjnp", ("any", 8612): "bjnp",
    ("any", 3396): "ndps",
    ("any", 1547): "laplink",
    ("tcp", 4155): "bzr",
    ("tcp", 2401): "cvspserver",
    ("udp", 26000): "quake", ("udp", 27910): "quake2", ("udp", 27960): "quake3", ("udp", 27500): "quakeworld",
    ("udp", 2123): "gtp", ("udp", 2152): "gtp", ("udp", 3386): "gtp",
    ("tcp", 9999): "tplink-smarthome",
    ("udp", 5683): "coap",
    ("tcp", 1883): "mqtt",
    ("tcp", 1433): "tds",
    ("tcp", 8333): "bitcoin",
    # target traffic: named so it is never mistaken for anything else
    ("tcp", 443): "tls",
    ("udp", 443): "quic",
    ("tcp", 80): "http",
    ("any", 53): "dns",
}

TLS_RECORD_TYPES = (0x14, 0x15, 0x16, 0x17)


@dataclass
class FilterSet:
    groups: dict[str, list[str]] = field(default_factory=lambda: {g: list(t) for g, t in DEFAULT_GROUPS.items()})
    enabled_groups: set[str] | None = None  # None = all groups
    # prior-work filters, off by default
    min_packet_bytes: int | None = None

    def __post_init__(self) -> None:
        seen: dict[str, str] = {}
        for group, tags in self.groups.items():
            for tag in tags:
                if tag in seen:
                    raise ValueError(f"tag {tag!r} appears in both {seen[tag]!r} and {group!r}")
                seen[tag] = group
        self._tag_group = seen
        if self.enabled_groups is None:
            self.enabled_groups = set(self.groups)
        unknown = set(self.enabled_groups) - set(self.groups)
        if unknown:
            raise ValueError(f"unknown filter groups: {sorted(unknown)}")

    def group_of(self, tag: str) -> str | None:
        group = self._tag_group.get(tag)
        return group if group in self.enabled_groups else None

    @classmethod
    def from_json(cls, path: str | Path) -> FilterSet:
        cfg = json.loads(Path(path).read_text())
        groups = cfg.get("groups") or {g: list(t) for g, t in DEFAULT_GROUPS.items()}
        enabled = cfg.get("enabled_groups")
        return cls(groups, set(enabled) if enabled is not None else None, cfg.get("min_packet_bytes"))

    def to_dict(self) -> dict:
        return {
            "groups": self.groups,
            "enabled_groups": sorted(self.enabled_groups),
            "min_packet_bytes": self.min_packet_bytes,
        }


@dataclass
class CleaningReport:
    total: int = 0
    kept: int = 0
    removed_by_group: dict[str, int] = field(default_factory=dict)
    removed_by_protocol: dict[str, int] = field(default_factory=dict)
    removed_by_size: int = 0

    def removed_share(self, group: str) -> float:
        """Share of all packets removed by ``group``, in percent."""
        return 100.0 * self.removed_by_group.get(group, 0) / self.total if self.total else 0.0

    def merge(self, other: CleaningReport) -> CleaningReport:
        by_group = Counter(self.removed_by_group) + Counter(other.removed_by_group)
        by_proto = Counter(self.removed_by_protocol) + Counter(other.removed_by_protocol)
        return CleaningReport(self.total + other.total, self.kept + other.kept, dict(by_group), dict(by_proto),
                              self.removed_by_size + other.removed_by_size)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "kept": self.kept,
            "removed_by_group": dict(sorted(self.removed_by_group.items())),
            "removed_by_protocol": dict(sorted(self.removed_by_protocol.items())),
            "removed_by_size": self.removed_by_size,
            "removed_pct_by_group": {g: round(self.removed_share(g), 4) for g in sorted(self.removed_by_group)},
        }


def _looks_like_tls(payload: bytes) -> bool:
    return len(payload) >= 3 and payload[0] in TLS_RECORD_TYPES and payload[1] == 0x03


def _looks_like_rtcp(payload: bytes) -> bool:
    return len(payload) >= 8 and payload[0] >> 6 == 2 and 200 <= payload[1] <= 204


def classify_protocol(pkt: ParsedPacket, port_map: Mapping[tuple[str, int], str] = WELL_KNOWN_PORTS) -> str:
    """Most specific protocol tag derivable from headers and well-known ports."""
    base = pkt.protocol_tag
    if base not in ("tcp", "udp"):
        return base
    t = pkt.transport
    if t is None:
        return base
    # lower port first: the server side is usually the well-known one
    for port in sorted((t.src_port, t.dst_port)):
        tag = port_map.get((base, port)) or port_map.get(("any", port))
        if tag is not None:
            return tag
    if base == "tcp" and _looks_like_tls(pkt.payload):
        return "tls"
    if base == "udp" and _looks_like_rtcp(pkt.payload):
        return "rtcp"
    if b"application/ocsp" in pkt.payload[:512]:
        return "ocsp"
    return base


def apply_filters(
    packets: Iterable[ParsedPacket],
    filters: FilterSet | None = None,
    port_map: Mapping[tuple[str, int], str] = WELL_KNOWN_PORTS,
) -> tuple[list[ParsedPacket], CleaningReport]:
    """Drop packets whose protocol tag belongs to an enabled filter group.

    The refined tag is written back to ``pkt.protocol_tag``. Kept packets keep
    their input order.
    """
    filters = filters or FilterSet()
    kept: list[ParsedPacket] = []
    by_group: Counter[str] = Counter()
    by_proto: Counter[str] = Counter()
    by_size = 0
    total = 0
    for pkt in packets:
        total += 1
        tag = classify_protocol(pkt, port_map)
        pkt.protocol_tag = tag
        group = filters.group_of(tag)
        if group is not None:
            by_group[group] += 1
            by_proto[tag] += 1
            continue
        if filters.min_packet_bytes is not None and len(pkt.raw.data) < filters.min_packet_bytes:
            by_size += 1
            continue
        kept.append(pkt)
    return kept, CleaningReport(total, len(kept), dict(by_group), dict(by_proto), by_size)
