"""Fixed-schema header features for the shallow baselines.

Absent fields are 0 and the layer's presence flag says whether that 0 is real.
Checksum validity bits use 1 (ok), 0 (bad) and -1 (not applicable).
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

from .codec import ParsedPacket, verify_checksums

IPV4_FIELDS = ["tos", "ihl", "id", "checksum", "flags", "length", "protocol", "version", "ttl", "frag"]
IPV6_FIELDS = ["flow_label", "version", "payload_length", "hop_limit", "traffic_class", "next_header"]
UDP_FIELDS = ["sport", "dport", "checksum", "length"]
TCP_FIELDS = ["sport", "dport", "tsval", "tsecr", "window", "urgent", "data_offset", "flags", "checksum",
              "seq", "ack", "options"]
PRESENCE = ["has_ipv4", "has_ipv6", "has_tcp", "has_udp", "has_tcp_ts"]
CHECKSUM_BITS = ["ip_checksum_ok", "tcp_checksum_ok", "udp_checksum_ok"]

IPV4_ADDR = [f"ipv4_src{i}" for i in range(4)] + [f"ipv4_dst{i}" for i in range(4)]
IPV6_ADDR = [f"ipv6_src{i}" for i in range(16)] + [f"ipv6_dst{i}" for i in range(16)]

DEFAULT_NAMES: tuple[str, ...] = tuple(
    IPV4_ADDR
    + [f"ipv4_{f}" for f in IPV4_FIELDS]
    + IPV6_ADDR
    + [f"ipv6_{f}" for f in IPV6_FIELDS]
    + [f"udp_{f}" for f in UDP_FIELDS]
    + [f"tcp_{f}" for f in TCP_FIELDS]
    + PRESENCE
    + CHECKSUM_BITS
)

# named feature groups, usable wherever a list of names is expected
FEATURE_GROUPS: dict[str, list[str]] = {
    "ip_addr": IPV4_ADDR + IPV6_ADDR,
    "ipv4_addr": IPV4_ADDR,
    "ipv6_addr": IPV6_ADDR,
    "seq_ack": ["tcp_seq", "tcp_ack"],
    "tcp_timestamp": ["tcp_tsval", "tcp_tsecr"],
    "ports": ["tcp_sport", "tcp_dport", "udp_sport", "udp_dport"],
}


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...] = DEFAULT_NAMES

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        unknown = set(self.names) - set(DEFAULT_NAMES)
        if unknown:
            raise ValueError(f"unknown features: {sorted(unknown)}")

    @property
    def width(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def fingerprint(self) -> str:
        return hashlib.sha256(",".join(self.names).encode()).hexdigest()[:16]


def expand_names(names: Iterable[str]) -> list[str]:
    """Resolve group aliases (e.g. ``ip_addr``) into feature names."""
    out: list[str] = []
    for n in names:
        for m in FEATURE_GROUPS.get(n, [n]):
            if m not in out:
                out.append(m)
    return out


@dataclass
class FeatureVector:
    values: np.ndarray
    label: Hashable = None
    packet_uid: int | None = None
    flow_uid: int | None = None


def _ok(v: bool | None) -> int:
    return -1 if v is None else int(v)


def _all_fields(pkt: ParsedPacket) -> dict[str, float]:
    f: dict[str, float] = {}
    v4, v6, tcp, udp = pkt.ipv4, pkt.ipv6, pkt.tcp, pkt.udp
    if v4 is not None:
        f.update({f"ipv4_src{i}": b for i, b in enumerate(v4.src_addr)})
        f.update({f"ipv4_dst{i}": b for i, b in enumerate(v4.dst_addr)})
        f.update(ipv4_tos=v4.tos, ipv4_ihl=v4.ihl, ipv4_id=v4.id, ipv4_checksum=v4.header_checksum,
                 ipv4_flags=v4.flags, ipv4_length=v4.total_length, ipv4_protocol=v4.protocol,
                 ipv4_version=v4.version, ipv4_ttl=v4.ttl, ipv4_frag=v4.frag_offset, has_ipv4=1)
    if v6 is not None:
        f.update({f"ipv6_src{i}": b for i, b in enumerate(v6.src_addr)})
        f.update({f"ipv6_dst{i}": b for i, b in enumerate(v6.dst_addr)})
        f.update(ipv6_flow_label=v6.flow_label, ipv6_version=v6.version, ipv6_payload_length=v6.payload_length,
                 ipv6_hop_limit=v6.hop_limit, ipv6_traffic_class=v6.traffic_class,
                 ipv6_next_header=v6.next_header, has_ipv6=1)
    if udp is not None:
        f.update(udp_sport=udp.src_port, udp_dport=udp.dst_port, udp_checksum=udp.checksum,
                 udp_length=udp.length, has_udp=1)
    if tcp is not None:
        kinds = 0
        for k in tcp.option_kinds:
            if k < 32:
                kinds |= 1 << k
        f.update(tcp_sport=tcp.src_port, tcp_dport=tcp.dst_port, tcp_window=tcp.window, tcp_urgent=tcp.urgent_ptr,
                 tcp_data_offset=tcp.data_offset, tcp_flags=tcp.flags, tcp_checksum=tcp.checksum,
                 tcp_seq=tcp.seq_no, tcp_ack=tcp.ack_no, tcp_options=kinds, has_tcp=1)
        if tcp.tsval is not None:
            f.update(tcp_tsval=tcp.tsval, tcp_tsecr=tcp.tsecr, has_tcp_ts=1)
    rep = verify_checksums(pkt)
    f.update(ip_checksum_ok=_ok(rep.ip_checksum_ok), tcp_checksum_ok=_ok(rep.tcp_checksum_ok),
             udp_checksum_ok=_ok(rep.udp_checksum_ok))
    return f


def extract_features(pkt: ParsedPacket, schema: FeatureSchema | None = None, label: Hashable = None,
                     flow_uid: int | None = None) -> FeatureVector:
    schema = schema or FeatureSchema()
    f = _all_fields(pkt)
    values = np.array([f.get(n, 0) for n in schema.names], dtype=np.float64)
    return FeatureVector(values, label, pkt.raw.uid, flow_uid)


def extract_matrix(packets: Sequence[ParsedPacket], schema: FeatureSchema | None = None) -> np.ndarray:
    schema = schema or FeatureSchema()
    X = np.zeros((len(packets), schema.width), dtype=np.float64)
    for i, p in enumerate(packets):
        f = _all_fields(p)
        X[i] = [f.get(n, 0) for n in schema.names]
    return X


def drop_features(X: np.ndarray, schema: FeatureSchema, names: Iterable[str]) -> tuple[np.ndarray, FeatureSchema]:
    """Project out ``names`` (group aliases allowed); unknown names raise KeyError."""
    drop = expand_names(names)
    missing = [n for n in drop if n not in schema.names and n not in DEFAULT_NAMES]
    if missing:
        raise KeyError(f"unknown feature(s): {', '.join(missing)}")
    keep = [i for i, n in enumerate(schema.names) if n not in drop]
    return X[:, keep], FeatureSchema(tuple(schema.names[i] for i in keep))


META_COLUMNS = ["packet_uid", "flow_uid", "label", "partition", "fold"]


def write_feature_csv(path: str | Path, X: np.ndarray, schema: FeatureSchema, meta: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(schema.names) + META_COLUMNS)
        for row, m in zip(X, meta):
            fold = m.get("fold")
            w.writerow([repr(float(v)) if v != int(v) else int(v) for v in row]
                       + [m["packet_uid"], m["flow_uid"], m["label"], m["partition"], "" if fold is None else fold])


def read_feature_csv(path: str | Path) -> tuple[np.ndarray, FeatureSchema, list[dict]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[-len(META_COLUMNS):] != META_COLUMNS:
            raise KeyError(f"feature CSV must end with columns {META_COLUMNS}")
        names = tuple(header[:-len(META_COLUMNS)])
        schema = FeatureSchema(names)
        rows, meta = [], []
        for line in r:
            rows.append([float(v) for v in line[:len(names)]])
            uid, fuid, label, part, fold = line[len(names):]
            meta.append({"packet_uid": int(uid), "flow_uid": int(fuid), "label": label, "partition": part,
                         "fold": int(fold) if fold else None})
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(names)), schema, meta
