import dpkt
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scapy.layers.inet import ICMP, IP, TCP, UDP
from scapy.layers.inet6 import IPv6
from scapy.layers.l2 import Ether

from conftest import raw_from, synth_packets
from trafficbench.codec import decode
from trafficbench.features import (
    DEFAULT_NAMES,
    FEATURE_GROUPS,
    FeatureSchema,
    drop_features,
    expand_names,
    extract_features,
    extract_matrix,
    read_feature_csv,
    write_feature_csv,
)
from trafficbench.synth import SynthSpec


def vec(frame):
    f = extract_features(decode(raw_from(frame)))
    return dict(zip(DEFAULT_NAMES, f.values))


def test_default_width():
    assert FeatureSchema().width == len(DEFAULT_NAMES) == 80


def dpkt_reference(frame: bytes) -> dict:
    """Field values read independently through dpkt."""
    eth = dpkt.ethernet.Ethernet(frame)
    ip = eth.data
    ref = {f"ipv4_src{i}": b for i, b in enumerate(ip.src)}
    ref.update({f"ipv4_dst{i}": b for i, b in enumerate(ip.dst)})
    ref.update(ipv4_tos=ip.tos, ipv4_ihl=ip.hl, ipv4_id=ip.id, ipv4_checksum=ip.sum, ipv4_length=ip.len,
               ipv4_protocol=ip.p, ipv4_version=ip.v, ipv4_ttl=ip.ttl, ipv4_flags=ip._flags_offset >> 13,
               ipv4_frag=ip._flags_offset & 0x1FFF)
    t = ip.data
    if isinstance(t, dpkt.tcp.TCP):
        ref.update(tcp_sport=t.sport, tcp_dport=t.dport, tcp_seq=t.seq, tcp_ack=t.ack, tcp_window=t.win,
                   tcp_urgent=t.urp, tcp_checksum=t.sum, tcp_data_offset=t.off, tcp_flags=t.flags & 0xFF)
        for kind, data in dpkt.tcp.parse_opts(t.opts):
            if kind == dpkt.tcp.TCP_OPT_TIMESTAMP:
                ref.update(tcp_tsval=int.from_bytes(data[:4], "big"), tcp_tsecr=int.from_bytes(data[4:], "big"))
    elif isinstance(t, dpkt.udp.UDP):
        ref.update(udp_sport=t.sport, udp_dport=t.dport, udp_checksum=t.sum, udp_length=t.ulen)
    return ref


def test_fields_match_dpkt_on_synthetic_traffic():
    packets, _ = synth_packets(SynthSpec(n_classes=2, flows_per_class=3, packets_per_flow=10, seed=8,
                                         extraneous={"ntp": 3}))
    X = extract_matrix(packets)
    for p, row in zip(packets, X):
        if p.ipv4 is None:
            continue
        ours = dict(zip(DEFAULT_NAMES, row))
        for k, v in dpkt_reference(p.raw.data).items():
            assert ours[k] == v, k


def test_fields_match_dpkt_on_real_frames(real_frames):
    n = 0
    for raw in real_frames:
        p = decode(raw)
        if p.ipv4 is None or p.link != "ethernet":
            continue
        ours = vec(raw.data)
        for k, v in dpkt_reference(raw.data).items():
            assert ours[k] == v, k
        n += 1
    assert n > 0


def test_udp_packet_zero_tcp_fields():
    v = vec(bytes(Ether() / IP() / UDP(sport=7, dport=9) / b"abc"))
    assert v["has_udp"] == 1 and v["has_tcp"] == 0
    assert all(v[f"tcp_{f}"] == 0 for f in ["sport", "dport", "seq", "ack", "tsval"])
    assert v["tcp_checksum_ok"] == -1 and v["udp_checksum_ok"] == 1 and v["ip_checksum_ok"] == 1


def test_icmp_no_transport():
    v = vec(bytes(Ether() / IP() / ICMP()))
    assert v["has_tcp"] == v["has_udp"] == 0 and v["has_ipv4"] == 1
    assert v["tcp_checksum_ok"] == -1 and v["udp_checksum_ok"] == -1


def test_ipv6_fields():
    frame = bytes(Ether() / IPv6(src="2001:db8::1", dst="::2", hlim=33, fl=0xABCDE) / TCP(sport=3, dport=4))
    v = vec(frame)
    assert v["has_ipv6"] == 1 and v["has_ipv4"] == 0 and v["ip_checksum_ok"] == -1
    assert v["ipv6_src0"] == 0x20 and v["ipv6_src1"] == 0x01 and v["ipv6_src15"] == 1 and v["ipv6_dst15"] == 2
    assert v["ipv6_hop_limit"] == 33 and v["ipv6_flow_label"] == 0xABCDE and v["ipv6_next_header"] == 6
    assert v["tcp_checksum_ok"] == 1 and v["has_tcp_ts"] == 0


def test_bad_checksum_bit():
    frame = bytearray(bytes(Ether() / IP() / TCP() / b"hi"))
    frame[-1] ^= 0xFF
    v = vec(bytes(frame))
    assert v["tcp_checksum_ok"] == 0 and v["ip_checksum_ok"] == 1


def test_tcp_option_kind_bitmask():
    frame = bytes(Ether() / IP() / TCP(options=[("MSS", 1460), ("SAckOK", b""), ("Timestamp", (1, 2))]))
    v = vec(frame)
    assert v["tcp_options"] == (1 << 2) | (1 << 4) | (1 << 8)
    assert (v["tcp_tsval"], v["tcp_tsecr"], v["has_tcp_ts"]) == (1, 2, 1)


def test_custom_schema_subset_order():
    s = FeatureSchema(("tcp_dport", "ipv4_ttl"))
    f = extract_features(decode(raw_from(bytes(Ether() / IP(ttl=77) / TCP(dport=8080)))), s, label="x", flow_uid=4)
    assert list(f.values) == [8080, 77] and f.label == "x" and f.flow_uid == 4


def test_schema_validation():
    with pytest.raises(ValueError):
        FeatureSchema(("tcp_dport", "tcp_dport"))
    with pytest.raises(ValueError):
        FeatureSchema(("made_up",))
    assert FeatureSchema().fingerprint() != FeatureSchema(DEFAULT_NAMES[:-1]).fingerprint()


def test_expand_groups():
    assert expand_names(["ip_addr"]) == FEATURE_GROUPS["ip_addr"]
    assert expand_names(["seq_ack", "tcp_seq"]) == ["tcp_seq", "tcp_ack"]


def test_drop_features_projection():
    X = np.arange(2 * 80, dtype=float).reshape(2, 80)
    Y, s = drop_features(X, FeatureSchema(), ["ip_addr", "tcp_seq"])
    assert s.width == 80 - 40 - 1 and "tcp_seq" not in s.names and "ipv4_src0" not in s.names
    assert Y[0, s.index("tcp_ack")] == X[0, DEFAULT_NAMES.index("tcp_ack")]
    with pytest.raises(KeyError, match="nonsense"):
        drop_features(X, FeatureSchema(), ["nonsense"])


@given(values=st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 255)), min_size=1, max_size=6),
       label=st.sampled_from(["a", "b", "class 1"]))
def test_csv_round_trip(values, label, tmp_path_factory):
    schema = FeatureSchema(("tcp_seq", "ipv4_ttl"))
    X = np.array(values, dtype=float)
    meta = [{"packet_uid": i, "flow_uid": i // 2, "label": label, "partition": "train", "fold": None if i % 2 else 1}
            for i in range(len(values))]
    path = tmp_path_factory.mktemp("csv") / "f.csv"
    write_feature_csv(path, X, schema, meta)
    Y, s2, m2 = read_feature_csv(path)
    assert s2 == schema and np.array_equal(X, Y) and m2 == meta
