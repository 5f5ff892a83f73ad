import io
import logging
import struct

import dpkt
import pytest
from dpkt.dpkt import in_cksum
from hypothesis import given
from hypothesis import strategies as st
from scapy.layers.inet import IP, TCP, UDP
from scapy.layers.inet6 import IPv6, IPv6ExtHdrHopByHop
from scapy.layers.l2 import Ether

from conftest import raw_from
from trafficbench.codec import (
    PcapError,
    RawPacket,
    decode,
    internet_checksum,
    read_pcap,
    reserialize,
    verify_checksums,
    write_pcap,
)

ETH = dict(src="00:11:22:33:44:55", dst="66:77:88:99:aa:bb")


def tcp_frame(payload=b"hello world", **tcp):
    return bytes(Ether(**ETH) / IP(src="10.0.0.7", dst="192.168.1.20", ttl=64) / TCP(sport=40000, dport=443, **tcp) / payload)


# --- pcap files -------------------------------------------------------------


def test_empty_capture_reads_empty():
    assert read_pcap(write_pcap([])) == []


def test_write_empty_is_header_only():
    data = write_pcap([])
    assert len(data) == 24
    assert struct.unpack("<I", data[:4])[0] == 0xA1B2C3D4


def test_single_record_round_trip():
    pkt = RawPacket(uid=0, ts_sec=1_700_000_000, ts_frac=123_456_000, data=tcp_frame(), trace_id="x")
    (back,) = read_pcap(write_pcap([pkt]), trace_id="x")
    assert back == pkt


def _swapped_capture(nano: bool) -> tuple[bytes, list[tuple[int, int, bytes]]]:
    # big-endian file, the byte-swapped case on little-endian hosts
    recs = [(1_600_000_000 + i, 1000 * i + 7, tcp_frame(bytes([i]) * (i + 3))) for i in range(3)]
    out = io.BytesIO()
    out.write(struct.pack(">IHHiIII", 0xA1B23C4D if nano else 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1))
    for sec, sub, data in recs:
        out.write(struct.pack(">IIII", sec, sub, len(data), len(data)))
        out.write(data)
    return out.getvalue(), recs


@pytest.mark.parametrize("nano", [False, True])
def test_byte_swapped_capture_matches_dpkt(nano):
    blob, recs = _swapped_capture(nano)
    ours = read_pcap(blob)
    theirs = list(dpkt.pcap.Reader(io.BytesIO(blob)))
    assert len(ours) == len(theirs) == 3
    for p, (ts, buf), (sec, sub, _) in zip(ours, theirs, recs):
        assert p.data == buf
        assert p.ts_sec == sec
        assert p.ts_frac == (sub if nano else sub * 1000)
        assert p.timestamp == pytest.approx(float(ts), abs=1e-6)
    assert [p.uid for p in ours] == [0, 1, 2]


def test_malformed_global_header_is_fatal():
    with pytest.raises(PcapError):
        read_pcap(b"\x00" * 24)
    with pytest.raises(PcapError):
        read_pcap(b"\xd4\xc3\xb2\xa1\x02\x00")


def test_truncated_final_record_dropped(caplog):
    pkts = [RawPacket(i, 10, 0, tcp_frame()) for i in range(2)]
    blob = write_pcap(pkts)[:-5]
    with caplog.at_level(logging.WARNING):
        back = read_pcap(blob)
    assert len(back) == 1
    assert "truncated" in caplog.text


def test_snaplen_truncation_flagged():
    frame = tcp_frame(b"x" * 200)
    pkt = RawPacket(0, 1, 0, frame[:60], orig_len=len(frame))
    (back,) = read_pcap(write_pcap([pkt]))
    assert back.truncated and back.orig_len == len(frame)
    assert decode(back).malformed is not None


def test_nano_write_of_micro_capture_scales_fraction():
    micro = read_pcap(write_pcap([RawPacket(0, 5, 250_000_000 + 17_000, b"\x00" * 20)]))
    blob = write_pcap(micro, precision="nano")
    assert struct.unpack("<I", blob[:4])[0] == 0xA1B23C4D
    sub_ns = struct.unpack("<I", blob[28:32])[0]
    sub_us = struct.unpack("<I", write_pcap(micro)[28:32])[0]
    assert sub_ns == sub_us * 1000 == 250_017_000


def test_real_frames_round_trip_bytes(real_frames):
    back = read_pcap(write_pcap(real_frames), trace_id="real")
    assert [p.data for p in back] == [p.data for p in real_frames]


# --- decode ------------------------------------------------------------------


def test_bare_ipv4_header_claiming_tcp_is_malformed_transport():
    hdr = bytearray(struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20, 1, 0, 64, 6, 0, bytes([10, 0, 0, 1]), bytes([10, 0, 0, 2])))
    pkt = decode(raw_from(bytes(hdr), linktype=101))
    assert pkt.net is not None and pkt.transport is None
    assert pkt.malformed == "transport"
    assert pkt.payload_offset == 20


def test_syn_seq_echo():
    pkt = decode(raw_from(tcp_frame(b"", flags="S", seq=0x12345678)))
    assert pkt.tcp.seq_no == 0x12345678
    assert pkt.tcp.flags == 0x02
    assert pkt.protocol_tag == "tcp"


def test_ipv6_hop_by_hop_offset_matches_dpkt():
    frame = bytes(Ether(**ETH) / IPv6(src="2001:db8::1", dst="2001:db8::2") / IPv6ExtHdrHopByHop() / TCP(sport=1234, dport=443) / b"abcdef")
    pkt = decode(raw_from(frame))
    eth = dpkt.ethernet.Ethernet(frame)
    tcp = eth.data.data
    assert isinstance(tcp, dpkt.tcp.TCP)
    expected_offset = len(frame) - len(tcp.data)
    assert pkt.tcp is not None
    assert pkt.payload_offset == expected_offset
    assert pkt.payload == b"abcdef"
    assert pkt.ipv6.upper_protocol == 6
    assert verify_checksums(pkt).tcp_checksum_ok is True


def test_vlan_tags_skipped():
    from scapy.layers.l2 import Dot1Q

    frame = bytes(Ether(**ETH) / Dot1Q(vlan=10) / Dot1Q(vlan=20) / IP(src="1.2.3.4", dst="5.6.7.8") / UDP(sport=5, dport=53) / b"q")
    pkt = decode(raw_from(frame))
    assert pkt.vlan_tags == [10, 20]
    assert pkt.udp.dst_port == 53
    assert reserialize(pkt).data == frame


def test_tcp_timestamp_option_parsed():
    frame = tcp_frame(options=[("NOP", None), ("NOP", None), ("Timestamp", (111, 222))])
    pkt = decode(raw_from(frame))
    assert (pkt.tcp.tsval, pkt.tcp.tsecr) == (111, 222)
    assert 8 in pkt.tcp.option_kinds


def test_unsupported_link_type_is_tagged():
    pkt = decode(raw_from(b"\x01\x02\x03", linktype=105))
    assert pkt.link == "unsupported"
    assert pkt.protocol_tag == "unsupported"


def test_unknown_inner_protocol():
    frame = bytes(Ether(**ETH) / IP(src="1.1.1.1", dst="2.2.2.2", proto=47) / (b"\x00" * 12))
    pkt = decode(raw_from(frame))
    assert pkt.protocol_tag == "unknown"
    assert pkt.payload_offset == 14 + 20


def test_arp_tag():
    from scapy.layers.l2 import ARP

    pkt = decode(raw_from(bytes(Ether(**ETH) / ARP())))
    assert pkt.protocol_tag == "arp"


@given(st.binary(max_size=200), st.sampled_from([1, 101, 147, 999]))
def test_decode_never_raises_and_round_trips(data, linktype):
    if not data:
        data = b"\x00"
    raw = raw_from(data, linktype=linktype)
    pkt = decode(raw)
    assert pkt.payload_offset <= len(data) + (1 if linktype == 147 else 0)
    if pkt.malformed is None:
        assert reserialize(pkt).data == data


@given(st.binary(min_size=20, max_size=80))
def test_decode_fuzz_on_ipv4_prefix(tail):
    data = b"\x45" + tail
    pkt = decode(raw_from(data, linktype=101))
    if pkt.malformed is None:
        assert reserialize(pkt).data == data


# --- checksums -----------------------------------------------------------------


def test_checksum_of_zero_bytes():
    assert internet_checksum(bytes(20)) == 0xFFFF


def test_checksum_odd_length_pads():
    assert internet_checksum(b"\x01") == internet_checksum(b"\x01\x00")


def test_real_ipv4_headers_against_reference(real_headers):
    vectors = real_headers["ipv4_headers"]
    assert len(vectors) >= 10
    for v in vectors:
        h = bytearray.fromhex(v["ip_header"])
        stored = struct.unpack("!H", h[10:12])[0]
        h[10:12] = b"\x00\x00"
        assert internet_checksum(bytes(h)) == stored == in_cksum(bytes(h))


def test_real_tcp_segments_against_reference(real_headers):
    vectors = real_headers["tcp_segments"]
    assert len(vectors) >= 10
    for v in vectors:
        ip = bytes.fromhex(v["ip_header"])
        seg = bytearray.fromhex(v["tcp_segment"])
        stored = struct.unpack("!H", seg[16:18])[0]
        seg[16:18] = b"\x00\x00"
        ph = ip[12:20] + struct.pack("!BBH", 0, 6, len(seg))
        assert internet_checksum(ph + bytes(seg)) == stored == in_cksum(ph + bytes(seg))


@given(st.binary(min_size=20, max_size=60).map(lambda b: b[: len(b) // 2 * 2]))
def test_checksum_fill_then_verify(h):
    h = bytearray(h)
    h[10:12] = b"\x00\x00"
    c = internet_checksum(bytes(h))
    h[10:12] = struct.pack("!H", c)
    assert internet_checksum(bytes(h)) == 0


@given(st.lists(st.integers(0, 0xFFFF), min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_checksum_word_permutation_invariant(words, rnd):
    shuffled = list(words)
    rnd.shuffle(shuffled)
    a = struct.pack(f"!{len(words)}H", *words)
    b = struct.pack(f"!{len(words)}H", *shuffled)
    assert internet_checksum(a) == internet_checksum(b)


def test_verify_valid_packet_then_flip_payload_byte():
    frame = bytearray(tcp_frame(b"payload bytes"))
    pkt = decode(raw_from(bytes(frame)))
    rep = verify_checksums(pkt)
    assert rep.ip_checksum_ok is True and rep.tcp_checksum_ok is True and rep.udp_checksum_ok is None
    frame[-1] ^= 0x01
    assert verify_checksums(decode(raw_from(bytes(frame)))).tcp_checksum_ok is False


def test_zero_udp_checksum_is_not_applicable():
    frame = bytes(Ether(**ETH) / IP(src="1.2.3.4", dst="5.6.7.8") / UDP(sport=1000, dport=2000, chksum=0) / b"data")
    ref = dpkt.ethernet.Ethernet(frame).data.data
    assert ref.sum == 0  # independent decoder sees the "no checksum" marker
    pkt = decode(raw_from(frame))
    assert verify_checksums(pkt).udp_checksum_ok is None
    assert verify_checksums(pkt).ip_checksum_ok is True


def test_real_frames_verify_like_reference(real_frames):
    checked = 0
    for raw in real_frames:
        pkt = decode(raw)
        rep = verify_checksums(pkt)
        if pkt.ipv4 is not None and pkt.malformed is None:
            assert rep.ip_checksum_ok == (in_cksum(pkt.ipv4.pack()) == 0)
            checked += 1
    assert checked >= 10


def test_truncated_payload_not_applicable():
    frame = tcp_frame(b"z" * 100)
    pkt = decode(RawPacket(0, 0, 0, frame[:70], orig_len=len(frame)))
    assert verify_checksums(pkt).tcp_checksum_ok is None


# --- reserialize ---------------------------------------------------------------


def test_real_frames_reserialize_identity(real_frames):
    n = 0
    for raw in real_frames:
        pkt = decode(raw)
        if pkt.malformed is None:
            assert reserialize(pkt).data == raw.data
            n += 1
    assert n >= 40


def test_ttl_change_is_local():
    frame = tcp_frame()
    pkt = decode(raw_from(frame))
    pkt.net.ttl = 1
    out = reserialize(pkt).data
    diff = [i for i, (a, b) in enumerate(zip(frame, out)) if a != b]
    assert diff == [14 + 8]


def test_seq_overwrite_offset():
    frame = tcp_frame()
    pkt = decode(raw_from(frame))
    pkt.tcp.seq_no = 0xDEADBEEF
    out = reserialize(pkt).data
    tcp_start = len(frame) - len(dpkt.ethernet.Ethernet(frame).data.data)
    assert out[tcp_start + 4:tcp_start + 8] == bytes.fromhex("DEADBEEF")


def test_out_of_range_field_rejected():
    pkt = decode(raw_from(tcp_frame()))
    pkt.net.ttl = 256
    with pytest.raises(ValueError, match="ttl"):
        reserialize(pkt)


def test_malformed_reserialize_rejected():
    pkt = decode(raw_from(b"\x45\x00", linktype=101))
    with pytest.raises(ValueError):
        reserialize(pkt)
