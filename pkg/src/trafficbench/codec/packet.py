"""Structured packet view: decode, checksum verification and re-serialization.

Decoding never raises on bad input. Headers that claim more bytes than were
captured mark the packet ``malformed`` (with the layer name) and whatever could
not be decoded stays in ``payload``, so offsets always point at the last decoded
boundary.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field, replace

from .checksum import internet_checksum, pseudo_header
from .pcapfile import LINKTYPE_ETHERNET, LINKTYPE_RAW, LINKTYPE_STRIPPED, RawPacket

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_ARP = 0x0806
ETH_VLAN = (0x8100, 0x88A8, 0x9100)
ETH_LLDP = 0x88CC
ETH_IPX = 0x8137

PROTO_ICMP = 1
PROTO_IGMP = 2
PROTO_TCP = 6
PROTO_UDP = 17
PROTO_ICMPV6 = 58

RAW_IP_LINKTYPES = (LINKTYPE_RAW, 12, 14, 228, 229)
IPV6_EXT_HEADERS = (0, 43, 44, 51, 60, 135)

TCP_OPT_TIMESTAMP = 8


def _check(name: str, value: int, bits: int) -> int:
    if not 0 <= value < (1 << bits):
        raise ValueError(f"{name}={value} does not fit in {bits} bits")
    return value


def format_addr(addr: bytes) -> str:
    return str(ipaddress.ip_address(addr))


@dataclass
class IPv4:
    version: int
    ihl: int
    tos: int
    total_length: int
    id: int
    flags: int
    frag_offset: int
    ttl: int
    protocol: int
    header_checksum: int
    src_addr: bytes
    dst_addr: bytes
    options: bytes = b""

    @property
    def header_len(self) -> int:
        return self.ihl * 4

    def pack(self, zero_checksum: bool = False) -> bytes:
        if len(self.src_addr) != 4 or len(self.dst_addr) != 4:
            raise ValueError("IPv4 addresses must be 4 bytes")
        if len(self.options) != self.header_len - 20:
            raise ValueError(f"ihl={self.ihl} disagrees with {len(self.options)} option bytes")
        return struct.pack(
            "!BBHHHBBH4s4s",
            (_check("version", self.version, 4) << 4) | _check("ihl", self.ihl, 4),
            _check("tos", self.tos, 8),
            _check("total_length", self.total_length, 16),
            _check("id", self.id, 16),
            (_check("flags", self.flags, 3) << 13) | _check("frag_offset", self.frag_offset, 13),
            _check("ttl", self.ttl, 8),
            _check("protocol", self.protocol, 8),
            0 if zero_checksum else _check("header_checksum", self.header_checksum, 16),
            self.src_addr,
            self.dst_addr,
        ) + self.options

    @property
    def upper_protocol(self) -> int:
        return self.protocol

    @property
    def is_fragment(self) -> bool:
        return self.frag_offset > 0 or bool(self.flags & 0x1)


@dataclass
class IPv6:
    version: int
    traffic_class: int
    flow_label: int
    payload_length: int
    next_header: int
    hop_limit: int
    src_addr: bytes
    dst_addr: bytes
    ext: bytes = b""  # raw extension headers, in wire order
    upper_protocol: int = 59
    fragmented: bool = False

    @property
    def header_len(self) -> int:
        return 40 + len(self.ext)

    @property
    def ttl(self) -> int:
        return self.hop_limit

    def pack(self) -> bytes:
        if len(self.src_addr) != 16 or len(self.dst_addr) != 16:
            raise ValueError("IPv6 addresses must be 16 bytes")
        word = (
            (_check("version", self.version, 4) << 28)
            | (_check("traffic_class", self.traffic_class, 8) << 20)
            | _check("flow_label", self.flow_label, 20)
        )
        return struct.pack(
            "!IHBB16s16s",
            word,
            _check("payload_length", self.payload_length, 16),
            _check("next_header", self.next_header, 8),
            _check("hop_limit", self.hop_limit, 8),
            self.src_addr,
            self.dst_addr,
        ) + self.ext

    @property
    def is_fragment(self) -> bool:
        return self.fragmented


@dataclass
class TCP:
    src_port: int
    dst_port: int
    seq_no: int
    ack_no: int
    data_offset: int
    flags: int  # 9 bits: NS CWR ECE URG ACK PSH RST SYN FIN
    window: int
    checksum: int
    urgent_ptr: int
    options: bytes = b""
    reserved: int = 0
    tsval: int | None = None
    tsecr: int | None = None
    ts_index: int | None = None  # offset of the timestamp option inside ``options``
    option_kinds: tuple[int, ...] = ()

    @property
    def header_len(self) -> int:
        return self.data_offset * 4

    def pack(self, zero_checksum: bool = False) -> bytes:
        if len(self.options) != self.header_len - 20:
            raise ValueError(f"data_offset={self.data_offset} disagrees with {len(self.options)} option bytes")
        opts = self.options
        if self.ts_index is not None:
            i = self.ts_index + 2
            opts = opts[:i] + struct.pack("!II", _check("tsval", self.tsval, 32), _check("tsecr", self.tsecr, 32)) + opts[i + 8:]
        return struct.pack(
            "!HHIIHHHH",
            _check("src_port", self.src_port, 16),
            _check("dst_port", self.dst_port, 16),
            _check("seq_no", self.seq_no, 32),
            _check("ack_no", self.ack_no, 32),
            (_check("data_offset", self.data_offset, 4) << 12)
            | (_check("reserved", self.reserved, 3) << 9)
            | _check("flags", self.flags, 9),
            _check("window", self.window, 16),
            0 if zero_checksum else _check("checksum", self.checksum, 16),
            _check("urgent_ptr", self.urgent_ptr, 16),
        ) + opts


@dataclass
class UDP:
    src_port: int
    dst_port: int
    length: int
    checksum: int

    header_len = 8

    def pack(self, zero_checksum: bool = False) -> bytes:
        return struct.pack(
            "!HHHH",
            _check("src_port", self.src_port, 16),
            _check("dst_port", self.dst_port, 16),
            _check("length", self.length, 16),
            0 if zero_checksum else _check("checksum", self.checksum, 16),
        )


@dataclass
class ICMP:
    type: int
    code: int
    checksum: int
    rest: bytes = b"\x00\x00\x00\x00"
    v6: bool = False

    header_len = 8

    def pack(self, zero_checksum: bool = False) -> bytes:
        if len(self.rest) != 4:
            raise ValueError("ICMP rest-of-header must be 4 bytes")
        return struct.pack(
            "!BBH",
            _check("type", self.type, 8),
            _check("code", self.code, 8),
            0 if zero_checksum else _check("checksum", self.checksum, 16),
        ) + self.rest


@dataclass
class ParsedPacket:
    raw: RawPacket
    link: str  # ethernet | raw-ip | unsupported | stripped
    link_header: bytes = b""
    vlan_tags: list[int] = field(default_factory=list)
    ethertype: int | None = None
    net: IPv4 | IPv6 | None = None
    transport: TCP | UDP | ICMP | None = None
    payload: bytes = b""
    trailer: bytes = b""
    protocol_tag: str = "unknown"
    malformed: str | None = None
    # upper-layer protocol number for frames whose network header was stripped
    stripped_proto: int | None = None

    @property
    def payload_offset(self) -> int:
        off = len(self.link_header)
        if self.net is not None:
            off += self.net.header_len
        if self.transport is not None:
            off += self.transport.header_len
        return off

    @property
    def tcp(self) -> TCP | None:
        return self.transport if isinstance(self.transport, TCP) else None

    @property
    def udp(self) -> UDP | None:
        return self.transport if isinstance(self.transport, UDP) else None

    @property
    def ipv4(self) -> IPv4 | None:
        return self.net if isinstance(self.net, IPv4) else None

    @property
    def ipv6(self) -> IPv6 | None:
        return self.net if isinstance(self.net, IPv6) else None

    def network_bytes(self) -> bytes:
        """Bytes from the network header on (what pretext contexts tokenize)."""
        return self.to_bytes()[len(self.link_header):]

    def to_bytes(self) -> bytes:
        parts = [self.link_header]
        if self.net is not None:
            parts.append(self.net.pack())
        if self.transport is not None:
            parts.append(self.transport.pack())
        parts.append(self.payload)
        parts.append(self.trailer)
        return b"".join(parts)

    def copy(self) -> ParsedPacket:
        return replace(
            self,
            vlan_tags=list(self.vlan_tags),
            net=replace(self.net) if self.net is not None else None,
            transport=replace(self.transport) if self.transport is not None else None,
        )


def _parse_tcp_options(opts: bytes) -> tuple[int | None, tuple[int, ...]]:
    ts_index = None
    kinds: list[int] = []
    i = 0
    while i < len(opts):
        kind = opts[i]
        kinds.append(kind)
        if kind == 0:
            break
        if kind == 1:
            i += 1
            continue
        if i + 1 >= len(opts) or opts[i + 1] < 2 or i + opts[i + 1] > len(opts):
            break  # malformed option list; rest stays opaque
        length = opts[i + 1]
        if kind == TCP_OPT_TIMESTAMP and length == 10:
            ts_index = i
        i += length
    return ts_index, tuple(kinds)


def _decode_transport(pkt: ParsedPacket, proto: int, seg: bytes) -> None:
    if proto == PROTO_TCP:
        pkt.protocol_tag = "tcp"
        if len(seg) < 20:
            pkt.malformed = "transport"
            pkt.payload = seg
            return
        sport, dport, seq, ack, off_flags, win, csum, urg = struct.unpack("!HHIIHHHH", seg[:20])
        doff = off_flags >> 12
        if doff < 5 or doff * 4 > len(seg):
            pkt.malformed = "transport"
            pkt.payload = seg
            return
        opts = seg[20:doff * 4]
        ts_index, kinds = _parse_tcp_options(opts)
        tsval = tsecr = None
        if ts_index is not None:
            tsval, tsecr = struct.unpack("!II", opts[ts_index + 2:ts_index + 10])
        pkt.transport = TCP(sport, dport, seq, ack, doff, off_flags & 0x1FF, win, csum, urg, opts,
                            (off_flags >> 9) & 0x7, tsval, tsecr, ts_index, kinds)
        pkt.payload = seg[doff * 4:]
    elif proto == PROTO_UDP:
        pkt.protocol_tag = "udp"
        if len(seg) < 8:
            pkt.malformed = "transport"
            pkt.payload = seg
            return
        sport, dport, length, csum = struct.unpack("!HHHH", seg[:8])
        pkt.transport = UDP(sport, dport, length, csum)
        pkt.payload = seg[8:]
        if length > len(seg) or length < 8:
            pkt.malformed = "transport"
    elif proto in (PROTO_ICMP, PROTO_ICMPV6):
        pkt.protocol_tag = "icmp" if proto == PROTO_ICMP else "icmpv6"
        if len(seg) < 8:
            pkt.malformed = "transport"
            pkt.payload = seg
            return
        t, c, csum = struct.unpack("!BBH", seg[:4])
        pkt.transport = ICMP(t, c, csum, seg[4:8], proto == PROTO_ICMPV6)
        pkt.payload = seg[8:]
    else:
        pkt.protocol_tag = "igmp" if proto == PROTO_IGMP else "unknown"
        pkt.payload = seg


def _decode_ipv4(pkt: ParsedPacket, buf: bytes) -> None:
    pkt.protocol_tag = "ipv4"
    if len(buf) < 20:
        pkt.malformed = "network"
        pkt.payload = buf
        return
    vihl, tos, tlen, ident, ffo, ttl, proto, csum, src, dst = struct.unpack("!BBHHHBBH4s4s", buf[:20])
    ihl = vihl & 0xF
    if ihl < 5 or ihl * 4 > len(buf) or tlen < ihl * 4:
        pkt.malformed = "network"
        pkt.payload = buf
        return
    hlen = ihl * 4
    pkt.net = IPv4(vihl >> 4, ihl, tos, tlen, ident, ffo >> 13, ffo & 0x1FFF, ttl, proto, csum, src, dst, buf[20:hlen])
    if tlen > len(buf):
        pkt.malformed = "network"  # snaplen or otherwise truncated
    end = min(tlen, len(buf))
    pkt.trailer = buf[end:]
    body = buf[hlen:end]
    if pkt.net.frag_offset > 0:
        pkt.protocol_tag = "ip-fragment"
        pkt.payload = body
        return
    _decode_transport(pkt, proto, body)


def _decode_ipv6(pkt: ParsedPacket, buf: bytes) -> None:
    pkt.protocol_tag = "ipv6"
    if len(buf) < 40:
        pkt.malformed = "network"
        pkt.payload = buf
        return
    word, plen, nxt, hlim, src, dst = struct.unpack("!IHBB16s16s", buf[:40])
    net = IPv6(word >> 28, (word >> 20) & 0xFF, word & 0xFFFFF, plen, nxt, hlim, src, dst)
    end = 40 + plen
    if end > len(buf):
        pkt.malformed = "network"
        end = len(buf)
    i = 40
    proto = nxt
    later_fragment = False
    while proto in IPV6_EXT_HEADERS:
        if i + 8 > end:
            pkt.malformed = "network"
            break
        if proto == 44:
            hlen = 8
            frag = struct.unpack("!H", buf[i + 2:i + 4])[0]
            net.fragmented = True
            later_fragment = (frag >> 3) > 0
        elif proto == 51:
            hlen = (buf[i + 1] + 2) * 4
        else:
            hlen = (buf[i + 1] + 1) * 8
        if i + hlen > end:
            pkt.malformed = "network"
            break
        proto = buf[i]
        i += hlen
    net.ext = buf[40:i]
    net.upper_protocol = proto
    pkt.net = net
    pkt.trailer = buf[end:]
    body = buf[i:end]
    if pkt.malformed:
        pkt.payload = body
        return
    if later_fragment:
        pkt.protocol_tag = "ip-fragment"
        pkt.payload = body
        return
    if proto == 59:
        pkt.payload = body
        return
    _decode_transport(pkt, proto, body)


def _decode_ethernet(pkt: ParsedPacket, buf: bytes) -> None:
    if len(buf) < 14:
        pkt.malformed = "link"
        pkt.payload = buf
        return
    i = 12
    etype = struct.unpack("!H", buf[i:i + 2])[0]
    while etype in ETH_VLAN and len(pkt.vlan_tags) < 2 and len(buf) >= i + 6:
        pkt.vlan_tags.append(struct.unpack("!H", buf[i + 2:i + 4])[0] & 0x0FFF)
        i += 4
        etype = struct.unpack("!H", buf[i:i + 2])[0]
    i += 2
    pkt.link_header = buf[:i]
    pkt.ethertype = etype
    rest = buf[i:]
    if etype == ETH_IPV4:
        _decode_ipv4(pkt, rest)
    elif etype == ETH_IPV6:
        _decode_ipv6(pkt, rest)
    else:
        pkt.payload = rest
        if etype <= 1500:
            pkt.protocol_tag = "stp" if rest[:1] == b"\x42" else "llc"
        else:
            pkt.protocol_tag = {ETH_ARP: "arp", ETH_LLDP: "lldp", ETH_IPX: "ipxsap"}.get(etype, "unknown")


def decode(raw: RawPacket, link_hint: int | None = None) -> ParsedPacket:
    """Decode a captured record into a :class:`ParsedPacket`; never raises on bad bytes."""
    linktype = raw.linktype if link_hint is None else link_hint
    buf = raw.data
    if linktype == LINKTYPE_ETHERNET:
        pkt = ParsedPacket(raw, "ethernet")
        _decode_ethernet(pkt, buf)
    elif linktype in RAW_IP_LINKTYPES:
        pkt = ParsedPacket(raw, "raw-ip")
        version = buf[0] >> 4 if buf else 0
        if version == 4:
            _decode_ipv4(pkt, buf)
        elif version == 6:
            _decode_ipv6(pkt, buf)
        else:
            pkt.malformed = "network"
            pkt.payload = buf
    elif linktype == LINKTYPE_STRIPPED:
        pkt = ParsedPacket(raw, "stripped")
        if not buf:
            pkt.malformed = "link"
            return pkt
        pkt.stripped_proto = buf[0]
        if buf[0]:
            _decode_transport(pkt, buf[0], buf[1:])
        else:
            pkt.payload = buf[1:]
    else:
        pkt = ParsedPacket(raw, "unsupported", payload=buf, protocol_tag="unsupported")
    if raw.truncated and pkt.malformed is None:
        pkt.malformed = "truncated"
    return pkt


def reserialize(pkt: ParsedPacket) -> RawPacket:
    """Emit a RawPacket whose bytes reflect every (possibly mutated) field.

    Raises ValueError for malformed packets and for field values that do not fit
    their wire width.
    """
    if pkt.malformed is not None:
        raise ValueError(f"cannot reserialize malformed packet {pkt.raw.uid} ({pkt.malformed})")
    data = pkt.to_bytes()
    linktype = pkt.raw.linktype
    if pkt.link == "stripped":
        data = bytes([pkt.stripped_proto or 0]) + data
        linktype = LINKTYPE_STRIPPED
    return replace(pkt.raw, data=data, orig_len=len(data), linktype=linktype)


@dataclass(frozen=True)
class ChecksumReport:
    """Per-layer verdicts; ``None`` means not applicable."""

    ip_checksum_ok: bool | None
    tcp_checksum_ok: bool | None
    udp_checksum_ok: bool | None
    icmp_checksum_ok: bool | None = None

    def all_ok(self) -> bool:
        return all(v is not False for v in (self.ip_checksum_ok, self.tcp_checksum_ok,
                                            self.udp_checksum_ok, self.icmp_checksum_ok))


def transport_checksum(pkt: ParsedPacket) -> int | None:
    """Correct checksum for the packet's transport header, or None if not computable."""
    t, net = pkt.transport, pkt.net
    if t is None or net is None or net.is_fragment or pkt.malformed is not None:
        return None
    segment = t.pack(zero_checksum=True) + pkt.payload
    if isinstance(t, ICMP) and not t.v6:
        return internet_checksum(segment)
    proto = {TCP: PROTO_TCP, UDP: PROTO_UDP, ICMP: PROTO_ICMPV6}[type(t)]
    c = internet_checksum(pseudo_header(net.src_addr, net.dst_addr, proto, len(segment)) + segment)
    if isinstance(t, UDP) and c == 0:
        c = 0xFFFF
    return c


def _transport_ok(pkt: ParsedPacket) -> bool | None:
    t, net = pkt.transport, pkt.net
    if t is None or net is None or net.is_fragment or pkt.malformed is not None:
        return None
    segment = t.pack() + pkt.payload
    if isinstance(t, ICMP) and not t.v6:
        return internet_checksum(segment) == 0
    proto = {TCP: PROTO_TCP, UDP: PROTO_UDP, ICMP: PROTO_ICMPV6}[type(t)]
    return internet_checksum(pseudo_header(net.src_addr, net.dst_addr, proto, len(segment)) + segment) == 0


def verify_checksums(pkt: ParsedPacket) -> ChecksumReport:
    ip_ok = None
    if isinstance(pkt.net, IPv4):
        ip_ok = internet_checksum(pkt.net.pack()) == 0
    tcp_ok = udp_ok = icmp_ok = None
    t = pkt.transport
    if isinstance(t, TCP):
        tcp_ok = _transport_ok(pkt)
    elif isinstance(t, UDP):
        # a zero UDP checksum means "not computed"
        udp_ok = None if t.checksum == 0 else _transport_ok(pkt)
    elif isinstance(t, ICMP):
        icmp_ok = _transport_ok(pkt)
    return ChecksumReport(ip_ok, tcp_ok, udp_ok, icmp_ok)


def fill_checksums(pkt: ParsedPacket) -> dict[str, bool]:
    """Recompute checksums in place. Returns which layers were rewritten."""
    done = {"ip": False, "transport": False}
    t = pkt.transport
    if t is not None and not (isinstance(t, UDP) and t.checksum == 0 and isinstance(pkt.net, IPv4)):
        c = transport_checksum(pkt)
        if c is not None:
            t.checksum = c
            done["transport"] = True
    if isinstance(pkt.net, IPv4):
        pkt.net.header_checksum = internet_checksum(pkt.net.pack(zero_checksum=True))
        done["ip"] = True
    return done
