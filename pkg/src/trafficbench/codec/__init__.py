from .checksum import internet_checksum, ones_complement_sum, pseudo_header
from .packet import (
    ICMP,
    TCP,
    UDP,
    ChecksumReport,
    IPv4,
    IPv6,
    ParsedPacket,
    decode,
    fill_checksums,
    format_addr,
    reserialize,
    transport_checksum,
    verify_checksums,
)
from .pcapfile import (
    LINKTYPE_ETHERNET,
    LINKTYPE_RAW,
    LINKTYPE_STRIPPED,
    PcapError,
    RawPacket,
    iter_pcap,
    load_traces,
    read_pcap,
    write_pcap,
)

__all__ = [
    "ICMP", "TCP", "UDP", "ChecksumReport", "IPv4", "IPv6", "ParsedPacket", "PcapError", "RawPacket",
    "LINKTYPE_ETHERNET", "LINKTYPE_RAW", "LINKTYPE_STRIPPED",
    "decode", "fill_checksums", "format_addr", "internet_checksum", "iter_pcap", "load_traces",
    "ones_complement_sum", "pseudo_header", "read_pcap", "reserialize", "transport_checksum",
    "verify_checksums", "write_pcap",
]
