"""Classic pcap reading and writing.

Only the classic (non-ng) format is handled: a 24-byte global header followed by
16-byte record headers. Both byte orders and both timestamp resolutions
(microsecond magic 0xA1B2C3D4, nanosecond magic 0xA1B23C4D) are accepted.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

log = logging.getLogger(__name__)

MAGIC_MICRO = 0xA1B2C3D4
MAGIC_NANO = 0xA1B23C4D

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
# private link type for frames whose network header was stripped (see transforms)
LINKTYPE_STRIPPED = 147

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16


class PcapError(ValueError):
    """Fatal ingest error: the stream is not a classic pcap capture."""


@dataclass
class RawPacket:
    """One captured record, as stored in the capture file."""

    uid: int
    ts_sec: int
    ts_frac: int  # nanoseconds
    data: bytes
    trace_id: str = ""
    orig_len: int | None = None
    linktype: int = LINKTYPE_ETHERNET

    def __post_init__(self) -> None:
        if not 0 <= self.ts_frac < 1_000_000_000:
            raise ValueError(f"ts_frac out of range: {self.ts_frac}")
        if self.orig_len is None:
            self.orig_len = len(self.data)

    @property
    def truncated(self) -> bool:
        """True when the capture snaplen cut the packet short."""
        return self.orig_len > len(self.data)

    @property
    def timestamp(self) -> float:
        return self.ts_sec + self.ts_frac / 1e9


@dataclass(frozen=True)
class PcapHeader:
    byte_order: str  # "<" or ">"
    nano: bool
    version: tuple[int, int]
    snaplen: int
    linktype: int


def _parse_global_header(buf: bytes) -> PcapHeader:
    if len(buf) < GLOBAL_HEADER_LEN:
        raise PcapError(f"global header too short ({len(buf)} bytes)")
    for order in ("<", ">"):
        (magic,) = struct.unpack(order + "I", buf[:4])
        if magic in (MAGIC_MICRO, MAGIC_NANO):
            break
    else:
        raise PcapError(f"bad pcap magic {buf[:4].hex()}")
    major, minor, _zone, _sigfigs, snaplen, network = struct.unpack(order + "HHiIII", buf[4:24])
    return PcapHeader(order, magic == MAGIC_NANO, (major, minor), snaplen, network & 0x0FFFFFFF)


def iter_pcap(stream: BinaryIO, trace_id: str = "", first_uid: int = 0) -> Iterator[RawPacket]:
    """Yield the records of a classic pcap stream in file order.

    Uids are assigned sequentially from ``first_uid``. A truncated final record is
    dropped with a warning; a malformed global header raises :class:`PcapError`.
    """
    header = _parse_global_header(stream.read(GLOBAL_HEADER_LEN))
    rec = struct.Struct(header.byte_order + "IIII")
    scale = 1 if header.nano else 1000
    uid = first_uid
    while True:
        hdr = stream.read(RECORD_HEADER_LEN)
        if not hdr:
            return
        if len(hdr) < RECORD_HEADER_LEN:
            log.warning("%s: truncated record header after %d records, dropped", trace_id or "pcap", uid - first_uid)
            return
        ts_sec, ts_sub, incl_len, orig_len = rec.unpack(hdr)
        data = stream.read(incl_len)
        if len(data) < incl_len:
            log.warning("%s: truncated final record (%d of %d bytes), dropped", trace_id or "pcap", len(data), incl_len)
            return
        if ts_sub * scale >= 1_000_000_000:
            raise PcapError(f"record {uid - first_uid}: sub-second timestamp {ts_sub} out of range")
        yield RawPacket(
            uid=uid,
            ts_sec=ts_sec,
            ts_frac=ts_sub * scale,
            data=data,
            trace_id=trace_id,
            orig_len=max(orig_len, incl_len),
            linktype=header.linktype,
        )
        uid += 1


def read_pcap(stream: BinaryIO | bytes, trace_id: str = "", first_uid: int = 0) -> list[RawPacket]:
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    return list(iter_pcap(stream, trace_id, first_uid))


def write_pcap(
    packets: Iterable[RawPacket],
    precision: str = "micro",
    linktype: int | None = None,
    snaplen: int = 262144,
) -> bytes:
    """Serialize packets as a little-endian classic pcap.

    ``precision`` is ``"micro"`` or ``"nano"``; at microsecond precision the
    nanosecond fraction is truncated.
    """
    if precision not in ("micro", "nano"):
        raise ValueError(f"precision must be 'micro' or 'nano', not {precision!r}")
    packets = list(packets)
    if linktype is None:
        linktype = packets[0].linktype if packets else LINKTYPE_ETHERNET
    nano = precision == "nano"
    out = io.BytesIO()
    out.write(struct.pack("<IHHiIII", MAGIC_NANO if nano else MAGIC_MICRO, 2, 4, 0, 0, snaplen, linktype))
    for p in packets:
        sub = p.ts_frac if nano else p.ts_frac // 1000
        out.write(struct.pack("<IIII", p.ts_sec, sub, len(p.data), max(p.orig_len, len(p.data))))
        out.write(p.data)
    return out.getvalue()


def load_traces(paths: Iterable[str | Path], first_uid: int = 0) -> list[RawPacket]:
    """Ingest several capture files with run-wide sequential uids.

    Files are read in the order given; the trace id of each packet is the file stem.
    """
    packets: list[RawPacket] = []
    uid = first_uid
    for path in paths:
        path = Path(path)
        with path.open("rb") as fh:
            for pkt in iter_pcap(fh, trace_id=path.stem, first_uid=uid):
                packets.append(pkt)
                uid = pkt.uid + 1
    return packets
