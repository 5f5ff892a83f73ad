"""Pre-training text for packet encoders: hex word tokenization and header Q&A.

Contexts are the packet from the network header on (link header and trailer
excluded), written as space-separated 2-byte uppercase hex words. Every answer
is recomputed from the decoded packet, never read off the text.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .codec import ICMP, TCP, UDP, IPv4, IPv6, ParsedPacket, format_addr, verify_checksums
from .dataset import largest_remainder
from .seeding import stream

log = logging.getLogger(__name__)

SEPARATOR = "</s>"
RECONSTRUCT_QUESTION = "Reconstruct the packet."

# canonical types in a fixed order; {v} is IPv4/IPv6 and {t} the transport protocol
QUESTION_TEMPLATES: dict[str, str] = {
    "transport_checksum": "Which is the {t} checksum?",
    "dst_addr": "Which is the destination {v} of the packet?",
    "src_addr": "Which is the source {v} of the packet?",
    "ip_id": "Which is the id of {v}?",
    "ttl": "Which is the time to live of {v}?",
    "checksum_ok": "Is the packet's {v} checksum correct?",
    "l3_last_header_byte": "Which is the last byte of the header in the third layer?",
    "l3_payload_length": "Which is the length of the payload in the third layer?",
}
QUESTION_TYPES = tuple(QUESTION_TEMPLATES)

_WORD = re.compile(r"[0-9A-Fa-f]{4}")
_HALF = re.compile(r"[0-9A-Fa-f]{2}")


class UnsupportedQuestion(ValueError):
    """The packet lacks the layer a question type asks about."""


@dataclass
class TokenizedPacket:
    packet_uid: int | None
    text: str


def hex_tokenize(data: bytes, packet_uid: int | None = None) -> TokenizedPacket:
    if len(data) < 1:
        raise ValueError("cannot tokenize an empty packet")
    h = data.hex().upper()
    return TokenizedPacket(packet_uid, " ".join(h[i:i + 4] for i in range(0, len(h), 4)))


def detokenize(text: str) -> bytes:
    """Inverse of hex_tokenize; malformed input raises ValueError naming the character offset."""
    words = text.split(" ")
    out = bytearray()
    pos = 0
    for i, w in enumerate(words):
        last = i == len(words) - 1
        if _WORD.fullmatch(w) or (last and _HALF.fullmatch(w)):
            out += bytes.fromhex(w)
        else:
            raise ValueError(f"malformed hex word {w!r} at position {pos} (word {i})")
        pos += len(w) + 1
    return bytes(out)


@dataclass
class QAInstance:
    question: str
    context: str
    answer: str
    question_type: str
    packet_uid: int | None

    def rendered(self) -> str:
        return f"{self.question} {SEPARATOR} {self.context}"

    def to_record(self) -> dict:
        return {"question": self.question, "context": self.context, "answer": self.answer,
                "type": self.question_type, "uid": self.packet_uid, "input": self.rendered()}


def context_bytes(pkt: ParsedPacket) -> bytes:
    parts = [pkt.net.pack() if pkt.net is not None else b""]
    if pkt.transport is not None:
        parts.append(pkt.transport.pack())
    parts.append(pkt.payload)
    return b"".join(parts)


def _version(pkt: ParsedPacket) -> str:
    return "IPv4" if isinstance(pkt.net, IPv4) else "IPv6"


def _transport_name(pkt: ParsedPacket) -> str:
    t = pkt.transport
    return "TCP" if isinstance(t, TCP) else "UDP" if isinstance(t, UDP) else "ICMP"


def _checksum_target(pkt: ParsedPacket) -> bool | None:
    """Verdict the checksum question asks about: the IPv4 header, or the upper layer under IPv6."""
    rep = verify_checksums(pkt)
    if isinstance(pkt.net, IPv4):
        return rep.ip_checksum_ok
    for v in (rep.tcp_checksum_ok, rep.udp_checksum_ok, rep.icmp_checksum_ok):
        if v is not None:
            return v
    return None


def supports(pkt: ParsedPacket, qtype: str) -> bool:
    if qtype not in QUESTION_TEMPLATES:
        raise KeyError(f"unknown question type {qtype!r}")
    if not isinstance(pkt.net, (IPv4, IPv6)) or pkt.malformed is not None or pkt.link == "stripped":
        return False
    if qtype == "transport_checksum":
        return isinstance(pkt.transport, (TCP, UDP, ICMP))
    if qtype == "checksum_ok":
        return _checksum_target(pkt) is not None
    if qtype == "l3_payload_length":
        # fragments carry a slice of the upper layer, so the length is not well defined
        return not pkt.net.is_fragment
    return True


def _corrupt(pkt: ParsedPacket, rng: np.random.Generator) -> ParsedPacket:
    """Copy with one byte of the checksum field under question flipped."""
    bad = pkt.copy()
    target = bad.net if isinstance(bad.net, IPv4) else bad.transport
    attr = "header_checksum" if isinstance(target, IPv4) else "checksum"
    old = getattr(target, attr)
    while True:
        new = old ^ (int(rng.integers(1, 256)) << (8 * int(rng.integers(0, 2))))
        # a zero UDP checksum would read as "not computed" rather than wrong
        if not (isinstance(target, UDP) and new == 0):
            break
    setattr(target, attr, new)
    return bad


def generate_qa(pkt: ParsedPacket, qtype: str, rng: np.random.Generator) -> QAInstance:
    """One question about ``pkt``; raises UnsupportedQuestion when the packet lacks the layer."""
    if not supports(pkt, qtype):
        raise UnsupportedQuestion(f"packet {pkt.raw.uid} does not support {qtype!r}")
    q = QUESTION_TEMPLATES[qtype].format(v=_version(pkt), t=_transport_name(pkt) if pkt.transport else "")
    net = pkt.net
    if qtype == "checksum_ok":
        if rng.random() < 0.5:
            pkt = _corrupt(pkt, rng)
        answer = "yes" if _checksum_target(pkt) else "no"
    elif qtype == "transport_checksum":
        answer = f"{pkt.transport.checksum:04X}"
    elif qtype == "dst_addr":
        answer = format_addr(net.dst_addr)
    elif qtype == "src_addr":
        answer = format_addr(net.src_addr)
    elif qtype == "ip_id":
        answer = str(net.id if isinstance(net, IPv4) else net.flow_label)
    elif qtype == "ttl":
        answer = str(net.ttl if isinstance(net, IPv4) else net.hop_limit)
    elif qtype == "l3_last_header_byte":
        answer = f"{net.pack()[-1]:02X}"
    else:
        answer = str(len(pkt.payload))
    return QAInstance(q, hex_tokenize(context_bytes(pkt)).text, answer, qtype, pkt.raw.uid)


def reconstruction_instance(pkt: ParsedPacket) -> QAInstance:
    """Autoencoding input: a fixed placeholder question and the packet as both context and answer."""
    text = hex_tokenize(context_bytes(pkt)).text
    return QAInstance(RECONSTRUCT_QUESTION, text, text, "reconstruct", pkt.raw.uid)


def build_qa_corpus(packets: Sequence[ParsedPacket], count: int = 50_000, mix: Mapping[str, float] | None = None,
                    seed: int = 0, replace: bool = True) -> list[QAInstance]:
    """Type-stratified Q&A corpus; types without an eligible packet lose their share to the rest."""
    mix = dict(mix) if mix is not None else {t: 1.0 for t in QUESTION_TYPES}
    unknown = set(mix) - set(QUESTION_TYPES)
    if unknown:
        raise KeyError(f"unknown question types: {sorted(unknown)}")
    eligible = {t: [i for i, p in enumerate(packets) if supports(p, t)] for t in QUESTION_TYPES if mix.get(t, 0) > 0}
    for t, idx in eligible.items():
        if not idx:
            log.warning("no packet supports question type %r; its share is redistributed", t)
    types = [t for t in QUESTION_TYPES if eligible.get(t)]
    if not types:
        raise ValueError("no packet supports any requested question type")
    shares = np.array([mix[t] for t in types], dtype=np.float64)
    quotas = largest_remainder(count, shares / shares.sum())
    out: list[QAInstance] = []
    for t, quota in zip(types, quotas):
        idx = eligible[t]
        if quota > len(idx) and not replace:
            raise ValueError(f"type {t!r} needs {quota} packets but only {len(idx)} are eligible")
        pick = stream(seed, "qa-pick", t).choice(len(idx), size=int(quota), replace=quota > len(idx))
        for n, j in enumerate(pick):
            out.append(generate_qa(packets[idx[j]], t, stream(seed, "qa", t, n)))
    order = stream(seed, "qa-order").permutation(len(out))
    return [out[i] for i in order]


def write_qa_jsonl(path: str | Path, instances: Sequence[QAInstance]) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")


def read_qa_jsonl(path: str | Path) -> list[QAInstance]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(QAInstance(d["question"], d["context"], d["answer"], d["type"], d["uid"]))
    return out


__all__ = [
    "QAInstance", "QUESTION_TEMPLATES", "QUESTION_TYPES", "RECONSTRUCT_QUESTION", "SEPARATOR", "TokenizedPacket",
    "UnsupportedQuestion", "build_qa_corpus", "context_bytes", "detokenize", "generate_qa", "hex_tokenize",
    "read_qa_jsonl", "reconstruction_instance", "supports", "write_qa_jsonl",
]
