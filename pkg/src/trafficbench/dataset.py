"""Bi-flow assembly, leakage-aware splits, sampling, flow caps and K-fold.

All randomness comes from :func:`trafficbench.seeding.stream` keyed by the
stage and the class (or flow) being processed, so adding a class or a flow
never reshuffles the others.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .codec import ICMP, ParsedPacket
from .seeding import stream

log = logging.getLogger(__name__)

PER_FLOW = "per-flow"
PER_PACKET = "per-packet"


@dataclass(frozen=True, order=True)
class FlowKey:
    addr_lo: bytes
    port_lo: int
    addr_hi: bytes
    port_hi: int
    protocol: int


def flow_key(pkt: ParsedPacket) -> FlowKey | None:
    """Direction-free 5-tuple, or None when the packet has no network layer."""
    net, t = pkt.net, pkt.transport
    if net is None:
        return None
    if t is None or isinstance(t, ICMP):
        sport = dport = 0
    else:
        sport, dport = t.src_port, t.dst_port
    a, b = (net.src_addr, sport), (net.dst_addr, dport)
    lo, hi = (a, b) if a <= b else (b, a)
    return FlowKey(lo[0], lo[1], hi[0], hi[1], net.upper_protocol)


@dataclass
class FlowRecord:
    flow_uid: int
    key: FlowKey | None
    packet_uids: list[int]
    label: Hashable
    trace_id: str
    degenerate: bool = False  # singleton flow for a packet without a network layer

    def __len__(self) -> int:
        return len(self.packet_uids)


def _label_for(pkt: ParsedPacket, labels: Mapping) -> Hashable:
    if pkt.raw.uid in labels:
        return labels[pkt.raw.uid]
    if pkt.raw.trace_id in labels:
        return labels[pkt.raw.trace_id]
    raise KeyError(f"no label for packet {pkt.raw.uid} (trace {pkt.raw.trace_id!r})")


def assemble_flows(packets: Iterable[ParsedPacket], labels: Mapping) -> list[FlowRecord]:
    """Group packets into bi-flows scoped per trace file.

    ``labels`` maps trace_id or packet uid to a class; a uid entry wins.
    flow_uids follow the order of each flow's first packet.
    """
    flows: list[FlowRecord] = []
    index: dict[tuple[FlowKey, str], FlowRecord] = {}
    for pkt in packets:
        label = _label_for(pkt, labels)
        key = flow_key(pkt)
        if key is None:
            flows.append(FlowRecord(len(flows), None, [pkt.raw.uid], label, pkt.raw.trace_id, degenerate=True))
            continue
        rec = index.get((key, pkt.raw.trace_id))
        if rec is None:
            rec = FlowRecord(len(flows), key, [], label, pkt.raw.trace_id)
            index[(key, pkt.raw.trace_id)] = rec
            flows.append(rec)
        elif rec.label != label:
            raise ValueError(f"flow {rec.flow_uid} mixes labels {rec.label!r} and {label!r}")
        rec.packet_uids.append(pkt.raw.uid)
    n_degen = sum(f.degenerate for f in flows)
    if n_degen:
        log.warning("%d packets without a network layer became singleton flows", n_degen)
    return flows


def cap_long_flows(flow: FlowRecord, cap: int = 1000, seed: int = 0) -> FlowRecord:
    """Uniform order-preserving subset of at most ``cap`` packets."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if len(flow) <= cap:
        return flow
    keep = np.sort(stream(seed, "cap", flow.flow_uid).choice(len(flow), size=cap, replace=False))
    return replace(flow, packet_uids=[flow.packet_uids[i] for i in keep])


def partition_names(ratios: Sequence[float]) -> tuple[str, ...]:
    if len(ratios) == 2:
        return ("train", "test")
    if len(ratios) == 3:
        return ("train", "val", "test")
    raise ValueError(f"expected 2 or 3 ratios, got {len(ratios)}")


def _normalize(ratios: Sequence[float]) -> np.ndarray:
    r = np.asarray(ratios, dtype=float)
    if np.any(r < 0) or r.sum() <= 0:
        raise ValueError(f"bad ratios {list(ratios)}")
    return r / r.sum()


def largest_remainder(n: int, shares: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``n``, closest to ``n * shares`` (ties go to earlier parts)."""
    exact = n * shares
    counts = np.floor(exact).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


@dataclass
class ManifestRow:
    packet_uid: int
    flow_uid: int
    label: Hashable
    partition: str
    fold: int | None = None


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    split_policy: str
    seed: int
    ratios: list[float]
    folds: int | None = None

    def __post_init__(self) -> None:
        self.rows.sort(key=lambda r: r.packet_uid)

    def partition(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.partition == name]

    def labels(self) -> list:
        return sorted({r.label for r in self.rows}, key=str)

    def by_uid(self) -> dict[int, ManifestRow]:
        return {r.packet_uid: r for r in self.rows}

    def header(self) -> dict:
        return {"split_policy": self.split_policy, "seed": self.seed, "ratios": self.ratios,
                "tool_version": __version__, "folds": self.folds}

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header())]
        lines += [json.dumps(asdict(r)) for r in self.rows]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> DatasetManifest:
        lines = [json.loads(s) for s in text.splitlines() if s.strip()]
        if not lines or "split_policy" not in lines[0]:
            raise ValueError("manifest is missing its header line")
        head = lines[0]
        rows = [ManifestRow(**d) for d in lines[1:]]
        return cls(rows, head["split_policy"], head["seed"], head["ratios"], head.get("folds"))

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        return cls.from_jsonl(Path(path).read_text())


@dataclass
class SamplingReport:
    operation: str
    unit: str
    before: dict[str, int] = field(default_factory=dict)  # packets per class
    after: dict[str, int] = field(default_factory=dict)
    removed_packet_uids: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _by_class(flows: Iterable[FlowRecord]) -> dict[Hashable, list[FlowRecord]]:
    out: dict[Hashable, list[FlowRecord]] = defaultdict(list)
    for f in flows:
        out[f.label].append(f)
    return dict(sorted(out.items(), key=lambda kv: str(kv[0])))


def _greedy_balanced(flows: list[FlowRecord], counts: np.ndarray, shares: np.ndarray) -> list[int]:
    """Assign flows (already shuffled) to parts with exact flow counts.

    Largest flows go first, each to the open part whose packet load is lowest
    relative to its share, so long flows end up spread over all parts.
    """
    order = sorted(range(len(flows)), key=lambda i: -len(flows[i]))  # stable: shuffle breaks ties
    load = np.zeros(len(counts))
    left = counts.astype(int).copy()
    out = [0] * len(flows)
    for i in order:
        open_parts = np.flatnonzero(left > 0)
        rel = load[open_parts] / shares[open_parts]
        p = int(open_parts[np.argmin(rel)])
        out[i] = p
        left[p] -= 1
        load[p] += len(flows[i])
    return out


def split_per_flow(flows: Sequence[FlowRecord], ratios: Sequence[float] = (7, 1), seed: int = 0) -> DatasetManifest:
    """Whole flows go to one partition; per-class counts by largest remainder."""
    names = partition_names(ratios)
    shares = _normalize(ratios)
    rows: list[ManifestRow] = []
    for label, group in _by_class(flows).items():
        group = sorted(group, key=lambda f: f.flow_uid)
        perm = stream(seed, "split-flow", label).permutation(len(group))
        group = [group[i] for i in perm]
        if len(group) < len(names):
            log.warning("class %r has %d flows (< %d partitions); all go to train", label, len(group), len(names))
            assign = [0] * len(group)
        else:
            counts = largest_remainder(len(group), shares)
            positive = shares > 0
            assign = _greedy_balanced(group, counts, np.where(positive, shares, 1.0))
        for f, p in zip(group, assign):
            rows += [ManifestRow(uid, f.flow_uid, f.label, names[p]) for uid in f.packet_uids]
    return DatasetManifest(rows, PER_FLOW, seed, [float(r) for r in ratios])


def split_per_packet(flows: Sequence[FlowRecord], ratios: Sequence[float] = (8, 1, 1), seed: int = 0) -> DatasetManifest:
    """Per-class random split of individual packets, ignoring flows (leaky on purpose)."""
    names = partition_names(ratios)
    shares = _normalize(ratios)
    rows: list[ManifestRow] = []
    for label, group in _by_class(flows).items():
        members = sorted((uid, f.flow_uid) for f in group for uid in f.packet_uids)
        perm = stream(seed, "split-packet", label).permutation(len(members))
        counts = largest_remainder(len(members), shares)
        parts = np.repeat(np.arange(len(names)), counts)
        for j, p in zip(perm, parts):
            uid, fuid = members[j]
            rows.append(ManifestRow(uid, fuid, label, names[p]))
    return DatasetManifest(rows, PER_PACKET, seed, [float(r) for r in ratios])


def _units(rows: Iterable[ManifestRow], policy: str) -> dict[Hashable, dict[int, list[ManifestRow]]]:
    """class -> unit id -> rows, where a unit is a flow (per-flow) or a packet."""
    out: dict[Hashable, dict[int, list[ManifestRow]]] = defaultdict(dict)
    for r in rows:
        unit = r.flow_uid if policy == PER_FLOW else r.packet_uid
        out[r.label].setdefault(unit, []).append(r)
    return dict(sorted(out.items(), key=lambda kv: str(kv[0])))


def _class_counts(rows: Iterable[ManifestRow]) -> dict[str, int]:
    out: dict[str, int] = defaultdict(int)
    for r in rows:
        out[str(r.label)] += 1
    return dict(sorted(out.items()))


def kfold(manifest: DatasetManifest, k: int = 3, seed: int = 0) -> DatasetManifest:
    """Class-stratified folds over the train partition, whole flows under per-flow policy.

    Units of each class are shuffled and dealt round-robin; the dealing position
    carries over between classes so total fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    rows = [replace(r, fold=None) for r in manifest.rows]
    train = [r for r in rows if r.partition == "train"]
    pos = 0
    for label, units in _units(train, manifest.split_policy).items():
        if len(units) < k:
            log.warning("class %r has %d units (< %d folds); missing from some folds", label, len(units), k)
        ids = sorted(units)
        for j in stream(seed, "kfold", label).permutation(len(ids)):
            for r in units[ids[j]]:
                r.fold = pos % k
            pos += 1
    return DatasetManifest(rows, manifest.split_policy, manifest.seed, manifest.ratios, k)


def _keep_units(units: dict[int, list[ManifestRow]], n: int, rng: np.random.Generator) -> list[ManifestRow]:
    ids = sorted(units)
    chosen = sorted(rng.choice(len(ids), size=n, replace=False)) if n < len(ids) else range(len(ids))
    return [r for j in chosen for r in units[ids[j]]]


def balance_undersample(manifest: DatasetManifest, seed: int = 0) -> tuple[DatasetManifest, SamplingReport]:
    """Undersample every class to the minority size within train and within val.

    The test partition is never touched. Size is counted in flows under the
    per-flow policy (so no flow is cut) and in packets otherwise.
    """
    unit = "flow" if manifest.split_policy == PER_FLOW else "packet"
    keep: list[ManifestRow] = []
    before = [r for r in manifest.rows if r.partition in ("train", "val")]
    for part in ("train", "val"):
        per_class = _units([r for r in manifest.rows if r.partition == part], manifest.split_policy)
        if not per_class:
            continue
        n = min(len(u) for u in per_class.values())
        for label, units in per_class.items():
            keep += _keep_units(units, n, stream(seed, "balance", part, label))
    keep += [r for r in manifest.rows if r.partition not in ("train", "val")]
    after = [r for r in keep if r.partition in ("train", "val")]
    out = DatasetManifest([replace(r) for r in keep], manifest.split_policy, manifest.seed, manifest.ratios, manifest.folds)
    report = SamplingReport("balance_undersample", unit, _class_counts(before), _class_counts(after), len(before) - len(after))
    return out, report


def stratified_sample(manifest: DatasetManifest, fraction: float, seed: int = 0) -> tuple[DatasetManifest, SamplingReport]:
    """Keep ``fraction`` of every partition with class shares preserved.

    Per-class unit counts are apportioned by largest remainder from the rounded
    partition total, so each share is off by less than one unit.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    unit = "flow" if manifest.split_policy == PER_FLOW else "packet"
    keep: list[ManifestRow] = []
    for part in sorted({r.partition for r in manifest.rows}):
        per_class = _units([r for r in manifest.rows if r.partition == part], manifest.split_policy)
        sizes = np.array([len(u) for u in per_class.values()])
        total = int(round(fraction * sizes.sum()))
        counts = largest_remainder(total, sizes / sizes.sum())
        for (label, units), n in zip(per_class.items(), counts):
            keep += _keep_units(units, int(n), stream(seed, "stratified", part, label))
    out = DatasetManifest([replace(r) for r in keep], manifest.split_policy, manifest.seed, manifest.ratios, manifest.folds)
    report = SamplingReport("stratified_sample", unit, _class_counts(manifest.rows), _class_counts(out.rows),
                            len(manifest.rows) - len(out.rows))
    return out, report


def cap_report(before: Sequence[FlowRecord], after: Sequence[FlowRecord]) -> SamplingReport:
    b = defaultdict(int)
    a = defaultdict(int)
    for f in before:
        b[str(f.label)] += len(f)
    for f in after:
        a[str(f.label)] += len(f)
    return SamplingReport("cap_long_flows", "packet", dict(sorted(b.items())), dict(sorted(a.items())),
                          sum(b.values()) - sum(a.values()))
