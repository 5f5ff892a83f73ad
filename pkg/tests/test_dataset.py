from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scapy.layers.inet import IP, TCP, UDP
from scapy.layers.l2 import ARP, Ether
from scipy.stats import chisquare

from conftest import raw_from
from trafficbench.codec import decode
from trafficbench.dataset import (
    DatasetManifest,
    FlowRecord,
    assemble_flows,
    balance_undersample,
    cap_long_flows,
    kfold,
    largest_remainder,
    split_per_flow,
    split_per_packet,
    stratified_sample,
)


def tcp_pkt(uid, src, dst, sport, dport, trace="t"):
    frame = bytes(Ether() / IP(src=src, dst=dst) / TCP(sport=sport, dport=dport))
    return decode(raw_from(frame, uid=uid, trace_id=trace))


def make_flows(sizes_by_class):
    """sizes_by_class: {label: [flow sizes]} -> FlowRecords with sequential uids."""
    flows, uid = [], 0
    for label, sizes in sizes_by_class.items():
        for n in sizes:
            flows.append(FlowRecord(len(flows), None, list(range(uid, uid + n)), label, "t"))
            uid += n
    return flows


def test_bidirectional_connection_is_one_flow():
    pkts = [tcp_pkt(i, "10.0.0.1", "10.0.0.2", 50000, 443) if i % 2 == 0 else tcp_pkt(i, "10.0.0.2", "10.0.0.1", 443, 50000)
            for i in range(10)]
    flows = assemble_flows(pkts, {"t": "a"})
    assert len(flows) == 1 and flows[0].packet_uids == list(range(10))


def test_same_tuple_in_two_traces_is_two_flows():
    pkts = [tcp_pkt(0, "10.0.0.1", "10.0.0.2", 1, 2, "x"), tcp_pkt(1, "10.0.0.1", "10.0.0.2", 1, 2, "y")]
    flows = assemble_flows(pkts, {"x": 0, "y": 0})
    assert [f.packet_uids for f in flows] == [[0], [1]]


def test_three_connections_interleaved():
    sizes = {50001: 4, 50002: 5, 50003: 6}
    order = [p for p in [50001, 50002, 50003] * 6]
    pkts, seen = [], Counter()
    for port in order:
        if seen[port] < sizes[port]:
            pkts.append(tcp_pkt(len(pkts), "10.0.0.1", "10.0.0.9", port, 443))
            seen[port] += 1
    flows = assemble_flows(pkts, {"t": "c"})
    assert sorted(len(f) for f in flows) == [4, 5, 6]
    for f in flows:
        assert f.packet_uids == sorted(f.packet_uids)


def test_packet_without_network_layer_is_singleton():
    pkts = [decode(raw_from(bytes(Ether() / ARP()), uid=0)), decode(raw_from(bytes(Ether() / ARP()), uid=1))]
    flows = assemble_flows(pkts, {"t": 1})
    assert len(flows) == 2 and all(f.degenerate for f in flows)


def test_uid_label_wins_and_missing_label_raises():
    p = tcp_pkt(7, "10.0.0.1", "10.0.0.2", 1, 2)
    assert assemble_flows([p], {"t": "a", 7: "b"})[0].label == "b"
    with pytest.raises(KeyError):
        assemble_flows([p], {})


def test_udp_flow_key_distinct_from_tcp():
    a = decode(raw_from(bytes(Ether() / IP(src="1.1.1.1", dst="2.2.2.2") / UDP(sport=5, dport=6)), uid=0))
    b = tcp_pkt(1, "1.1.1.1", "2.2.2.2", 5, 6)
    assert len(assemble_flows([a, b], {"t": 0})) == 2


def test_largest_remainder_sums_exactly():
    assert list(largest_remainder(10, np.array([7 / 8, 1 / 8]))) == [9, 1]
    assert list(largest_remainder(1000, np.array([0.8, 0.1, 0.1]))) == [800, 100, 100]


def test_single_flow_goes_to_train():
    m = split_per_flow(make_flows({"a": [5]}), (7, 1), seed=1)
    assert {r.partition for r in m.rows} == {"train"}


def test_eighty_flows_seven_to_one():
    m = split_per_flow(make_flows({"a": [3] * 40, "b": [2] * 40}), (7, 1), seed=3)
    flows_in = {p: {r.flow_uid for r in m.rows if r.partition == p} for p in ("train", "test")}
    assert len(flows_in["train"]) == 70 and len(flows_in["test"]) == 10


def test_long_flows_spread_across_partitions():
    # two huge flows among many small ones: they must not both land in train
    m = split_per_flow(make_flows({"a": [1000, 1000] + [5] * 14}), (7, 1), seed=0)
    big = {r.partition for r in m.rows if r.flow_uid in (0, 1)}
    assert big == {"train", "test"}


@given(st.lists(st.integers(1, 30), min_size=1, max_size=40), st.integers(0, 2**32 - 1),
       st.sampled_from([(7, 1), (8, 1, 1), (1, 1)]))
def test_per_flow_never_leaks(sizes, seed, ratios):
    flows = make_flows({"a": sizes[::2], "b": sizes[1::2]})
    m = kfold(split_per_flow(flows, ratios, seed), 3, seed)
    seen = {}
    for r in m.rows:
        assert seen.setdefault(r.flow_uid, (r.partition, r.fold)) == (r.partition, r.fold)
    assert sorted(r.packet_uid for r in m.rows) == list(range(sum(sizes)))


def test_per_packet_counts():
    m = split_per_packet(make_flows({"a": [10] * 100}), (8, 1, 1), seed=0)
    assert Counter(r.partition for r in m.rows) == {"train": 800, "val": 100, "test": 100}


def test_per_packet_splits_flows():
    # P(all ten packets of a flow in one partition) ~= 0.8^10 + 2 * 0.1^10 ~= 0.107
    same = total = 0
    for seed in range(200):
        m = split_per_packet(make_flows({"a": [10] * 100}), (8, 1, 1), seed=seed)
        parts = {}
        for r in m.rows:
            parts.setdefault(r.flow_uid, set()).add(r.partition)
        same += sum(len(s) == 1 for s in parts.values())
        total += len(parts)
    assert same / total < 0.8**10 + 2 * 0.1**10 + 0.02


def test_manifest_deterministic_and_round_trips():
    flows = make_flows({"a": [3, 4, 5, 6], "b": [1, 2, 3, 4, 5]})
    m1 = kfold(split_per_flow(flows, (7, 1), 11), 3, 11)
    m2 = kfold(split_per_flow(flows, (7, 1), 11), 3, 11)
    assert m1.to_jsonl() == m2.to_jsonl()
    back = DatasetManifest.from_jsonl(m1.to_jsonl())
    assert back.to_jsonl() == m1.to_jsonl()
    assert '"split_policy": "per-flow"' in m1.to_jsonl().splitlines()[0]


def test_cap_identity_and_subsequence():
    short = make_flows({"a": [500]})[0]
    assert cap_long_flows(short, 1000, 0) is short
    long = make_flows({"a": [2000]})[0]
    capped = cap_long_flows(long, 1000, 0)
    assert len(capped) == 1000 and capped.packet_uids == sorted(capped.packet_uids)
    assert set(capped.packet_uids) <= set(long.packet_uids)


def test_cap_selection_uniform():
    flow = make_flows({"a": [20]})[0]
    counts = np.zeros(20)
    for seed in range(2000):
        counts[cap_long_flows(flow, 5, seed).packet_uids] += 1
    assert chisquare(counts).pvalue > 1e-3


def test_balance_to_minority_and_test_untouched():
    flows = make_flows({"a": [2] * 100, "b": [2] * 40, "c": [2] * 40})
    m = split_per_flow(flows, (1, 0), 0)
    test_rows = [r for r in m.rows if r.partition == "test"]
    out, rep = balance_undersample(m, seed=0)
    per_class = Counter()
    for r in out.rows:
        per_class[r.label] += 1
    assert per_class == {"a": 80, "b": 80, "c": 80}  # 40 flows of 2 each
    assert [r for r in out.rows if r.partition == "test"] == test_rows
    assert rep.removed_packet_uids == 120


def test_balance_keeps_whole_flows():
    flows = make_flows({"a": [1, 7, 3, 9, 2, 4], "b": [5, 5]})
    m = split_per_flow(flows, (1, 0), 0)
    out, _ = balance_undersample(m, seed=5)
    sizes = {f.flow_uid: len(f) for f in flows}
    kept = Counter(r.flow_uid for r in out.rows)
    assert all(kept[u] == sizes[u] for u in kept)
    assert len({r.flow_uid for r in out.rows if r.label == "a"}) == 2


def test_balance_already_balanced_is_identity():
    m = split_per_packet(make_flows({"a": [5], "b": [5]}), (1, 1), 0)
    out, _ = balance_undersample(m, seed=0)
    assert sorted(r.packet_uid for r in out.rows) == sorted(r.packet_uid for r in m.rows)


def test_balance_val_partition_separately():
    m = split_per_packet(make_flows({"a": [100], "b": [50]}), (8, 1, 1), 0)
    out, _ = balance_undersample(m, 0)
    c = Counter((r.partition, r.label) for r in out.rows)
    assert c[("train", "a")] == c[("train", "b")] == 40
    assert c[("val", "a")] == c[("val", "b")] == 5
    assert c[("test", "a")] == 10 and c[("test", "b")] == 5


def test_stratified_counts():
    m = split_per_packet(make_flows({"a": [90], "b": [10]}), (1, 0), 0)
    out, rep = stratified_sample(m, 0.1, 0)
    assert Counter(r.label for r in out.rows) == {"a": 9, "b": 1}
    same, _ = stratified_sample(m, 1.0, 0)
    assert same.to_jsonl() == m.to_jsonl()


@given(st.lists(st.integers(1, 60), min_size=1, max_size=5), st.floats(0.05, 1.0))
def test_stratified_share_drift(sizes, fraction):
    m = split_per_packet(make_flows({str(i): [n] for i, n in enumerate(sizes)}), (1, 0), 0)
    out, _ = stratified_sample(m, fraction, 0)
    if not out.rows:
        return
    n_in, n_out = Counter(r.label for r in m.rows), Counter(r.label for r in out.rows)
    for c in n_in:
        assert abs(n_out[c] / len(out.rows) - n_in[c] / len(m.rows)) <= 1 / len(out.rows) + 1e-12


def test_kfold_nine_flows():
    m = kfold(split_per_flow(make_flows({"a": [2] * 9}), (1, 0), 0), 3, 0)
    folds = Counter()
    for fuid in {r.flow_uid for r in m.rows}:
        folds[next(r.fold for r in m.rows if r.flow_uid == fuid)] += 1
    assert folds == {0: 3, 1: 3, 2: 3}


def test_kfold_partitions_train_only():
    m = kfold(split_per_flow(make_flows({"a": [2] * 10, "b": [3] * 11}), (7, 1), 2), 3, 2)
    train = [r for r in m.rows if r.partition == "train"]
    assert all(r.fold in (0, 1, 2) for r in train)
    assert all(r.fold is None for r in m.rows if r.partition == "test")
    units = Counter(next(r.fold for r in train if r.flow_uid == u) for u in {r.flow_uid for r in train})
    assert max(units.values()) - min(units.values()) <= 1


def test_kfold_rejects_k1():
    with pytest.raises(ValueError):
        kfold(split_per_flow(make_flows({"a": [1]}), (1, 0), 0), 1)
