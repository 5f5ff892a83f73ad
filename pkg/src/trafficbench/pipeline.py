"""Run configuration and the file-based stages the command line drives.

Every stage reads and writes fixed file names inside a work directory:

    packets.jsonl   one captured record per line, with its label
    cleaning.json   CleaningReport
    flows.jsonl     one FlowRecord per line (flows.json holds the cap report)
    manifest.jsonl  DatasetManifest (sampling.json holds SamplingReports)
    transform.json  TransformReport
    features.csv    feature matrix plus manifest columns
    model.json      ForestModel (model-fold<k>.json when folds are used)
    report.json     RunReport or EvalResult
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from . import __version__
from .cleaning import FilterSet, apply_filters
from .codec import RawPacket, decode, load_traces, reserialize
from .dataset import (
    PER_FLOW,
    PER_PACKET,
    DatasetManifest,
    FlowKey,
    FlowRecord,
    assemble_flows,
    balance_undersample,
    cap_long_flows,
    cap_report,
    kfold,
    split_per_flow,
    split_per_packet,
    stratified_sample,
)
from .features import FEATURE_GROUPS, FeatureSchema, drop_features, extract_matrix, read_feature_csv, write_feature_csv
from .learn import EvalResult, ForestModel, ForestParams, flow_predictions, mean_std, train_forest
from .synth import SynthSpec, generate_corpus, label_packets
from .transforms import TransformSpec, transform_corpus

log = logging.getLogger(__name__)

PACKETS = "packets.jsonl"
CLEANING = "cleaning.json"
FLOWS = "flows.jsonl"
FLOW_CAP = "flows.json"
MANIFEST = "manifest.jsonl"
SAMPLING = "sampling.json"
TRANSFORM = "transform.json"
FEATURES = "features.csv"
MODEL = "model.json"
REPORT = "report.json"


class ConfigError(ValueError):
    """Invalid user input: bad config, missing file, or mismatched schema."""


def model_name(fold: int | None) -> str:
    return MODEL if fold is None else f"model-fold{fold}.json"


# run configuration

def parse_ratios(text: str) -> tuple[float, ...]:
    try:
        parts = tuple(float(p) for p in text.split(":"))
    except ValueError:
        raise ConfigError(f"ratios must look like A:B[:C], got {text!r}") from None
    if len(parts) not in (2, 3) or any(p <= 0 for p in parts):
        raise ConfigError(f"ratios must be 2 or 3 positive numbers, got {text!r}")
    return parts


def _names(text: str | None) -> list[str]:
    if not text:
        return []
    return [t for t in text.replace(",", " ").split() if t]


@dataclass
class RunConfig:
    seed: int
    inputs: list[str] = field(default_factory=list)
    labels: str | None = None
    synth: dict | None = None
    clean: bool = True
    filters: str | None = None
    flow_cap: int | None = 1000
    policy: str = PER_FLOW
    ratios: tuple[float, ...] = (7, 1)
    folds: int = 3
    balance: bool = False
    fraction: float | None = None
    transform: str | None = None
    scope: str = "both"
    drop_features: list[str] = field(default_factory=list)
    model: dict = field(default_factory=dict)
    flow_vote_packets: int = 5
    threads: int = 1
    out: str | None = None

    def validate(self) -> None:
        if self.policy not in (PER_FLOW, PER_PACKET):
            raise ConfigError(f"policy must be {PER_FLOW} or {PER_PACKET}, got {self.policy!r}")
        if self.folds == 1 or self.folds < 0:
            raise ConfigError("folds must be 0 (no folds) or >= 2")
        if not self.inputs and self.synth is None:
            raise ConfigError("config needs input paths or a [synth] section")
        for p in self.inputs + [x for x in (self.labels, self.filters) if x]:
            if not Path(p).exists():
                raise ConfigError(f"referenced file does not exist: {p}")
        if self.inputs and not self.labels:
            raise ConfigError("input paths need a label map (labels = ...)")
        if self.fraction is not None and not 0 < self.fraction <= 1:
            raise ConfigError("fraction must be in (0, 1]")
        if self.transform:
            try:
                TransformSpec.load(self.transform, self.scope, self.seed)
            except (KeyError, ValueError, FileNotFoundError) as e:
                raise ConfigError(f"transform {self.transform!r}: {e}") from None
        try:
            self.forest_params()
        except TypeError as e:
            raise ConfigError(f"[model]: {e}") from None

    def forest_params(self) -> ForestParams:
        return ForestParams(**{**self.model, "seed": self.seed})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        return d

    def config_hash(self) -> str:
        """Hash of every setting that can change results (output location and threads excluded)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_ini(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        cp.read(path)
        base = path.parent

        def rel(p: str) -> str:
            q = Path(p).expanduser()
            return str(q if q.is_absolute() else (base / q))

        def get(section: str, key: str, fallback=None):
            v = cp.get(section, key, fallback=None)
            return fallback if v is None or v.strip() == "" else v.strip()

        try:
            if get("run", "seed") is None:
                raise ConfigError("[run] seed is required")
            kw: dict = {"seed": int(get("run", "seed"))}
            if get("run", "threads"):
                kw["threads"] = int(get("run", "threads"))
            if get("run", "out"):
                kw["out"] = rel(get("run", "out"))
            kw["inputs"] = [rel(p) for p in _names(get("input", "paths"))]
            if get("input", "labels"):
                kw["labels"] = rel(get("input", "labels"))
            if cp.has_section("synth"):
                synth = {}
                for k, v in cp.items("synth"):
                    if k == "extraneous":
                        synth[k] = {t: int(n) for t, n in (x.split("=") for x in _names(v))}
                    elif k in ("length_dist", "class_signal"):
                        synth[k] = v
                    elif k == "shared_tuples":
                        synth[k] = cp.getboolean("synth", k)
                    elif k in ("capture_seconds", "mean_gap"):
                        synth[k] = float(v)
                    else:
                        synth[k] = int(v)
                synth.setdefault("seed", kw["seed"])
                kw["synth"] = synth
            if cp.has_section("clean"):
                kw["clean"] = cp.getboolean("clean", "enabled", fallback=True)
                if get("clean", "filters"):
                    kw["filters"] = rel(get("clean", "filters"))
            if get("flows", "cap") is not None:
                cap = int(get("flows", "cap"))
                kw["flow_cap"] = cap if cap > 0 else None
            if get("split", "policy"):
                kw["policy"] = get("split", "policy")
            if get("split", "ratios"):
                kw["ratios"] = parse_ratios(get("split", "ratios"))
            if get("split", "folds") is not None:
                kw["folds"] = int(get("split", "folds"))
            if cp.has_section("sample"):
                kw["balance"] = cp.getboolean("sample", "balance", fallback=False)
                if get("sample", "fraction"):
                    kw["fraction"] = float(get("sample", "fraction"))
            if get("transform", "preset"):
                t = get("transform", "preset")
                kw["transform"] = rel(t) if t.endswith(".json") else t
                kw["scope"] = get("transform", "scope", "both")
            kw["drop_features"] = _names(get("features", "drop"))
            if cp.has_section("model"):
                model = {}
                for k, v in cp.items("model"):
                    if not v.strip():
                        continue
                    if k == "bootstrap":
                        model[k] = cp.getboolean("model", k)
                    elif k == "max_features":
                        model[k] = None if v == "all" else v if v == "sqrt" else int(v)
                    else:
                        model[k] = int(v)
                kw["model"] = model
            if get("eval", "flow_vote_packets"):
                kw["flow_vote_packets"] = int(get("eval", "flow_vote_packets"))
        except (ValueError, configparser.Error) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{path}: {e}") from None
        return cls(**kw)


# packets.jsonl

def save_packets(path: str | Path, packets: Sequence[RawPacket], labels: dict[int, Hashable]) -> None:
    with open(path, "w") as fh:
        for p in packets:
            fh.write(json.dumps({"uid": p.uid, "trace": p.trace_id, "ts_sec": p.ts_sec, "ts_frac": p.ts_frac,
                                 "linktype": p.linktype, "orig_len": p.orig_len, "label": labels.get(p.uid),
                                 "data": p.data.hex()}) + "\n")


def load_packets(path: str | Path) -> tuple[list[RawPacket], dict[int, Hashable]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing stage input {path} (run the earlier stage first)")
    packets, labels = [], {}
    for line in path.read_text().splitlines():
        d = json.loads(line)
        packets.append(RawPacket(d["uid"], d["ts_sec"], d["ts_frac"], bytes.fromhex(d["data"]), d["trace"],
                                 d["orig_len"], d["linktype"]))
        if d["label"] is not None:
            labels[d["uid"]] = d["label"]
    return packets, labels


def _label_map(raws: Sequence[RawPacket], mapping: dict) -> dict[int, Hashable]:
    """uid -> label from a map keyed by trace id, packet uid, or direction-free 5-tuple."""
    out: dict[int, Hashable] = {}
    tuple_keys = {k: v for k, v in mapping.items() if k.count(":") >= 2 and "-" in k}
    if tuple_keys:
        out.update(label_packets([decode(r) for r in raws], tuple_keys))
    for r in raws:
        if r.uid in out:
            continue
        if str(r.uid) in mapping:
            out[r.uid] = mapping[str(r.uid)]
        elif r.trace_id in mapping:
            out[r.uid] = mapping[r.trace_id]
    return out


# flows.jsonl

def save_flows(path: str | Path, flows: Sequence[FlowRecord]) -> None:
    with open(path, "w") as fh:
        for f in flows:
            key = None if f.key is None else [f.key.addr_lo.hex(), f.key.port_lo, f.key.addr_hi.hex(),
                                              f.key.port_hi, f.key.protocol]
            fh.write(json.dumps({"flow_uid": f.flow_uid, "key": key, "packet_uids": f.packet_uids,
                                 "label": f.label, "trace": f.trace_id, "degenerate": f.degenerate}) + "\n")


def load_flows(path: str | Path) -> list[FlowRecord]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing stage input {path} (run the flows stage first)")
    out = []
    for line in path.read_text().splitlines():
        d = json.loads(line)
        k = d["key"]
        key = None if k is None else FlowKey(bytes.fromhex(k[0]), k[1], bytes.fromhex(k[2]), k[3], k[4])
        out.append(FlowRecord(d["flow_uid"], key, d["packet_uids"], d["label"], d["trace"], d["degenerate"]))
    return out


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_manifest(work: Path) -> DatasetManifest:
    p = work / MANIFEST
    if not p.exists():
        raise ConfigError(f"missing stage input {p} (run the split stage first)")
    return DatasetManifest.load(p)


# stages

def stage_ingest(inputs: Sequence[str | Path], labels_path: str | Path | None, out: Path) -> dict:
    paths = []
    for p in inputs:
        p = Path(p)
        if not p.exists():
            raise ConfigError(f"input not found: {p}")
        paths += sorted(p.glob("*.pcap")) if p.is_dir() else [p]
    if not paths:
        raise ConfigError("no capture files found")
    raws = load_traces(paths)
    mapping = json.loads(Path(labels_path).read_text()) if labels_path else {}
    labels = _label_map(raws, mapping)
    out.mkdir(parents=True, exist_ok=True)
    save_packets(out / PACKETS, raws, labels)
    return {"files": len(paths), "packets": len(raws), "labelled": len(labels)}


def stage_clean(src: Path, out: Path, filters: str | Path | None = None) -> dict:
    raws, labels = load_packets(src / PACKETS)
    fs = FilterSet.from_json(filters) if filters else FilterSet()
    kept, report = apply_filters([decode(r) for r in raws], fs)
    out.mkdir(parents=True, exist_ok=True)
    save_packets(out / PACKETS, [p.raw for p in kept], labels)
    _write_json(out / CLEANING, report.to_dict())
    return report.to_dict()


def stage_flows(src: Path, out: Path, cap: int | None = 1000, seed: int = 0) -> dict:
    raws, labels = load_packets(src / PACKETS)
    try:
        flows = assemble_flows([decode(r) for r in raws], labels)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from None
    report = {"flows": len(flows), "packets": sum(len(f) for f in flows)}
    if cap:
        capped = [cap_long_flows(f, cap, seed) for f in flows]
        report["cap"] = cap
        report["sampling"] = cap_report(flows, capped).to_dict()
        flows = capped
    out.mkdir(parents=True, exist_ok=True)
    save_flows(out / FLOWS, flows)
    _write_json(out / FLOW_CAP, report)
    return report


def stage_split(src: Path, out: Path, policy: str, ratios: Sequence[float], folds: int, seed: int) -> dict:
    flows = load_flows(src / FLOWS)
    m = split_per_flow(flows, ratios, seed) if policy == PER_FLOW else split_per_packet(flows, ratios, seed)
    if folds:
        m = kfold(m, folds, seed)
    out.mkdir(parents=True, exist_ok=True)
    m.save(out / MANIFEST)
    return {p: len(m.partition(p)) for p in sorted({r.partition for r in m.rows})}


def stage_sample(src: Path, out: Path, balance: bool, fraction: float | None, seed: int) -> list[dict]:
    m = _load_manifest(src)
    reports = []
    if fraction is not None:
        m, rep = stratified_sample(m, fraction, seed)
        reports.append(rep.to_dict())
    if balance:
        m, rep = balance_undersample(m, seed)
        reports.append(rep.to_dict())
    if m.folds:
        # re-deal folds over what survived sampling
        m = kfold(m, m.folds, seed)
    out.mkdir(parents=True, exist_ok=True)
    m.save(out / MANIFEST)
    _write_json(out / SAMPLING, {"reports": reports})
    return reports


def stage_transform(src: Path, out: Path, spec: TransformSpec) -> dict:
    raws, labels = load_packets(src / PACKETS)
    m = _load_manifest(src)
    rows = m.by_uid()
    flow_of = {u: r.flow_uid for u, r in rows.items()}
    part = {u: r.partition for u, r in rows.items()}
    packets = [decode(r) for r in raws]
    done, report = transform_corpus(packets, spec, flow_of, part)
    out.mkdir(parents=True, exist_ok=True)
    save_packets(out / PACKETS, [reserialize(p) for p in done], labels)
    if src != out:
        m.save(out / MANIFEST)
    _write_json(out / TRANSFORM, {"spec": spec.to_dict(), "report": report.to_dict()})
    return report.to_dict()


def stage_featurize(src: Path, out: Path, drop: Sequence[str] = ()) -> dict:
    raws, _ = load_packets(src / PACKETS)
    m = _load_manifest(src)
    rows = m.by_uid()
    by_uid = {r.uid: r for r in raws}
    missing = [u for u in rows if u not in by_uid]
    if missing:
        raise ConfigError(f"manifest packet_uid {missing[0]} not found in {PACKETS}")
    uids = sorted(rows)
    schema = FeatureSchema()
    X = extract_matrix([decode(by_uid[u]) for u in uids], schema)
    if drop:
        try:
            X, schema = drop_features(X, schema, drop)
        except KeyError as e:
            raise ConfigError(str(e.args[0])) from None
    meta = [{"packet_uid": u, "flow_uid": rows[u].flow_uid, "label": rows[u].label,
             "partition": rows[u].partition, "fold": rows[u].fold} for u in uids]
    out.mkdir(parents=True, exist_ok=True)
    write_feature_csv(out / FEATURES, X, schema, meta)
    return {"rows": len(uids), "width": schema.width, "schema": schema.fingerprint()}


def _load_features(src: Path, drop: Sequence[str] = ()) -> tuple[np.ndarray, FeatureSchema, list[dict]]:
    p = src / FEATURES
    if not p.exists():
        raise ConfigError(f"missing stage input {p} (run the featurize stage first)")
    try:
        X, schema, meta = read_feature_csv(p)
        if drop:
            X, schema = drop_features(X, schema, drop)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from None
    return X, schema, meta


def _train_rows(meta: Sequence[dict], fold: int | None) -> np.ndarray:
    return np.array([i for i, m in enumerate(meta) if m["partition"] == "train"
                     and (fold is None or m["fold"] != fold)], dtype=np.int64)


def stage_train(src: Path, out: Path, params: ForestParams, fold: int | None = None,
                drop: Sequence[str] = ()) -> ForestModel:
    X, schema, meta = _load_features(src, drop)
    idx = _train_rows(meta, fold)
    if len(idx) == 0:
        raise ConfigError("no training rows (check the manifest partitions and fold)")
    model = train_forest(X[idx], [meta[i]["label"] for i in idx], params, schema.names, schema.fingerprint())
    out.mkdir(parents=True, exist_ok=True)
    (out / model_name(fold)).write_text(model.to_json())
    return model


def load_model(path: str | Path) -> ForestModel:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"model not found: {path}")
    try:
        return ForestModel.from_json(path.read_text())
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def align_features(model: ForestModel, X: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Columns of X in the model's feature order; a feature the model needs but X lacks is an error."""
    names = model.feature_names or list(schema.names)
    missing = [n for n in names if n not in schema.names]
    if missing:
        raise ConfigError(f"feature matrix lacks model feature {missing[0]!r}")
    return X[:, [schema.index(n) for n in names]]


def evaluate(model: ForestModel, X: np.ndarray, schema: FeatureSchema, meta: Sequence[dict],
             partition: str = "test", fold: int | None = None, vote_n: int = 5) -> dict:
    """Packet-level and flow-level (majority vote over the first packets) scores on one partition."""
    if partition == "val" and fold is not None:
        idx = [i for i, m in enumerate(meta) if m["partition"] == "train" and m["fold"] == fold]
    else:
        idx = [i for i, m in enumerate(meta) if m["partition"] == partition]
    if not idx:
        raise ConfigError(f"no rows in partition {partition!r}")
    Xa = align_features(model, X[idx], schema)
    pred = model.predict(Xa)
    proba = model.predict_proba(Xa)
    y = [meta[i]["label"] for i in idx]
    classes = [str(c) for c in model.classes]
    packet = EvalResult.from_predictions(y, [str(p) for p in pred], sorted(set(classes) | set(y)))
    uids = [meta[i]["packet_uid"] for i in idx]
    flow_of = {meta[i]["packet_uid"]: meta[i]["flow_uid"] for i in idx}
    flow_label = {meta[i]["flow_uid"]: meta[i]["label"] for i in idx}
    votes = flow_predictions(flow_of, uids, dict(zip(uids, map(str, pred))), dict(zip(uids, proba)), classes, vote_n)
    fl = sorted(votes)
    flow = EvalResult.from_predictions([flow_label[f] for f in fl], [votes[f] for f in fl],
                                       sorted(set(classes) | set(flow_label.values())))
    return {"packets": len(idx), "packet": packet.to_dict(), "flows": len(fl), "flow": flow.to_dict()}


def group_shares(importance: dict[str, float]) -> dict[str, float]:
    """Importance summed over the named feature groups."""
    return {g: float(sum(importance.get(n, 0.0) for n in names)) for g, names in FEATURE_GROUPS.items()}


def run_pipeline(cfg: RunConfig, out: str | Path) -> dict:
    """clean -> flows -> split -> sample -> transform -> featurize -> train (per fold) -> eval."""
    cfg.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    stages: dict = {}
    inputs, labels = list(cfg.inputs), cfg.labels
    if cfg.synth is not None:
        corpus_dir = out / "corpus"
        generate_corpus(SynthSpec(**cfg.synth)).write(corpus_dir)
        inputs, labels = [str(corpus_dir)], str(corpus_dir / "labels.json")
    stages["ingest"] = stage_ingest(inputs, labels, out)
    if cfg.clean:
        stages["cleaning"] = stage_clean(out, out, cfg.filters)
    stages["flows"] = stage_flows(out, out, cfg.flow_cap, cfg.seed)
    stages["split"] = stage_split(out, out, cfg.policy, cfg.ratios, cfg.folds, cfg.seed)
    if cfg.balance or cfg.fraction is not None:
        stages["sampling"] = stage_sample(out, out, cfg.balance, cfg.fraction, cfg.seed)
    if cfg.transform:
        stages["transform"] = stage_transform(out, out, TransformSpec.load(cfg.transform, cfg.scope, cfg.seed))
    stages["features"] = stage_featurize(out, out, cfg.drop_features)
    X, schema, meta = _load_features(out)
    params = cfg.forest_params()
    folds = list(range(cfg.folds)) if cfg.folds else [None]
    results, importances = [], []
    for f in folds:
        model = stage_train(out, out, params, f)
        res = {"fold": f, "test": evaluate(model, X, schema, meta, "test", None, cfg.flow_vote_packets)}
        if f is not None:
            res["val"] = evaluate(model, X, schema, meta, "val", f, cfg.flow_vote_packets)
        results.append(res)
        importances.append(model.feature_importance())
    imp = np.mean(importances, axis=0)
    importance = {n: float(v) for n, v in zip(schema.names, imp)}

    def summary(level: str, metric: str) -> dict:
        return mean_std([r["test"][level][metric] for r in results])

    report = {
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "stages": stages,
        "folds": results,
        "summary": {"packet_accuracy": summary("packet", "accuracy"), "packet_macro_f1": summary("packet", "macro_f1"),
                    "flow_accuracy": summary("flow", "accuracy"), "flow_macro_f1": summary("flow", "macro_f1")},
        "importance": importance,
        "importance_groups": group_shares(importance),
        "timing": {"seconds": round(time.perf_counter() - t0, 3)},
    }
    _write_json(out / REPORT, report)
    return report
