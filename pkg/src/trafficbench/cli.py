"""Command line: one subcommand per stage, plus ``pipeline`` for a whole run.

Exit codes: 0 success, 2 invalid input (config, missing file, schema
mismatch), 1 any other failure. ``TRAFFICBENCH_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _add_common(p: argparse.ArgumentParser, seed: bool = False) -> None:
    p.add_argument("--out", required=True, help="output directory (fixed file names inside)")
    p.add_argument("--in", dest="src", help="directory holding the previous stage's files (default: --out)")
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    if seed:
        p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trafficbench", description="Traffic classification benchmark tooling.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="read pcap files and a label map into packets.jsonl")
    _add_common(p)
    p.add_argument("--input", nargs="+", required=True, help="pcap files or directories of .pcap files")
    p.add_argument("--labels", help="JSON map from trace id, packet uid or 5-tuple to class")

    p = sub.add_parser("clean", help="drop extraneous protocols")
    _add_common(p)
    p.add_argument("--filters", help="FilterSet JSON (default: every built-in group)")

    p = sub.add_parser("flows", help="assemble bi-flows and cap long flows")
    _add_common(p, seed=True)
    p.add_argument("--cap", type=int, default=1000, help="max packets kept per flow (0 disables)")

    p = sub.add_parser("split", help="write manifest.jsonl")
    _add_common(p, seed=True)
    p.add_argument("--policy", choices=["per-flow", "per-packet"], default="per-flow")
    p.add_argument("--ratios", default=None, help="A:B[:C]; default 7:1 per-flow, 8:1:1 per-packet")
    p.add_argument("--folds", type=int, default=0, help="K folds over the train partition (0 = none)")

    p = sub.add_parser("sample", help="stratified sampling and/or balanced undersampling of the manifest")
    _add_common(p, seed=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--balance", action="store_true")

    p = sub.add_parser("transform", help="rewrite packets with a preset or JSON transform spec")
    _add_common(p, seed=True)
    p.add_argument("--transform", required=True, help="preset name or JSON path")
    p.add_argument("--scope", choices=["train", "test", "both"], default="both")

    p = sub.add_parser("featurize", help="write features.csv for manifest packets")
    _add_common(p)
    p.add_argument("--drop-features", default="", help="comma-separated names or groups")

    p = sub.add_parser("train", help="train a random forest on the train partition")
    _add_common(p, seed=True)
    p.add_argument("--fold", type=int, help="hold this fold out")
    p.add_argument("--n-trees", type=int, default=100)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--max-features", default="sqrt", help="sqrt, all, or an integer")
    p.add_argument("--drop-features", default="")

    p = sub.add_parser("eval", help="score a model, or a predictions CSV (columns y_true,y_pred)")
    _add_common(p)
    p.add_argument("--model", help="model JSON (default: <in>/model.json)")
    p.add_argument("--predictions", help="CSV with y_true,y_pred columns instead of a model")
    p.add_argument("--partition", choices=["train", "val", "test"], default="test")
    p.add_argument("--fold", type=int)
    p.add_argument("--vote-packets", type=int, default=5)

    p = sub.add_parser("purity", help="k-NN label purity of an embedding file")
    _add_common(p)
    p.add_argument("--embeddings", required=True, help="EMB v1 or EMBM v1 file")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--pooling", choices=["first", "mean", "luong"], default="mean")
    p.add_argument("--query", help="file with the luong query vector (whitespace separated)")
    p.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")

    p = sub.add_parser("qagen", help="header Q&A pre-training corpus from packets.jsonl")
    _add_common(p, seed=True)
    p.add_argument("--count", type=int, default=50_000)
    p.add_argument("--mix", help="type=share,... (default uniform over the 8 types)")
    p.add_argument("--no-replace", action="store_true", help="fail instead of reusing packets")
    p.add_argument("--reconstruct", action="store_true", help="emit reconstruction inputs instead of Q&A")

    p = sub.add_parser("synth", help="generate a labelled synthetic corpus")
    _add_common(p, seed=True)
    p.add_argument("--spec", help="SynthSpec JSON; flags below override it")
    p.add_argument("--classes", type=int)
    p.add_argument("--flows", type=int, help="flows per class")
    p.add_argument("--packets", type=int, help="packets per flow (mean when geometric)")
    p.add_argument("--length-dist", choices=["fixed", "geometric"])
    p.add_argument("--signal", choices=["none", "server_ip_per_class", "payload_length_per_class"])

    p = sub.add_parser("pipeline", help="run every stage from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides [run] out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--policy", choices=["per-flow", "per-packet"])
    p.add_argument("--ratios")
    p.add_argument("--folds", type=int)
    p.add_argument("--transform")
    p.add_argument("--scope", choices=["train", "test", "both"])
    p.add_argument("--drop-features")
    p.add_argument("--threads", type=int)
    return ap


def _configure(threads: int | None) -> None:
    level = os.environ.get("TRAFFICBENCH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    if threads:
        # only effective before numpy is first imported, which is why stage modules load lazily
        for var in THREAD_VARS:
            os.environ[var] = str(threads)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True, default=str))


def _run(args: argparse.Namespace) -> None:
    from . import pipeline as pl

    out = Path(args.out) if getattr(args, "out", None) else None
    src = Path(args.src) if getattr(args, "src", None) else out
    cmd = args.command

    if cmd == "ingest":
        _print(pl.stage_ingest(args.input, args.labels, out))
    elif cmd == "clean":
        _print(pl.stage_clean(src, out, args.filters))
    elif cmd == "flows":
        _print(pl.stage_flows(src, out, args.cap or None, args.seed))
    elif cmd == "split":
        ratios = pl.parse_ratios(args.ratios) if args.ratios else ((7, 1) if args.policy == "per-flow" else (8, 1, 1))
        if args.folds == 1 or args.folds < 0:
            raise pl.ConfigError("--folds must be 0 or >= 2")
        _print(pl.stage_split(src, out, args.policy, ratios, args.folds, args.seed))
    elif cmd == "sample":
        if args.fraction is None and not args.balance:
            raise pl.ConfigError("give --fraction and/or --balance")
        _print(pl.stage_sample(src, out, args.balance, args.fraction, args.seed))
    elif cmd == "transform":
        from .transforms import TransformSpec

        try:
            spec = TransformSpec.load(args.transform, args.scope, args.seed)
        except (KeyError, FileNotFoundError) as e:
            raise pl.ConfigError(f"transform {args.transform!r}: {e}") from None
        _print(pl.stage_transform(src, out, spec))
    elif cmd == "featurize":
        _print(pl.stage_featurize(src, out, pl._names(args.drop_features)))
    elif cmd == "train":
        from .learn import ForestParams

        mf = None if args.max_features == "all" else args.max_features if args.max_features == "sqrt" else int(args.max_features)
        params = ForestParams(n_trees=args.n_trees, max_depth=args.max_depth, max_features=mf, seed=args.seed)
        model = pl.stage_train(src, out, params, args.fold, pl._names(args.drop_features))
        _print({"model": str(out / pl.model_name(args.fold)), "trees": len(model.trees), "classes": model.classes})
    elif cmd == "eval":
        _eval(args, src, out, pl)
    elif cmd == "purity":
        _purity(args, out, pl)
    elif cmd == "qagen":
        _qagen(args, src, out, pl)
    elif cmd == "synth":
        _synth(args, out, pl)
    elif cmd == "pipeline":
        _pipeline(args, pl)


def _eval(args, src: Path, out: Path, pl) -> None:
    import csv

    from .learn import EvalResult

    out.mkdir(parents=True, exist_ok=True)
    if args.predictions:
        path = Path(args.predictions)
        if not path.exists():
            raise pl.ConfigError(f"predictions file not found: {path}")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for key in ("y_true", "y_pred"):
            if rows and key not in rows[0]:
                raise pl.ConfigError(f"predictions CSV lacks column {key!r}")
        res = EvalResult.from_predictions([r["y_true"] for r in rows], [r["y_pred"] for r in rows])
        report = {"packet": res.to_dict()}
    else:
        model = pl.load_model(args.model or (src / pl.model_name(args.fold)))
        X, schema, meta = pl._load_features(src)
        if model.schema_fingerprint and model.feature_names:
            pl.align_features(model, X[:0], schema)
        report = pl.evaluate(model, X, schema, meta, args.partition, args.fold, args.vote_packets)
    pl._write_json(out / pl.REPORT, report)
    _print(report)


def _purity(args, out: Path, pl) -> None:
    import numpy as np

    from .embeddings import knn_purity, read_any

    q = np.loadtxt(args.query, ndmin=1) if args.query else None
    emb = read_any(args.embeddings, args.pooling, q)
    res = knn_purity(emb, args.k, args.metric)
    out.mkdir(parents=True, exist_ok=True)
    pl._write_json(out / "purity.json", res.to_dict())
    _print(res.to_dict())


def _qagen(args, src: Path, out: Path, pl) -> None:
    from .codec import decode
    from .pretext import build_qa_corpus, reconstruction_instance, write_qa_jsonl

    raws, _ = pl.load_packets(src / pl.PACKETS)
    packets = [decode(r) for r in raws]
    if args.reconstruct:
        insts = [reconstruction_instance(p) for p in packets if p.net is not None and p.malformed is None]
    else:
        mix = None
        if args.mix:
            try:
                mix = {k: float(v) for k, v in (x.split("=") for x in pl._names(args.mix))}
            except ValueError:
                raise pl.ConfigError(f"--mix must look like type=share,..., got {args.mix!r}") from None
        insts = build_qa_corpus(packets, args.count, mix, args.seed, replace=not args.no_replace)
    out.mkdir(parents=True, exist_ok=True)
    write_qa_jsonl(out / "qa.jsonl", insts)
    _print({"instances": len(insts), "file": str(out / "qa.jsonl")})


def _synth(args, out: Path, pl) -> None:
    from .synth import SynthSpec, generate_corpus

    base = json.loads(Path(args.spec).read_text()) if args.spec else {}
    over = {"n_classes": args.classes, "flows_per_class": args.flows, "packets_per_flow": args.packets,
            "length_dist": args.length_dist, "class_signal": args.signal, "seed": args.seed}
    spec = SynthSpec(**{**base, **{k: v for k, v in over.items() if v is not None}})
    paths = generate_corpus(spec).write(out)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True))
    _print({"traces": len(paths), "labels": str(out / "labels.json")})


def _pipeline(args, pl) -> None:
    cfg = pl.RunConfig.from_ini(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.policy:
        cfg.policy = args.policy
    if args.ratios:
        cfg.ratios = pl.parse_ratios(args.ratios)
    if args.folds is not None:
        cfg.folds = args.folds
    if args.transform:
        cfg.transform = args.transform
    if args.scope:
        cfg.scope = args.scope
    if args.drop_features is not None:
        cfg.drop_features = pl._names(args.drop_features)
    if args.threads:
        cfg.threads = args.threads
    out = args.out or cfg.out
    if not out:
        raise pl.ConfigError("no output directory: pass --out or set [run] out")
    report = pl.run_pipeline(cfg, out)
    _print({"report": str(Path(out) / pl.REPORT), "config_hash": report["config_hash"], "summary": report["summary"]})


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure(getattr(args, "threads", None))
    from .pipeline import ConfigError

    log = logging.getLogger("trafficbench")
    try:
        _run(args)
    except (ConfigError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level boundary reports every failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
