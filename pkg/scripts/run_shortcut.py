"""Shortcut-learning experiment: per-packet vs per-flow split vs header randomization on test.

Runs the three shortcut configs and prints packet accuracy for each, plus the
drop caused by randomizing seq/ack and TCP timestamps on the test partition.
"""

import argparse
import json
import time
from pathlib import Path

from trafficbench.pipeline import RunConfig, run_pipeline

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
RUNS = [("per-packet split", "shortcut-perpacket"), ("per-flow split", "shortcut-perflow"),
        ("per-packet, table5 on test", "shortcut-table5")]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/shortcut")
    ap.add_argument("--seed", type=int, help="override the master seed of every run")
    args = ap.parse_args()
    out = Path(args.out)
    rows = {}
    t0 = time.perf_counter()
    for title, name in RUNS:
        cfg = RunConfig.from_ini(CONFIGS / f"{name}.cfg")
        if args.seed is not None:
            cfg.seed = args.seed
        report = run_pipeline(cfg, out / name)
        rows[title] = report["summary"]["packet_accuracy"]["mean"]
        print(f"{title:30s} accuracy {rows[title]:.3f}  ({report['timing']['seconds']:.0f}s)")
    drop = rows[RUNS[0][0]] - rows[RUNS[2][0]]
    print(f"{'drop from randomization':30s} {drop:.3f}")
    print(f"total {time.perf_counter() - t0:.0f}s")
    (out / "summary.json").write_text(json.dumps({"accuracy": rows, "drop": drop}, indent=1))


if __name__ == "__main__":
    main()
