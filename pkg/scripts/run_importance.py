"""Feature-importance shift: a class-specific server address, with and without IP octets.

Prints the importance share of each feature group for both runs.
"""

import argparse
import json
from pathlib import Path

from trafficbench.pipeline import RunConfig, run_pipeline

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/importance")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--top", type=int, default=8, help="single features listed per run")
    args = ap.parse_args()
    out = Path(args.out)
    summary = {}
    for name in ("importance-serverip", "importance-serverip-noip"):
        cfg = RunConfig.from_ini(CONFIGS / f"{name}.cfg")
        if args.seed is not None:
            cfg.seed = args.seed
        report = run_pipeline(cfg, out / name)
        groups = report["importance_groups"]
        top = sorted(report["importance"].items(), key=lambda kv: -kv[1])[: args.top]
        summary[name] = {"groups": groups, "top": top}
        print(f"== {name} (accuracy {report['summary']['packet_accuracy']['mean']:.3f})")
        for g, v in sorted(groups.items(), key=lambda kv: -kv[1]):
            print(f"  {g:15s} {v:.3f}")
        print("  top features: " + ", ".join(f"{n} {v:.3f}" for n, v in top))
    (out / "summary.json").write_text(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
