"""Spurious-correlation benchmark: ERM, HTCL, the three ablations, and the plug-in runs.

Writes one RunReport JSON per method under --out and prints a summary table
of mean/std OOD accuracy.

    python scripts/run_benchmark.py --runs 5 --out results/benchmark
    python scripts/run_benchmark.py --config my.cfg --only htcl erm
"""
import argparse
import json
import time
from pathlib import Path

from htcl import harness
from htcl.config import load_config

JOBS = ["erm", "irm", "groupdro", "coral", "htcl", *harness.ABLATIONS,
        *(f"plugin_{m}" for m in harness.PLUGIN_METHODS)]


def run_job(name, config, out):
    if name == "htcl":
        return harness.run_htcl(config, out)
    if name in harness.ABLATIONS:
        return harness.run_ablation(config, name, out)
    if name.startswith("plugin_"):
        return harness.run_plugin(config, name.removeprefix("plugin_"), out)
    return harness.run_baseline(config, name, out)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config")
    parser.add_argument("--runs", type=int, default=5)
    parser.add_argument("--out", type=Path, default=Path("results/benchmark"))
    parser.add_argument("--only", nargs="+", choices=JOBS, default=JOBS)
    args = parser.parse_args()

    config = load_config(args.config).replace(**{"experiment.num_runs": args.runs})
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in args.only:
        start = time.perf_counter()
        report = run_job(name, config, args.out)
        elapsed = time.perf_counter() - start
        if isinstance(report, harness.PluginReport):
            for label, sub in (("original", report.original), ("generated", report.generated)):
                agg = sub.aggregate()
                rows.append((f"{name} ({label} labels)", agg["test_acc_mean"], agg["test_acc_std"],
                             agg["val_acc_mean"], elapsed))
        else:
            agg = report.aggregate()
            rows.append((name, agg["test_acc_mean"], agg["test_acc_std"], agg["val_acc_mean"], elapsed))
        print(f"{rows[-1][0]:<32} OOD {rows[-1][1]:.3f} +- {rows[-1][2]:.3f}  ({elapsed:.0f}s)", flush=True)

    summary = [{"method": r[0], "ood_mean": r[1], "ood_std": r[2], "val_mean": r[3], "seconds": r[4]}
               for r in rows]
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print("\n| method | OOD acc | val acc |\n|---|---|---|")
    for r in rows:
        print(f"| {r[0]} | {100 * r[1]:.1f} ± {100 * r[2]:.1f} | {100 * r[3]:.1f} |")


if __name__ == "__main__":
    main()
