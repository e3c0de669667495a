"""Sensitivity sweeps over T1, lambda1 and lambda_cont on their default grids.

    python scripts/run_sweeps.py --runs 3 --out results/sweeps
"""
import argparse
from pathlib import Path

from htcl import harness
from htcl.config import load_config


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config")
    parser.add_argument("--runs", type=int, default=3)
    parser.add_argument("--out", type=Path, default=Path("results/sweeps"))
    parser.add_argument("--parameters", nargs="+", choices=list(harness.SWEEP_GRIDS),
                        default=list(harness.SWEEP_GRIDS))
    args = parser.parse_args()

    config = load_config(args.config).replace(**{"experiment.num_runs": args.runs})
    for parameter in args.parameters:
        reports = harness.run_sweep(config, parameter, out_dir=args.out / parameter)
        print(f"\n{parameter}")
        for value, report in zip(harness.SWEEP_GRIDS[parameter], reports):
            agg = report.aggregate()
            print(f"  {value:<8} OOD {agg['test_acc_mean']:.3f} +- {agg['test_acc_std']:.3f}", flush=True)


if __name__ == "__main__":
    main()
