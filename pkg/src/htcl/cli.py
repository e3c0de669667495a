"""Command-line entry point: ``htcl <subcommand> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from htcl import harness
from htcl.baselines import METHODS, BaselineConfig, train_baseline
from htcl.config import ExperimentConfig, load_config, save_config
from htcl.data import (DividingPattern, generate_spurious, generate_toy, load_dataset,
                       load_pattern, save_dataset, save_pattern)
from htcl.errors import ConfigError, ContractError, DataError
from htcl.hetero import run_stage1
from htcl.invariant import accuracy, run_stage2

EXIT_CONFIG, EXIT_DATA, EXIT_CONTRACT = 2, 3, 4


def _config(args) -> ExperimentConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(**{"experiment.seed": args.seed, "stage1.seed": args.seed,
                                   "stage2.seed": args.seed, "baseline.seed": args.seed,
                                   "data.spec.seed": args.seed})
    return config.validate()


def _out(args, config) -> Path:
    out = Path(args.out or config.experiment.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _dataset(args, config):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    dataset, target = harness.load_source(config)
    if target is None:
        return dataset
    return harness.split(dataset, target, config.experiment.val_fraction, config.experiment.seed).train


def cmd_generate_data(args, config):
    out = _out(args, config)
    spec = config.data.spec
    if config.data.kind == "toy":
        save_dataset(generate_toy(spec), out / "toy.csv")
        files = ["toy.csv"]
    else:
        data = generate_spurious(spec)
        save_dataset(data.train, out / "train.csv")
        save_dataset(data.test, out / "test.csv")
        save_dataset(data.combined(), out / "combined.csv")
        files = ["train.csv", "test.csv", "combined.csv"]
    save_config(config, out / "config.txt")
    _emit({"written": files, "out": str(out)})


def _report(report, out, name):
    report.save(out / f"{name}.json")
    _emit(report.aggregate())


def cmd_run(args, config):
    out = _out(args, config)
    _report(harness.run_htcl(config, out), out, "report")


def cmd_stage1(args, config):
    dataset = _dataset(args, config)
    out = _out(args, config)
    initial = load_pattern(args.pattern, dataset.n) if args.pattern else DividingPattern.of(dataset)
    best, trace = run_stage1(dataset, initial, config.stage1)
    save_pattern(best, out / "pattern.csv")
    (out / "trace.json").write_text(json.dumps(trace.to_json(), indent=2) + "\n")
    _emit({"best_H": trace.best_H, "best_iteration": trace.best_iteration,
           "H": trace.H_values})


def cmd_stage2(args, config):
    dataset = _dataset(args, config)
    out = _out(args, config)
    pattern = load_pattern(args.pattern, dataset.n) if args.pattern else DividingPattern.of(dataset)
    result = run_stage2(dataset, pattern, config.stage2)
    phi, w = result.selected()
    harness.save_models(out / "model.json", phi=phi, w=w)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for row in result.log:
            fh.write(json.dumps(row) + "\n")
    _emit({"train_acc": accuracy(phi, w, dataset), "final": result.log[-1]})


def cmd_baseline(args, config):
    out = _out(args, config)
    if args.data:
        dataset = load_dataset(args.data)
        cfg = BaselineConfig(**{**config.baseline.__dict__, "method": args.method})
        result = train_baseline(dataset, DividingPattern.of(dataset), cfg)
        phi, w = result.selected()
        harness.save_models(out / f"model_{args.method}.json", phi=phi, w=w)
        _emit({"train_acc": accuracy(phi, w, dataset)})
        return
    _report(harness.run_baseline(config, args.method, out), out, f"baseline_{args.method}")


def cmd_ablate(args, config):
    out = _out(args, config)
    _report(harness.run_ablation(config, args.variant, out), out, f"ablation_{args.variant}")


def cmd_plugin(args, config):
    out = _out(args, config)
    report = harness.run_plugin(config, args.method, out)
    _emit({k: v for k, v in report.to_json().items() if k not in ("original", "generated")})


def cmd_sweep(args, config):
    try:
        values = json.loads(args.values) if args.values else None
    except json.JSONDecodeError:
        raise ConfigError(f"--values must be a JSON list, got {args.values!r}") from None
    if values is not None and not isinstance(values, list):
        raise ConfigError("--values must be a JSON list")
    out = _out(args, config)
    reports = harness.run_sweep(config, args.parameter, values, out)
    _emit([{"name": r.name, **r.aggregate()} for r in reports])


def cmd_audit(args, config):
    result = harness.audit(args.embeddings, args.classes, args.pattern,
                           config.stage1.batch_size, config.experiment.seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "audit.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _emit(result)


def cmd_eval(args, config):
    models = harness.load_models(args.model)
    dataset = load_dataset(args.data)
    _emit({"accuracy": harness.evaluate(models["phi"], models["w"], dataset), "n": dataset.n})


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="output directory (default: experiment.out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="htcl", description="Heterogeneity-based two-stage "
                                     "contrastive learning for domain generalization.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    add("generate-data", cmd_generate_data, "write the configured synthetic dataset as CSV")
    add("run", cmd_run, "full pipeline over experiment.num_runs runs")
    for name, func, text in (("stage1", cmd_stage1, "generate a heterogeneous dividing pattern"),
                             ("stage2", cmd_stage2, "train the predictor under a pattern")):
        p = add(name, func, text)
        p.add_argument("--data", help="dataset CSV (default: configured training split)")
        p.add_argument("--pattern", help="pattern CSV (default: the dataset's domain column)")
    p = add("baseline", cmd_baseline, "train a reference method")
    p.add_argument("--method", choices=METHODS, default="erm")
    p.add_argument("--data", help="train once on this CSV instead of the configured runs")
    p = add("ablate", cmd_ablate, "run one ablation variant")
    p.add_argument("--variant", choices=harness.ABLATIONS, required=True)
    p = add("plugin", cmd_plugin, "baseline on original vs generated domain labels")
    p.add_argument("--method", required=True, help="groupdro or coral")
    p = add("sweep", cmd_sweep, "sensitivity sweep over one hyperparameter")
    p.add_argument("--parameter", choices=tuple(harness.SWEEP_GRIDS), required=True)
    p.add_argument("--values", help="JSON list overriding the default grid")
    p = add("audit", cmd_audit, "heterogeneity of external embeddings under a pattern")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--pattern", required=True)
    p = add("eval", cmd_eval, "accuracy of a saved model on a dataset CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, _config(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return 0


if __name__ == "__main__":
    sys.exit(main())
