"""Experiment orchestration: splits, evaluation, full runs, ablations, plug-in, sweeps, audit."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import adjusted_rand_score

from htcl import numcore as nc
from htcl.baselines import BaselineConfig, kmeans_pattern, train_baseline
from htcl.config import ExperimentConfig, flatten
from htcl.data import (Dataset, DividingPattern, generate_spurious, generate_toy, load_dataset,
                       load_labels, load_matrix, load_pattern, save_matrix, save_pattern)
from htcl.errors import ContractError
from htcl.hetero import measure_H, run_stage1
from htcl.invariant import TrainResult, accuracy, run_stage2
from htcl.numcore import MlpModel

log = logging.getLogger(__name__)

ABLATIONS = ("no_stage1", "kmeans_divider", "no_contrastive")
PLUGIN_METHODS = ("groupdro", "coral")
SWEEP_GRIDS = {
    "T1": (1, 3, 5, 7, 9),
    "lambda1": (0.0, 1e-3, 1e-2, 1e-1, 1.0),
    "lambda_cont": (0.5, 1.0, 1.5, 2.0, 2.5),
}
SWEEP_KEYS = {"T1": "stage1.T1", "lambda1": "stage1.lambda1", "lambda_cont": "stage2.lambda_cont"}


# data ----------------------------------------------------------------------------


def load_source(config: ExperimentConfig) -> tuple[Dataset, int | None]:
    """The configured dataset and its held-out domain id (None: nothing held out)."""
    data = config.data
    if data.kind == "toy":
        return generate_toy(data.spec), data.target_domain
    if data.kind == "spurious":
        combined = generate_spurious(data.spec).combined()
        target = combined.num_domains - 1 if data.target_domain is None else data.target_domain
        return combined, target
    return load_dataset(data.path), data.target_domain


@dataclass
class Split:
    train: Dataset
    validation: Dataset
    test: Dataset | None
    source_domains: tuple[int, ...]
    warnings: list[str] = field(default_factory=list)


def split(dataset: Dataset, target_domain: int | None, fraction: float, seed: int) -> Split:
    """Hold out ``target_domain``; split every source domain per class into train/validation.

    Source domain ids are renumbered 0..k-1 in increasing order; the pooled
    validation set keeps that numbering.
    """
    if not 0 < fraction < 1:
        raise ContractError("validation fraction must lie in (0, 1)")
    domains = dataset.domain_labels
    if target_domain is not None and not np.any(domains == target_domain):
        raise ContractError(f"target domain {target_domain} not present")
    sources = tuple(int(e) for e in np.unique(domains) if e != target_domain)
    remap = {e: i for i, e in enumerate(sources)}
    rng = np.random.default_rng(seed)
    train_idx, val_idx, warnings = [], [], []
    for e in sources:
        for c in range(dataset.num_classes):
            idx = np.flatnonzero((domains == e) & (dataset.class_labels == c))
            if idx.size == 0:
                warnings.append(f"class {c} absent from source domain {e}")
                continue
            idx = idx[rng.permutation(idx.size)]
            n_val = int(round(fraction * idx.size))
            val_idx.append(idx[:n_val])
            train_idx.append(idx[n_val:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    for w in warnings:
        log.warning(w)

    def carve(index):
        mapped = np.array([remap[e] for e in domains[index]], dtype=np.int64)
        return dataset.subset(index, mapped, len(sources))

    test = None
    if target_domain is not None:
        test_idx = np.flatnonzero(domains == target_domain)
        test = dataset.subset(test_idx, np.zeros(test_idx.size, dtype=np.int64), 1)
    return Split(carve(train_idx), carve(val_idx), test, sources, warnings)


def evaluate(phi: MlpModel, w: MlpModel, dataset: Dataset | None) -> float:
    """Fraction of argmax predictions equal to the class label (ties -> lowest index)."""
    if dataset is None or dataset.n == 0:
        raise ContractError("cannot evaluate on an empty split")
    return accuracy(phi, w, dataset)


# reports ---------------------------------------------------------------------------


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    arr = np.array(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class RunReport:
    """Per-run metrics plus population mean/std over runs."""

    name: str
    runs: list[dict]
    config: dict
    created: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S"))

    def aggregate(self) -> dict:
        out = {}
        for key in ("val_acc", "test_acc", "pattern_ari", "best_H"):
            mean, std = _mean_std([r.get(key) for r in self.runs])
            out[f"{key}_mean"], out[f"{key}_std"] = mean, std
        return out

    @property
    def test_mean(self) -> float | None:
        return self.aggregate()["test_acc_mean"]

    def metrics(self) -> dict:
        """Everything except the timestamp."""
        return {"name": self.name, "runs": self.runs, "aggregate": self.aggregate(),
                "config": self.config}

    def to_json(self) -> dict:
        return {**self.metrics(), "created": self.created}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def _config_echo(config: ExperimentConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in flatten(config).items()}


def _pattern_ari(dataset: Dataset, pattern: DividingPattern):
    if dataset.latent_groups is None:
        return None
    return float(adjusted_rand_score(dataset.latent_groups, pattern.assignment))


def _run_dir(out_dir, name, r):
    if out_dir is None:
        return None
    path = Path(out_dir) / name / f"run{r}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def save_models(path, **models: MlpModel) -> None:
    """JSON dump of named models; floats are written with repr so they round-trip exactly."""
    payload = {"format": "htcl-mlp", "version": 1, "models": {
        name: {"layer_dims": list(m.layer_dims),
               "params": [p.data.tolist() for p in m.params]}
        for name, m in models.items()}}
    Path(path).write_text(json.dumps(payload))


def load_models(path) -> dict[str, MlpModel]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "htcl-mlp" or payload.get("version") != 1:
        raise ContractError(f"{path}: not an htcl-mlp v1 model file")
    out = {}
    for name, spec in payload["models"].items():
        dims = tuple(spec["layer_dims"])
        arrays = [np.array(p, dtype=np.float64) for p in spec["params"]]
        shell = MlpModel.init(dims, np.random.default_rng(0))
        out[name] = shell.with_params(arrays)
    return out


# pipeline pieces -------------------------------------------------------------------


# Stage 1 is deterministic in (training data, initial pattern, config), so
# default-divider results are shared between runs, ablations and plug-in.
_STAGE1_CACHE: dict = {}


def _fingerprint(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for arr in (dataset.features, dataset.class_labels, dataset.domain_labels):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _stage1(cfg: ExperimentConfig, sp: Split, seed: int, divider=None, run_dir=None):
    stage1 = cfg.stage1.__class__(**{**cfg.stage1.__dict__, "seed": seed})
    key = (_fingerprint(sp.train), repr(stage1))
    if divider is None and key in _STAGE1_CACHE:
        best, trace = _STAGE1_CACHE[key]
    else:
        best, trace = run_stage1(sp.train, DividingPattern.of(sp.train), stage1, divider=divider)
        if divider is None:
            _STAGE1_CACHE[key] = (best, trace)
    if run_dir is not None:
        save_pattern(best, run_dir / "pattern.csv")
        (run_dir / "trace.json").write_text(json.dumps(
            {**trace.to_json(), "config": _config_echo(cfg)}, indent=2))
    return best, trace


def _finish(result: TrainResult, sp: Split, row: dict, run_dir):
    phi, w = result.selected()
    row["val_acc"] = evaluate(phi, w, sp.validation)
    row["test_acc"] = evaluate(phi, w, sp.test) if sp.test is not None else None
    row["selected_step"] = result.best_step
    if run_dir is not None:
        with open(run_dir / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for entry in result.log:
                fh.write(json.dumps(entry) + "\n")
        save_models(run_dir / "model.json", phi=phi, w=w)
        save_matrix(nc.forward(phi, sp.train.features).data, run_dir / "embeddings.csv")
    return row


def _stage2(cfg: ExperimentConfig, sp: Split, pattern: DividingPattern, seed: int):
    stage2 = cfg.stage2.__class__(**{**cfg.stage2.__dict__, "seed": seed})
    return run_stage2(sp.train, pattern, stage2, validation=sp.validation)


def _run_seed(cfg: ExperimentConfig, r: int) -> int:
    return cfg.experiment.seed + 1000 * r


def _pipeline(cfg: ExperimentConfig, name: str, variant: str | None, out_dir):
    cfg.validate()
    dataset, target = load_source(cfg)
    runs = []
    for r in range(cfg.experiment.num_runs):
        seed = _run_seed(cfg, r)
        sp = split(dataset, target, cfg.experiment.val_fraction, seed)
        run_dir = _run_dir(out_dir, name, r)
        row = {"run": r, "seed": seed, "warnings": sp.warnings}
        if variant == "no_stage1":
            pattern = DividingPattern.of(sp.train)
            row["best_H"] = None
        else:
            divider = None
            if variant == "kmeans_divider":
                def divider(feats, classes, k, s):
                    return kmeans_pattern(feats, k, s)
            pattern, trace = _stage1(cfg, sp, seed, divider, run_dir)
            row["best_H"] = trace.best_H
            row["H_trace"] = trace.H_values
        row["pattern_ari"] = _pattern_ari(sp.train, pattern)
        stage_cfg = cfg.replace(**{"stage2.lambda_cont": 0.0}) if variant == "no_contrastive" else cfg
        result = _stage2(stage_cfg, sp, pattern, seed)
        row["cont_max"] = float(max(e["cont"] for e in result.log))
        runs.append(_finish(result, sp, row, run_dir))
    report = RunReport(name, runs, _config_echo(cfg))
    if out_dir is not None:
        report.save(Path(out_dir) / name / "report.json")
    return report


def run_htcl(config: ExperimentConfig, out_dir=None) -> RunReport:
    """Split, Stage 1 on the training part, Stage 2 with the best pattern, test; per run."""
    return _pipeline(config, "htcl", None, out_dir)


def run_ablation(config: ExperimentConfig, variant: str, out_dir=None) -> RunReport:
    if variant not in ABLATIONS:
        raise ContractError(f"unknown ablation {variant!r}; choose from {ABLATIONS}")
    return _pipeline(config, f"ablation_{variant}", variant, out_dir)


def _baseline_cfg(config: ExperimentConfig, method: str, seed: int) -> BaselineConfig:
    return BaselineConfig(**{**config.baseline.__dict__, "method": method, "seed": seed})


def run_baseline(config: ExperimentConfig, method: str, out_dir=None) -> RunReport:
    """A baseline trained on the original domain labels."""
    config.validate()
    dataset, target = load_source(config)
    runs = []
    for r in range(config.experiment.num_runs):
        seed = _run_seed(config, r)
        sp = split(dataset, target, config.experiment.val_fraction, seed)
        result = train_baseline(sp.train, DividingPattern.of(sp.train),
                                _baseline_cfg(config, method, seed), sp.validation)
        row = {"run": r, "seed": seed, "warnings": sp.warnings}
        runs.append(_finish(result, sp, row, _run_dir(out_dir, f"baseline_{method}", r)))
    report = RunReport(f"baseline_{method}", runs, _config_echo(config))
    if out_dir is not None:
        report.save(Path(out_dir) / f"baseline_{method}" / "report.json")
    return report


@dataclass
class PluginReport:
    method: str
    original: RunReport
    generated: RunReport

    @property
    def delta(self) -> float:
        return self.generated.test_mean - self.original.test_mean

    def to_json(self) -> dict:
        return {"method": self.method,
                "original_test_acc": self.original.test_mean,
                "generated_test_acc": self.generated.test_mean,
                "delta": self.delta,
                "original": self.original.to_json(),
                "generated": self.generated.to_json()}


def run_plugin(config: ExperimentConfig, method: str, out_dir=None) -> PluginReport:
    """Train ``method`` once on the original labels and once on Stage-1 labels."""
    if method not in PLUGIN_METHODS:
        raise ContractError(f"plug-in needs a domain-aware baseline {PLUGIN_METHODS}, got {method!r}")
    config.validate()
    dataset, target = load_source(config)
    rows = {"original": [], "generated": []}
    for r in range(config.experiment.num_runs):
        seed = _run_seed(config, r)
        sp = split(dataset, target, config.experiment.val_fraction, seed)
        generated, trace = _stage1(config, sp, seed)
        for label, pattern in (("original", DividingPattern.of(sp.train)), ("generated", generated)):
            result = train_baseline(sp.train, pattern, _baseline_cfg(config, method, seed),
                                    sp.validation)
            row = {"run": r, "seed": seed, "pattern_ari": _pattern_ari(sp.train, pattern),
                   "best_H": trace.best_H if label == "generated" else None}
            rows[label].append(_finish(result, sp, row,
                                       _run_dir(out_dir, f"plugin_{method}_{label}", r)))
    echo = _config_echo(config)
    report = PluginReport(method, RunReport(f"plugin_{method}_original", rows["original"], echo),
                          RunReport(f"plugin_{method}_generated", rows["generated"], echo))
    if out_dir is not None:
        path = Path(out_dir) / f"plugin_{method}.json"
        path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return report


def run_sweep(config: ExperimentConfig, parameter: str, values=None, out_dir=None) -> list[RunReport]:
    """One full run per value with only ``parameter`` changed."""
    if parameter not in SWEEP_KEYS:
        raise ContractError(f"unknown sweep parameter {parameter!r}; choose from {tuple(SWEEP_KEYS)}")
    values = SWEEP_GRIDS[parameter] if values is None else tuple(values)
    if not values:
        raise ContractError("sweep needs at least one value")
    reports = []
    for value in values:
        cfg = config.replace(**{SWEEP_KEYS[parameter]: value})
        sub = None if out_dir is None else Path(out_dir) / f"{parameter}={value}"
        report = run_htcl(cfg, sub)
        report.name = f"sweep_{parameter}={value}"
        reports.append(report)
    if out_dir is not None:
        write_sweep_summary(parameter, values, reports, Path(out_dir) / "sweep_summary.csv")
    return reports


def write_sweep_summary(parameter, values, reports, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([parameter, "test_acc_mean", "test_acc_std", "val_acc_mean", "val_acc_std"])
        for value, report in zip(values, reports):
            agg = report.aggregate()
            writer.writerow([value, agg["test_acc_mean"], agg["test_acc_std"],
                             agg["val_acc_mean"], agg["val_acc_std"]])


# audit -------------------------------------------------------------------------------


def audit(embeddings_path, classes_path, pattern_path, batch_size: int = 64, seed: int = 0) -> dict:
    """Heterogeneity of externally supplied embeddings under a pattern."""
    emb = load_matrix(embeddings_path)
    n = emb.shape[0]
    classes = load_labels(classes_path, n)
    pattern = load_pattern(pattern_path, n)
    if pattern.num_domains < 2:
        raise ContractError("audit needs a pattern with >= 2 domains")
    num_classes = int(classes.max()) + 1
    dataset = Dataset(emb, classes, pattern.assignment, num_classes, pattern.num_domains,
                      allow_missing_classes=True)
    identity = MlpModel((emb.shape[1], emb.shape[1]),
                        [nc.Tensor(np.eye(emb.shape[1]))], [nc.Tensor(np.zeros((1, emb.shape[1])))])
    H = measure_H(identity, dataset, pattern, batch_size, seed)
    per_class = {}
    for c in range(num_classes):
        members = np.flatnonzero(classes == c)
        if np.unique(pattern.assignment[members]).size < 2:
            continue
        sub = dataset.subset(members)
        sub_pattern = DividingPattern(pattern.assignment[members], pattern.num_domains)
        per_class[str(c)] = measure_H(identity, sub, sub_pattern, batch_size, seed)
    return {"H": H, "per_class": per_class, "n": n, "num_domains": pattern.num_domains,
            "domain_counts": pattern.domain_counts().tolist()}
