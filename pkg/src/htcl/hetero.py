"""Stage 1: measure how heterogeneous a dividing pattern is and search for a better one.

A pattern is scored by training a representation under it (cross-entropy
plus the heterogeneity loss) and then averaging the heterogeneity loss of
the frozen representation over one stratified epoch.  Lower is more
heterogeneous.  Candidate patterns come from a small network trained on the
frozen representation.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from htcl.data import Dataset, DividingPattern, stratified_batches
from htcl.errors import ContractError, DegeneratePatternError
from htcl import numcore as nc
from htcl.numcore import EPS_DIV, MlpModel, Tensor


@dataclass(frozen=True)
class Stage1Config:
    T1: int = 5
    lambda1: float = 0.01
    epochs_per_iter: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    repr_dim: int = 64
    hidden: tuple[int, ...] = (128, 128)
    reinit_per_iter: bool = False
    early_stop_tol: float = 1e-4
    early_stop_patience: int = 5
    divider_hidden: tuple[int, ...] = (256, 256, 256)
    divider_steps: int = 100
    divider_lr: float = 1e-3
    # "per_class": negated per-class entropy (default); "printed": the literal form
    divide_objective: str = "per_class"
    confidence_weight: float = 1.0
    seed: int = 0

    def validate(self):
        if self.T1 < 1 or self.lambda1 < 0 or self.repr_dim < 1:
            raise ContractError("Stage1Config needs T1 >= 1, lambda1 >= 0, repr_dim >= 1")
        if self.divide_objective not in ("per_class", "printed"):
            raise ContractError(f"unknown divide_objective {self.divide_objective!r}")
        if self.epochs_per_iter < 1 or self.batch_size < 2 or self.divider_steps < 1:
            raise ContractError("training budgets must be positive")


# distances -----------------------------------------------------------------


def within_dist(group) -> Tensor:
    """Sum of distinct-pair distances over |g|^2 - |g| (half the mean pair distance)."""
    g = nc.as_tensor(group)
    n = g.shape[0]
    if n < 2:
        raise ContractError("within_dist needs >= 2 rows")
    return nc.pairwise_distances(g).sum() / (2.0 * (n * n - n))


def cross_dist(group_a, group_b) -> Tensor:
    a, b = nc.as_tensor(group_a), nc.as_tensor(group_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("cross_dist needs non-empty groups")
    return nc.pairwise_distances(a, b).mean()


def _cell_pairs(classes, domains):
    """Cells present in the batch and the same-class, different-domain cell pairs."""
    classes = np.asarray(classes)
    domains = np.asarray(domains)
    keys = np.stack([classes, domains], axis=1)
    cells, member = np.unique(keys, axis=0, return_inverse=True)
    member = member.reshape(-1)
    left, right = [], []
    for g in range(len(cells)):
        for h in range(g + 1, len(cells)):
            if cells[g, 0] == cells[h, 0]:
                left.append(g)
                right.append(h)
    return cells, member, np.array(left, dtype=np.int64), np.array(right, dtype=np.int64)


def batch_heterogeneity_loss(reprs, classes, domains) -> Tensor:
    """Negated sum over classes and unordered domain pairs of log(cross / (within + within))."""
    reprs = nc.as_tensor(reprs)
    cells, member, left, right = _cell_pairs(classes, domains)
    if left.size == 0:
        return Tensor(0.0)
    onehot = np.zeros((member.size, len(cells)))
    onehot[np.arange(member.size), member] = 1.0
    sizes = onehot.sum(axis=0)
    # block sums of the distance matrix between every pair of cells
    block = onehot.T @ nc.pairwise_distances(reprs) @ onehot
    diag = np.arange(len(cells))
    ordered = sizes * sizes - sizes
    # singleton cells contribute within = 0
    within = block[diag, diag] * np.where(ordered > 0, 0.5 / np.maximum(ordered, 1), 0.0)
    cross = block[left, right] / (sizes[left] * sizes[right])
    ratio = cross / (within[left] + within[right] + EPS_DIV)
    return -nc.log(ratio).sum()


def variance_loss(phi: MlpModel, w: MlpModel, batch, classes, domains, lambda1: float) -> Tensor:
    reprs = nc.forward(phi, batch)
    ce = nc.softmax_cross_entropy(nc.forward(w, reprs), classes)
    if lambda1 == 0:
        return ce
    return ce + lambda1 * batch_heterogeneity_loss(reprs, classes, domains)


# measurement -----------------------------------------------------------------


def measure_H(phi: MlpModel, dataset: Dataset, pattern: DividingPattern,
              batch_size: int = 64, seed: int = 0) -> float:
    """Mean batch heterogeneity loss of a frozen representation over one epoch."""
    batches = stratified_batches(dataset, pattern, batch_size, seed)
    values = []
    for idx in batches:
        reprs = nc.forward(phi, dataset.features[idx]).data
        values.append(batch_heterogeneity_loss(
            reprs, dataset.class_labels[idx], pattern.assignment[idx]).item())
    return float(np.mean(values))


def init_variance_models(input_dim, num_classes, config: Stage1Config, rng):
    phi = MlpModel.init((input_dim, *config.hidden, config.repr_dim), rng)
    w = MlpModel.init((config.repr_dim, num_classes), rng)
    return phi, w


def train_variance_model(phi, w, dataset: Dataset, pattern: DividingPattern,
                         config: Stage1Config, seed: int):
    """Fit phi and w under ``pattern`` until the epoch budget or a plateau.

    Returns the fitted models and the per-epoch mean training loss.
    """
    state = nc.AdamState()
    history: list[float] = []
    for epoch in range(config.epochs_per_iter):
        losses = []
        for idx in stratified_batches(dataset, pattern, config.batch_size, seed * 7919 + epoch):
            loss = variance_loss(phi, w, dataset.features[idx], dataset.class_labels[idx],
                                 pattern.assignment[idx], config.lambda1)
            grads = nc.gradients(loss, phi.params + w.params)
            (phi, w), state = nc.adam_step([phi, w], grads, state, config.lr)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        window = config.early_stop_patience
        if len(history) > window and min(history[:-window]) - min(history[-window:]) < config.early_stop_tol:
            break
    return phi, w, history


# pattern generation ----------------------------------------------------------


def divide_loss(assignment_probs, classes, objective: str = "per_class",
                confidence_weight: float = 0.0) -> Tensor:
    """Loss guiding the pattern generator.

    ``per_class``: minus the summed entropy of each class's mean assignment,
    plus the shortfall of the smallest global domain share below 1/|E|,
    plus ``confidence_weight`` times the mean per-sample assignment entropy.
    ``printed``: entropy of the global mean assignment plus the same
    shortfall term.
    """
    p = nc.as_tensor(assignment_probs)
    if p.ndim != 2 or np.any(p.data < 0) or np.any(np.abs(p.data.sum(axis=1) - 1) > 1e-6):
        raise ContractError("assignment rows must be probability distributions")
    num_domains = p.shape[1]
    avg = p.mean(axis=0)
    balance = (1.0 / num_domains) - nc.vector_min(avg)
    if objective == "printed":
        return nc.entropy(avg) + balance
    if objective != "per_class":
        raise ContractError(f"unknown divide objective {objective!r}")
    classes = np.asarray(classes)
    per_class = [nc.entropy(p[np.flatnonzero(classes == c)].mean(axis=0))
                 for c in np.unique(classes)]
    loss = balance - nc.total(per_class)
    if confidence_weight:
        sample_entropy = -(p * nc.log(p + 1e-300)).sum(axis=1).mean()
        loss = loss + confidence_weight * sample_entropy
    return loss


def _standardize(features):
    x = np.asarray(features, dtype=np.float64)
    std = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(std > 1e-12, std, 1.0)


def _fit_divider(x, classes, num_domains, config: Stage1Config, seed):
    rng = np.random.default_rng(seed)
    f = MlpModel.init((x.shape[1], *config.divider_hidden, num_domains), rng)
    state = nc.AdamState()
    for _ in range(config.divider_steps):
        probs = nc.softmax(nc.forward(f, x))
        loss = divide_loss(probs, classes, config.divide_objective, config.confidence_weight)
        (f,), state = nc.adam_step([f], nc.gradients(loss, f.params), state, config.divider_lr)
    return np.argmax(nc.forward(f, x).data, axis=1)


def generate_pattern(features, classes, num_domains: int, config: Stage1Config,
                     seed: int = 0) -> DividingPattern:
    """Train a fresh divider on frozen features and take the row-wise argmax."""
    if num_domains < 2:
        raise ContractError("pattern generation needs >= 2 domains")
    x = _standardize(features)
    for attempt in range(2):
        assignment = _fit_divider(x, classes, num_domains, config, seed + 104729 * attempt)
        if np.bincount(assignment, minlength=num_domains).min() > 0:
            return DividingPattern(assignment, num_domains)
    raise DegeneratePatternError("generated pattern left a domain empty after one retry")


# the stage-1 loop --------------------------------------------------------------


@dataclass
class TraceEntry:
    iteration: int
    H: float
    pattern: DividingPattern
    train_loss: float
    elapsed: float


@dataclass
class HeterogeneityTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    best_H: float = 0.0
    best_pattern: DividingPattern | None = None
    best_set: bool = False
    best_iteration: int = -1

    def record(self, entry: TraceEntry):
        self.entries.append(entry)
        if not self.best_set or entry.H < self.best_H:
            self.best_H = entry.H
            self.best_pattern = entry.pattern
            self.best_set = True
            self.best_iteration = entry.iteration

    @property
    def H_values(self) -> list[float]:
        return [e.H for e in self.entries]

    def to_json(self) -> dict:
        return {
            "iterations": [
                {
                    "iteration": e.iteration,
                    "H": e.H,
                    "train_loss": e.train_loss,
                    "domain_counts": e.pattern.domain_counts().tolist(),
                    "elapsed_seconds": e.elapsed,
                }
                for e in self.entries
            ],
            "best_H": self.best_H,
            "best_iteration": self.best_iteration,
        }


Divider = Callable[[np.ndarray, np.ndarray, int, int], DividingPattern]


def run_stage1(dataset: Dataset, initial_pattern: DividingPattern, config: Stage1Config,
               divider: Divider | None = None, on_iteration=None):
    """Alternate representation fitting, measurement, and candidate generation.

    ``divider(features, classes, num_domains, seed)`` produces the next
    candidate; the default trains the pattern-generator network.
    ``on_iteration(k, phi, pattern)`` is called after each measurement.
    Returns the lowest-H pattern seen and the full trace.
    """
    config.validate()
    if len(initial_pattern) != dataset.n:
        raise ContractError("initial pattern length does not match dataset")
    num_domains = initial_pattern.num_domains
    if num_domains < 2:
        raise ContractError("Stage 1 needs >= 2 domains")
    if divider is None:
        def divider(feats, classes, k, seed):
            return generate_pattern(feats, classes, k, config, seed)

    rng = np.random.default_rng(config.seed)
    phi, w = init_variance_models(dataset.dim, dataset.num_classes, config, rng)
    trace = HeterogeneityTrace()
    pattern = initial_pattern
    start = time.perf_counter()
    for k in range(config.T1):
        if k > 0 and config.reinit_per_iter:
            phi, w = init_variance_models(dataset.dim, dataset.num_classes, config, rng)
        phi, w, history = train_variance_model(phi, w, dataset, pattern, config,
                                               seed=config.seed * 1000 + k)
        H = measure_H(phi, dataset, pattern, config.batch_size, seed=config.seed + 17)
        trace.record(TraceEntry(k, H, pattern, history[-1], time.perf_counter() - start))
        if on_iteration is not None:
            on_iteration(k, phi, pattern)
        feats = nc.forward(phi, dataset.features).data
        try:
            pattern = divider(feats, dataset.class_labels, num_domains, config.seed * 1000 + k)
        except DegeneratePatternError as exc:
            raise DegeneratePatternError(f"iteration {k}: {exc}") from exc
    return trace.best_pattern, trace
