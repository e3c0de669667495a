"""Stage 2: train the final predictor with covariance-based contrastive and alignment terms."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from htcl import numcore as nc
from htcl.data import Dataset, DividingPattern, batches_for_steps
from htcl.errors import ContractError
from htcl.numcore import EPS_DIV, MlpModel, Tensor


@dataclass(frozen=True)
class Stage2Config:
    T2: int = 5000
    lambda_cont: float = 1.0
    lambda_mmd: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    min_group: int = 2
    contrastive_variant: str = "ratio"
    hidden: tuple[int, ...] = (256, 256)
    repr_dim: int = 64
    eval_every: int = 500
    seed: int = 0

    def validate(self):
        if self.T2 < 1 or self.lambda_cont < 0 or self.lambda_mmd < 0 or self.min_group < 2:
            raise ContractError("Stage2Config needs T2 >= 1, lambdas >= 0, min_group >= 2")
        if self.contrastive_variant not in ("ratio", "infonce"):
            raise ContractError(f"unknown contrastive_variant {self.contrastive_variant!r}")
        if self.eval_every < 1:
            raise ContractError("eval_every must be >= 1")


def mmd(batch_a, batch_b) -> Tensor:
    """Squared Frobenius distance between covariances, scaled by 1 / (4 d^2)."""
    a, b = nc.as_tensor(batch_a), nc.as_tensor(batch_b)
    if a.shape[1] != b.shape[1]:
        raise ContractError("mmd inputs must have the same width")
    return _cov_distance(nc.covariance(a), nc.covariance(b))


def _cov_distance(cov_a: Tensor, cov_b: Tensor) -> Tensor:
    d = cov_a.shape[0]
    diff = cov_a - cov_b
    return (diff * diff).sum() / (4.0 * d * d)


@dataclass(frozen=True)
class PairSets:
    domain: int
    cls: int
    same: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    active: bool


def build_pairs(classes, domains, min_group: int = 2) -> list[PairSets]:
    """One anchor cell per (domain, class) present.

    ``same``: that cell; ``pos``: same class in any other domain; ``neg``:
    same domain, any other class.  A cell is active only when all three
    sets hold at least ``min_group`` members.
    """
    classes = np.asarray(classes)
    domains = np.asarray(domains)
    out = []
    for e in np.unique(domains):
        for y in np.unique(classes):
            same = np.flatnonzero((domains == e) & (classes == y))
            if same.size == 0:
                continue
            pos = np.flatnonzero((domains != e) & (classes == y))
            neg = np.flatnonzero((domains == e) & (classes != y))
            active = min(same.size, pos.size, neg.size) >= min_group
            out.append(PairSets(int(e), int(y), same, pos, neg, active))
    return out


def contrastive_loss(reprs, pairs: list[PairSets], variant: str = "ratio") -> Tensor:
    """Sum over active cells of log(1 + mmd(same, pos) / mmd(same, neg)).

    ``infonce`` uses the per-sample form instead: for each anchor sample,
    -log(sum_neg s / (sum_neg s + sum_pos s)) with s the squared distance
    between representations (the discrepancy of two point masses), averaged
    over anchors that have both kinds of partner.
    """
    reprs = nc.as_tensor(reprs)
    active = [p for p in pairs if p.active]
    if not active:
        return Tensor(0.0)
    if variant == "infonce":
        return _infonce(reprs, active)
    if variant != "ratio":
        raise ContractError(f"unknown contrastive variant {variant!r}")
    terms = []
    for cell in active:
        cov_s = nc.covariance(reprs[cell.same])
        near = _cov_distance(cov_s, nc.covariance(reprs[cell.pos]))
        far = _cov_distance(cov_s, nc.covariance(reprs[cell.neg]))
        terms.append(nc.log(1.0 + near / (far + EPS_DIV)))
    return nc.total(terms)


def _infonce(reprs: Tensor, cells: list[PairSets]) -> Tensor:
    sq = reprs * reprs
    norms = sq.sum(axis=1, keepdims=True)
    gram = reprs @ reprs.T
    dist2 = norms + norms.T - 2.0 * gram
    terms = []
    for cell in cells:
        block_neg = dist2[np.ix_(cell.same, cell.neg)].sum(axis=1)
        block_pos = dist2[np.ix_(cell.same, cell.pos)].sum(axis=1)
        frac = (block_neg + EPS_DIV) / (block_neg + block_pos + EPS_DIV)
        terms.append(-nc.log(frac).sum())
    count = sum(c.same.size for c in cells)
    return nc.total(terms) / count


def alignment_loss(reprs, domains, min_group: int = 2) -> Tensor:
    """Sum of mmd over unordered pairs of domains holding >= ``min_group`` samples."""
    reprs = nc.as_tensor(reprs)
    domains = np.asarray(domains)
    ids, counts = np.unique(domains, return_counts=True)
    qualifying = ids[counts >= min_group]
    if qualifying.size < 2:
        return Tensor(0.0)
    covs = [nc.covariance(reprs[np.flatnonzero(domains == e)]) for e in qualifying]
    terms = [_cov_distance(covs[i], covs[j])
             for i in range(len(covs)) for j in range(i + 1, len(covs))]
    return nc.total(terms)


def predict_loss(phi: MlpModel, w: MlpModel, batch, classes, domains,
                 config: Stage2Config) -> tuple[Tensor, dict]:
    """Cross-entropy plus weighted contrastive and alignment terms.

    Terms with a zero weight are not computed at all, so zero weights give
    exactly the cross-entropy.  Returns the loss and its components.
    """
    reprs = nc.forward(phi, batch)
    loss = nc.softmax_cross_entropy(nc.forward(w, reprs), classes)
    parts = {"ce": loss.item(), "cont": 0.0, "mmd": 0.0}
    if config.lambda_cont:
        pairs = build_pairs(classes, domains, config.min_group)
        cont = contrastive_loss(reprs, pairs, config.contrastive_variant)
        parts["cont"] = cont.item()
        loss = loss + config.lambda_cont * cont
    if config.lambda_mmd:
        align = alignment_loss(reprs, domains, config.min_group)
        parts["mmd"] = align.item()
        loss = loss + config.lambda_mmd * align
    parts["total"] = loss.item()
    return loss, parts


# training ----------------------------------------------------------------------


def predict(phi: MlpModel, w: MlpModel, features) -> np.ndarray:
    """Argmax class; ties go to the lowest class index."""
    return np.argmax(nc.forward(w, nc.forward(phi, features)).data, axis=1)


def accuracy(phi: MlpModel, w: MlpModel, dataset: Dataset) -> float:
    if dataset.n == 0:
        raise ContractError("cannot evaluate on an empty split")
    return float(np.mean(predict(phi, w, dataset.features) == dataset.class_labels))


@dataclass
class TrainResult:
    phi: MlpModel
    w: MlpModel
    log: list[dict] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)
    best_phi: MlpModel | None = None
    best_w: MlpModel | None = None
    best_step: int = -1
    best_val: float = -1.0

    def selected(self) -> tuple[MlpModel, MlpModel]:
        if self.best_phi is None:
            return self.phi, self.w
        return self.best_phi, self.best_w


LossFn = Callable[[MlpModel, MlpModel, np.ndarray, np.ndarray, np.ndarray], tuple[Tensor, dict]]


def train_predictor(dataset: Dataset, pattern: DividingPattern, loss_fn: LossFn, *,
                    steps: int, lr: float, batch_size: int, hidden, repr_dim: int,
                    seed: int, eval_every: int = 500,
                    validation: Dataset | None = None) -> TrainResult:
    """Fresh seeded phi/w trained with Adam over stratified batches.

    When ``validation`` is given, accuracy is checked every ``eval_every``
    steps and at the end; the best checkpoint is kept.
    """
    if len(pattern) != dataset.n:
        raise ContractError("pattern length does not match dataset")
    rng = np.random.default_rng(seed)
    phi = MlpModel.init((dataset.dim, *hidden, repr_dim), rng)
    w = MlpModel.init((repr_dim, dataset.num_classes), rng)
    state = nc.AdamState()
    result = TrainResult(phi, w)
    for step, idx in enumerate(batches_for_steps(dataset, pattern, batch_size, seed, steps), 1):
        loss, parts = loss_fn(phi, w, dataset.features[idx], dataset.class_labels[idx],
                              pattern.assignment[idx])
        grads = nc.gradients(loss, phi.params + w.params)
        (phi, w), state = nc.adam_step([phi, w], grads, state, lr)
        result.log.append({"step": step, **parts})
        if validation is not None and (step % eval_every == 0 or step == steps):
            acc = accuracy(phi, w, validation)
            result.checkpoints.append({"step": step, "val_acc": acc})
            if acc > result.best_val:
                result.best_val, result.best_step = acc, step
                result.best_phi, result.best_w = phi, w
    result.phi, result.w = phi, w
    return result


def run_stage2(dataset: Dataset, pattern: DividingPattern, config: Stage2Config,
               validation: Dataset | None = None) -> TrainResult:
    config.validate()

    def loss_fn(phi, w, x, y, d):
        return predict_loss(phi, w, x, y, d, config)

    return train_predictor(dataset, pattern, loss_fn, steps=config.T2, lr=config.lr,
                           batch_size=config.batch_size, hidden=config.hidden,
                           repr_dim=config.repr_dim, seed=config.seed,
                           eval_every=config.eval_every, validation=validation)
