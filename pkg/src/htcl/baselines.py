"""Reference objectives (ERM, IRM, GroupDRO, CORAL) and the K-means divider."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from htcl import numcore as nc
from htcl.data import Dataset, DividingPattern
from htcl.errors import ContractError
from htcl.invariant import Stage2Config, TrainResult, predict_loss, train_predictor
from htcl.numcore import MlpModel, Tensor

METHODS = ("erm", "irm", "groupdro", "coral")


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "erm"
    irm_lambda: float = 1.0
    groupdro_eta: float = 0.01
    lambda_mmd: float = 1.0
    steps: int = 5000
    lr: float = 1e-3
    batch_size: int = 64
    hidden: tuple[int, ...] = (256, 256)
    repr_dim: int = 64
    eval_every: int = 500
    seed: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown baseline {self.method!r}")
        if min(self.irm_lambda, self.groupdro_eta, self.lambda_mmd) < 0:
            raise ContractError("baseline weights must be >= 0")


def erm_loss(phi: MlpModel, w: MlpModel, batch, classes) -> Tensor:
    return nc.softmax_cross_entropy(nc.forward(w, nc.forward(phi, batch)), classes)


def irm_penalty(logits: Tensor, classes) -> Tensor:
    """Squared derivative of the risk w.r.t. a scalar logit multiplier at 1.0.

    d/ds CE(s * z) at s = 1 is mean_i(sum_k p_ik z_ik - z_iy).
    """
    classes = np.asarray(classes)
    probs = nc.softmax(logits)
    expected = (probs * logits).sum(axis=1)
    true_logit = logits[np.arange(classes.size), classes]
    slope = (expected - true_logit).mean()
    return slope * slope


def _split_by_domain(batch, classes, domains):
    batch, classes, domains = np.asarray(batch), np.asarray(classes), np.asarray(domains)
    return [(batch[domains == e], classes[domains == e]) for e in np.unique(domains)]


def irm_loss(phi: MlpModel, w: MlpModel, domain_batches, irm_lambda: float) -> Tensor:
    terms = []
    for x, y in domain_batches:
        if len(y) == 0:
            continue
        logits = nc.forward(w, nc.forward(phi, x))
        risk = nc.softmax_cross_entropy(logits, y)
        terms.append(risk + irm_lambda * irm_penalty(logits, y) if irm_lambda else risk)
    return nc.total(terms)


def groupdro_loss(phi: MlpModel, w: MlpModel, domain_batches, weights, eta: float):
    """Exponentiated-gradient group weights and the weighted risk.

    ``domain_batches`` is indexed by domain id; an empty entry leaves that
    domain's weight untouched.  Returns (loss, new weights).
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != len(domain_batches) or np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9:
        raise ContractError("groupdro weights must be a distribution over the domains")
    risks: dict[int, Tensor] = {}
    for e, (x, y) in enumerate(domain_batches):
        if len(y):
            risks[e] = erm_loss(phi, w, x, y)
    new = weights.copy()
    for e, risk in risks.items():
        new[e] = weights[e] * np.exp(eta * risk.item())
    new /= new.sum()
    loss = nc.total([new[e] * risk for e, risk in risks.items()])
    return loss, new


def coral_loss(phi: MlpModel, w: MlpModel, batch, classes, domains, lambda_mmd: float,
               min_group: int = 2) -> Tensor:
    config = Stage2Config(lambda_cont=0.0, lambda_mmd=lambda_mmd, min_group=min_group)
    return predict_loss(phi, w, batch, classes, domains, config)[0]


def train_baseline(dataset: Dataset, pattern: DividingPattern, config: BaselineConfig,
                   validation: Dataset | None = None) -> TrainResult:
    config.validate()
    num_domains = pattern.num_domains

    if config.method == "erm":
        def loss_fn(phi, w, x, y, d):
            loss = erm_loss(phi, w, x, y)
            return loss, {"ce": loss.item(), "total": loss.item()}
    elif config.method == "irm":
        def loss_fn(phi, w, x, y, d):
            loss = irm_loss(phi, w, _split_by_domain(x, y, d), config.irm_lambda)
            return loss, {"total": loss.item()}
    elif config.method == "groupdro":
        state = {"q": np.full(num_domains, 1.0 / num_domains)}

        def loss_fn(phi, w, x, y, d):
            batches = [(x[d == e], y[d == e]) for e in range(num_domains)]
            loss, state["q"] = groupdro_loss(phi, w, batches, state["q"], config.groupdro_eta)
            return loss, {"total": loss.item(), "max_weight": float(state["q"].max())}
    else:
        stage2 = Stage2Config(lambda_cont=0.0, lambda_mmd=config.lambda_mmd)

        def loss_fn(phi, w, x, y, d):
            return predict_loss(phi, w, x, y, d, stage2)

    return train_predictor(dataset, pattern, loss_fn, steps=config.steps, lr=config.lr,
                           batch_size=config.batch_size, hidden=config.hidden,
                           repr_dim=config.repr_dim, seed=config.seed,
                           eval_every=config.eval_every, validation=validation)


# k-means ----------------------------------------------------------------------


def _plus_plus(x, k, rng):
    centers = [x[rng.integers(x.shape[0])]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        idx = rng.integers(x.shape[0]) if total == 0 else rng.choice(x.shape[0], p=d2 / total)
        centers.append(x[idx])
    return np.array(centers)


def kmeans(features, k: int, seed: int = 0, max_iter: int = 50, tol: float = 1e-6):
    """Lloyd iterations from k-means++ seeds.

    Returns (labels, centers, inertia history); inertia is recorded after
    each assignment step.  An emptied cluster is reseeded at the point
    farthest from its current center.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise ContractError(f"kmeans needs 1 <= k <= n (k={k}, n={n})")
    rng = np.random.default_rng(seed)
    centers = _plus_plus(x, k, rng)
    history = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), labels].sum()))
        new = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(n), labels]))
                new[j] = x[far]
                labels[far] = j
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift < tol:
            break
    d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, centers, history


def kmeans_pattern(features, k: int, seed: int = 0) -> DividingPattern:
    labels, _, _ = kmeans(features, k, seed)
    return DividingPattern(labels, k)
