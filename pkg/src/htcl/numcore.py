"""Dense float64 tensors with a small reverse-mode gradient tape.

Every differentiable quantity in the package (cross-entropy, heterogeneity
ratios, covariance discrepancies, the divide loss) is built from the ops
below, and :func:`gradients` walks the recorded graph backwards.  Nothing
here keeps global state: a graph lives only as long as its output tensor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from htcl.errors import ContractError, InsufficientSamplesError

EPS_DIV = 1e-8
DTYPE = np.float64


def _unbroadcast(grad, shape):
    # sum out the axes numpy broadcasting introduced
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        return f"Tensor({self.data!r})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(
            a / b,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self.data
        return Tensor(a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, index):
        shape = self.shape

        def back(g):
            out = np.zeros(shape, dtype=DTYPE)
            np.add.at(out, index, g)
            return (out,)

        return Tensor(self.data[index], (self,), back)

    @property
    def T(self):
        return Tensor(self.data.T, (self,), lambda g: (g.T,))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / count


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    a = x.data
    return Tensor(np.log(a), (x,), lambda g: (g / a,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor(out, (x,), lambda g: (g * out,))


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return Tensor(out, (logits,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def softmax(logits: Tensor) -> Tensor:
    return exp(log_softmax(logits))


def vector_min(x: Tensor) -> Tensor:
    """Minimum entry; the gradient flows to the first minimizing coordinate."""
    flat = x.data.reshape(-1)
    k = int(np.argmin(flat))
    shape = x.shape

    def back(g):
        out = np.zeros(flat.shape, dtype=DTYPE)
        out[k] = g
        return (out.reshape(shape),)

    return Tensor(flat[k], (x,), back)


def pairwise_distances(a: Tensor, b: Tensor | None = None) -> Tensor:
    """Euclidean distance matrix between the rows of ``a`` and ``b``.

    Coincident rows get a zero subgradient instead of NaN.
    """
    same = b is None
    b = a if same else b
    diff = a.data[:, None, :] - b.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    safe = np.where(dist > 0, dist, 1.0)
    unit = diff / safe[:, :, None] * (dist > 0)[:, :, None]

    def back(g):
        weighted = unit * g[:, :, None]
        ga = weighted.sum(axis=1)
        gb = -weighted.sum(axis=0)
        if same:
            return (ga + gb,)
        return (ga, gb)

    return Tensor(dist, (a,) if same else (a, b), back)


def stack(scalars: Sequence[Tensor]) -> Tensor:
    def back(g):
        return tuple(g[i] for i in range(len(scalars)))

    return Tensor(np.array([s.data for s in scalars]), tuple(scalars), back)


def total(terms: Sequence[Tensor]) -> Tensor:
    """Sum of scalar tensors; an empty sequence gives a constant zero."""
    if not terms:
        return Tensor(0.0)
    return stack(terms).sum()


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse pass from a scalar ``loss`` to each tensor in ``params``.

    Parameters not reachable from ``loss`` get an exact zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError("gradients() needs a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack_.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for p in params]


# model ----------------------------------------------------------------------


@dataclass
class MlpModel:
    """Feedforward net: rectifier on hidden layers, identity on the output."""

    layer_dims: tuple[int, ...]
    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, layer_dims: Sequence[int], rng: np.random.Generator) -> "MlpModel":
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ContractError(f"invalid layer dims {dims}")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            # He-uniform
            bound = np.sqrt(6.0 / fan_in)
            weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
            biases.append(Tensor(np.zeros((1, fan_out))))
        return cls(dims, weights, biases)

    @property
    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def with_params(self, arrays: Sequence[np.ndarray]) -> "MlpModel":
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.weights):
            raise ContractError("parameter count mismatch")
        for a, p in zip(arrays, self.params):
            if a.shape != p.shape:
                raise ContractError(f"shape mismatch {a.shape} vs {p.shape}")
        return MlpModel(
            self.layer_dims,
            [Tensor(a) for a in arrays[0::2]],
            [Tensor(a) for a in arrays[1::2]],
        )

    def copy(self) -> "MlpModel":
        return self.with_params([p.data.copy() for p in self.params])

    def checksum(self) -> float:
        return float(sum(np.abs(p.data).sum() for p in self.params))


def forward(model: MlpModel, batch) -> Tensor:
    x = as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ContractError(
            f"batch of shape {x.shape} does not match model input dim {model.input_dim}"
        )
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        x = x @ w + b
        if i < last:
            x = relu(x)
    return x


# losses and statistics --------------------------------------------------------


def softmax_cross_entropy(logits, labels) -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ContractError("logits rows must match label count")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError("label out of range")
    logp = log_softmax(logits)
    return -logp[np.arange(labels.size), labels].mean()


def entropy(distribution) -> Tensor:
    p = as_tensor(distribution)
    if np.any(p.data < 0) or abs(p.data.sum() - 1.0) > 1e-6:
        raise ContractError("entropy() needs a probability vector")
    # 0 ln 0 := 0; the clamp keeps the gradient finite at exact zeros
    mask = p.data > 0
    safe = Tensor(np.where(mask, 0.0, 1.0)) + p * mask
    return -(p * log(safe)).sum()


def covariance(batch) -> Tensor:
    """Sample covariance of the rows, normalized by n - 1."""
    x = as_tensor(batch)
    n = x.shape[0]
    if n < 2:
        raise InsufficientSamplesError(f"covariance needs >= 2 rows, got {n}")
    centered = x - x.mean(axis=0, keepdims=True)
    return (centered.T @ centered) / (n - 1)


# optimizer --------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(model, grads, state: AdamState, lr: float):
    """One Adam update.  ``model`` is an MlpModel or a list of MlpModels.

    Returns the updated model(s) and state; inputs are left untouched.
    """
    models = model if isinstance(model, (list, tuple)) else [model]
    params = [p.data for mdl in models for p in mdl.params]
    grads = [np.asarray(g, dtype=DTYPE) for g in grads]
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ContractError("gradient shapes do not match model parameters")
    if not state.m:
        state = AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        m_hat = m / (1 - BETA1**t)
        v_hat = v / (1 - BETA2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        new_m.append(m)
        new_v.append(v)
    out, k = [], 0
    for mdl in models:
        n = len(mdl.params)
        out.append(mdl.with_params(new_p[k : k + n]))
        k += n
    updated = out if isinstance(model, (list, tuple)) else out[0]
    return updated, AdamState(new_m, new_v, t)


# gradient checking ------------------------------------------------------------


def finite_difference_check(
    loss_fn: Callable[[list[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    step: float = 1e-4,
) -> float:
    """Max per-coordinate relative error between tape and central differences.

    ``loss_fn`` maps a list of leaf tensors to a scalar loss.  The error
    measure is |a - f| / max(1e-6, |a| + |f|).
    """
    leaves = [Tensor(np.array(a, dtype=DTYPE)) for a in arrays]
    analytic = gradients(loss_fn(leaves), leaves)
    worst = 0.0
    for i, base in enumerate(arrays):
        base = np.array(base, dtype=DTYPE)
        for idx in np.ndindex(base.shape):
            values = []
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped[idx] += sign * step
                args = [Tensor(bumped) if j == i else Tensor(np.array(a, dtype=DTYPE))
                        for j, a in enumerate(arrays)]
                values.append(loss_fn(args).item())
            fd = (values[0] - values[1]) / (2 * step)
            a = analytic[i][idx]
            worst = max(worst, abs(a - fd) / max(1e-6, abs(a) + abs(fd)))
    return worst
