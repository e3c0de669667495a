"""Synthetic benchmarks, dataset/pattern files, and stratified batching."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from htcl.errors import ContractError, DataError


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    class_labels: np.ndarray
    domain_labels: np.ndarray
    num_classes: int
    num_domains: int
    latent_groups: np.ndarray | None = None
    # subsets carved out by a split may legitimately miss a class
    allow_missing_classes: bool = field(default=False, repr=False)

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise ContractError("features must be a matrix")
        object.__setattr__(self, "features", x)
        for name in ("class_labels", "domain_labels", "latent_groups"):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=np.int64).reshape(-1)
            if value.shape[0] != x.shape[0]:
                raise ContractError(f"{name} length {value.shape[0]} != {x.shape[0]} samples")
            object.__setattr__(self, name, value)
        n = x.shape[0]
        if n < 1 or x.shape[1] < 1 or self.num_classes < 1 or self.num_domains < 1:
            raise ContractError("dataset needs n, d, |Y|, |E| >= 1")
        if not np.all(np.isfinite(x)):
            raise ContractError("features must be finite")
        _check_cover(self.domain_labels, self.num_domains, "domain")
        if self.allow_missing_classes:
            _check_range(self.class_labels, self.num_classes, "class")
        else:
            _check_cover(self.class_labels, self.num_classes, "class")
        if self.latent_groups is not None and self.latent_groups.min() < 0:
            raise ContractError("latent groups must be non-negative")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index, domain_labels=None, num_domains=None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.features[index],
            self.class_labels[index],
            self.domain_labels[index] if domain_labels is None else domain_labels,
            self.num_classes,
            self.num_domains if num_domains is None else num_domains,
            None if self.latent_groups is None else self.latent_groups[index],
            allow_missing_classes=True,
        )

    def with_pattern(self, pattern: "DividingPattern") -> "Dataset":
        return self.subset(np.arange(self.n), pattern.assignment, pattern.num_domains)

    def equals(self, other: "Dataset") -> bool:
        same_latent = (self.latent_groups is None and other.latent_groups is None) or (
            self.latent_groups is not None
            and other.latent_groups is not None
            and np.array_equal(self.latent_groups, other.latent_groups)
        )
        return (
            same_latent
            and self.num_classes == other.num_classes
            and self.num_domains == other.num_domains
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.class_labels, other.class_labels)
            and np.array_equal(self.domain_labels, other.domain_labels)
        )


def _check_range(labels, count, what):
    if labels.min() < 0 or labels.max() >= count:
        raise ContractError(f"{what} label outside [0, {count})")


def _check_cover(labels, count, what):
    _check_range(labels, count, what)
    missing = set(range(count)) - set(np.unique(labels).tolist())
    if missing:
        raise ContractError(f"{what} indices {sorted(missing)} never occur")


@dataclass(frozen=True, eq=False)
class DividingPattern:
    assignment: np.ndarray
    num_domains: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "assignment", a)
        if self.num_domains < 1:
            raise ContractError("pattern needs >= 1 domain")
        if a.size and (a.min() < 0 or a.max() >= self.num_domains):
            raise ContractError("pattern value outside [0, num_domains)")

    def __len__(self):
        return self.assignment.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, DividingPattern)
            and self.num_domains == other.num_domains
            and np.array_equal(self.assignment, other.assignment)
        )

    def domain_counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_domains)

    @classmethod
    def of(cls, dataset: Dataset) -> "DividingPattern":
        return cls(dataset.domain_labels.copy(), dataset.num_domains)


# synthetic generators -----------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_per_class_per_env: int = 250
    num_classes: int = 2
    num_latent_envs: int = 2
    d_inv: int = 5
    d_var: int = 5
    class_center_scale: float = 3.0
    env_center_scale: float = 3.0
    noise_std: float = 0.5
    label_noise: float = 0.0
    correlation: tuple[float, ...] = (0.9, 0.8)
    test_correlation: float = 0.1
    color_scale: float = 1.0
    # invariant-block noise of class k is noise_std * class_spread**k
    class_spread: float = 1.0
    initial_pattern_mode: str = "mixed"
    seed: int = 0

    def validate(self, spurious: bool = False):
        if min(self.n_per_class_per_env, self.num_classes, self.num_latent_envs,
               self.d_inv, self.d_var) < 1:
            raise ContractError("counts and dimensions must be >= 1")
        if not self.noise_std > 0 or not self.class_spread > 0:
            raise ContractError("noise_std must be > 0")
        probs = [self.label_noise, self.test_correlation, *self.correlation]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ContractError("probabilities must lie in [0, 1]")
        if self.initial_pattern_mode not in ("aligned", "mixed", "random"):
            raise ContractError(f"unknown initial_pattern_mode {self.initial_pattern_mode!r}")
        if spurious:
            if self.num_latent_envs < 2:
                raise ContractError("spurious benchmark needs >= 2 environments")
            if self.num_classes != 2:
                raise ContractError("spurious benchmark is binary")
            if len(self.correlation) != self.num_latent_envs:
                raise ContractError("need one correlation per training environment")


def _initial_domains(mode, classes, envs, num_envs, rng):
    if mode == "aligned":
        return envs.copy()
    if mode == "random":
        domains = rng.integers(0, num_envs, size=classes.size)
        # keep every domain inhabited
        domains[rng.permutation(classes.size)[:num_envs]] = np.arange(num_envs)
        return domains
    # mixed: inside every (class, env) cell deal samples round-robin
    domains = np.empty(classes.size, dtype=np.int64)
    for c in np.unique(classes):
        for e in np.unique(envs):
            idx = np.flatnonzero((classes == c) & (envs == e))
            idx = idx[rng.permutation(idx.size)]
            domains[idx] = np.arange(idx.size) % num_envs
    return domains


def generate_toy(spec: SyntheticSpec) -> Dataset:
    """Invariant block carries the class, variant block carries the latent env."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    class_centers = rng.standard_normal((spec.num_classes, spec.d_inv)) * spec.class_center_scale
    env_centers = rng.standard_normal((spec.num_latent_envs, spec.d_var)) * spec.env_center_scale
    m = spec.n_per_class_per_env
    classes = np.repeat(np.arange(spec.num_classes), spec.num_latent_envs * m)
    envs = np.tile(np.repeat(np.arange(spec.num_latent_envs), m), spec.num_classes)
    n = classes.size
    spread = spec.noise_std * spec.class_spread ** classes
    x_inv = class_centers[classes] + spread[:, None] * rng.standard_normal((n, spec.d_inv))
    x_var = env_centers[envs] + spec.noise_std * rng.standard_normal((n, spec.d_var))
    domains = _initial_domains(spec.initial_pattern_mode, classes, envs, spec.num_latent_envs, rng)
    return Dataset(np.hstack([x_inv, x_var]), classes, domains, spec.num_classes,
                   spec.num_latent_envs, envs)


@dataclass(frozen=True, eq=False)
class SpuriousData:
    train: Dataset
    test: Dataset

    def combined(self) -> Dataset:
        """Training envs keep their domain ids; the test env becomes the last domain."""
        e = self.train.num_domains
        return Dataset(
            np.vstack([self.train.features, self.test.features]),
            np.concatenate([self.train.class_labels, self.test.class_labels]),
            np.concatenate([self.train.domain_labels, np.full(self.test.n, e)]),
            self.train.num_classes,
            e + 1,
            np.concatenate([self.train.latent_groups, np.full(self.test.n, e)]),
        )


def generate_spurious(spec: SyntheticSpec) -> SpuriousData:
    """Binary correlation-shift benchmark.

    The observed label is the clean label flipped with probability
    ``label_noise``.  A "color" attribute agrees with the observed label with
    probability ``correlation[e]`` in training env ``e`` (``test_correlation``
    in the held-out env) and shifts the variant block by a color vector; each
    env additionally shifts the variant block by its own style center.
    """
    spec.validate(spurious=True)
    rng = np.random.default_rng(spec.seed)
    class_centers = rng.standard_normal((2, spec.d_inv)) * spec.class_center_scale
    env_centers = rng.standard_normal((spec.num_latent_envs + 1, spec.d_var)) * spec.env_center_scale
    color = rng.standard_normal(spec.d_var)
    color *= spec.color_scale / np.linalg.norm(color)
    m = spec.n_per_class_per_env

    def sample(env_id, rho, count):
        clean = np.repeat([0, 1], count)
        flip = rng.random(clean.size) < spec.label_noise
        y = np.where(flip, 1 - clean, clean)
        agree = rng.random(y.size) < rho
        shade = np.where(agree, y, 1 - y) * 2.0 - 1.0
        spread = spec.noise_std * spec.class_spread ** clean
        x_inv = class_centers[clean] + spread[:, None] * rng.standard_normal((y.size, spec.d_inv))
        x_var = (env_centers[env_id] + shade[:, None] * color
                 + spec.noise_std * rng.standard_normal((y.size, spec.d_var)))
        return np.hstack([x_inv, x_var]), y

    xs, ys, es = [], [], []
    for e, rho in enumerate(spec.correlation):
        x, y = sample(e, rho, m)
        xs.append(x), ys.append(y), es.append(np.full(y.size, e))
    x, y, envs = np.vstack(xs), np.concatenate(ys), np.concatenate(es)
    domains = _initial_domains(spec.initial_pattern_mode, y, envs, spec.num_latent_envs, rng)
    train = Dataset(x, y, domains, 2, spec.num_latent_envs, envs)
    tx, ty = sample(spec.num_latent_envs, spec.test_correlation, m)
    test_env = np.full(ty.size, spec.num_latent_envs)
    test = Dataset(tx, ty, np.zeros(ty.size, dtype=np.int64), 2, 1, test_env)
    return SpuriousData(train, test)


# files ----------------------------------------------------------------------


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def save_dataset(dataset: Dataset, path) -> None:
    header = [f"f{j}" for j in range(dataset.dim)] + ["class", "domain"]
    if dataset.latent_groups is not None:
        header.append("latent_group")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [_fmt(v) for v in dataset.features[i]]
            row += [str(dataset.class_labels[i]), str(dataset.domain_labels[i])]
            if dataset.latent_groups is not None:
                row.append(str(dataset.latent_groups[i]))
            writer.writerow(row)


def _parse_label(text, line, what):
    try:
        value = int(text)
    except ValueError:
        raise DataError(f"{what} label {text!r} is not an integer", line) from None
    if value < 0:
        raise DataError(f"{what} label {value} is negative", line)
    return value


def _read_rows(path):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    except (UnicodeDecodeError, csv.Error) as exc:
        raise DataError(f"{path}: unreadable CSV ({exc})") from exc
    if not rows:
        raise DataError(f"{path}: empty file", 1)
    return rows[0], rows[1:]


def load_dataset(path, num_classes: int | None = None, num_domains: int | None = None) -> Dataset:
    """Read a dataset CSV.  Label counts default to max label + 1 and must be contiguous."""
    header, rows = _read_rows(path)
    feature_cols = [h for h in header if h.startswith("f")]
    d = len(feature_cols)
    if feature_cols != [f"f{j}" for j in range(d)] or d == 0:
        raise DataError("header must start with f0..f{d-1}", 1)
    tail = header[d:]
    if tail not in (["class", "domain"], ["class", "domain", "latent_group"]):
        raise DataError(f"unexpected label columns {tail}", 1)
    has_latent = len(tail) == 3
    if not rows:
        raise DataError("no data rows", 2)
    x, ys, ds, gs = [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} columns, got {len(row)}", lineno)
        try:
            feats = [float(v) for v in row[:d]]
        except ValueError:
            raise DataError("non-numeric feature", lineno) from None
        if not all(np.isfinite(feats)):
            raise DataError("non-finite feature", lineno)
        x.append(feats)
        ys.append(_parse_label(row[d], lineno, "class"))
        ds.append(_parse_label(row[d + 1], lineno, "domain"))
        if has_latent:
            gs.append(_parse_label(row[d + 2], lineno, "latent group"))
        if num_domains is not None and ds[-1] >= num_domains:
            raise DataError(f"domain label {ds[-1]} >= declared {num_domains}", lineno)
        if num_classes is not None and ys[-1] >= num_classes:
            raise DataError(f"class label {ys[-1]} >= declared {num_classes}", lineno)
    ys, ds = np.array(ys), np.array(ds)
    k = num_classes if num_classes is not None else int(ys.max()) + 1
    e = num_domains if num_domains is not None else int(ds.max()) + 1
    for labels, count, what in ((ys, k, "class"), (ds, e, "domain")):
        missing = sorted(set(range(count)) - set(labels.tolist()))
        if missing:
            raise DataError(f"{what} labels not contiguous; missing {missing}")
    return Dataset(np.array(x), ys, ds, k, e, np.array(gs) if has_latent else None)


def save_matrix(matrix: np.ndarray, path) -> None:
    """Unlabelled feature CSV (header f0..f{d-1}), used for embedding dumps."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{j}" for j in range(matrix.shape[1])])
        writer.writerows([_fmt(v) for v in row] for row in matrix)


def load_matrix(path) -> np.ndarray:
    header, rows = _read_rows(path)
    if header != [f"f{j}" for j in range(len(header))] or not header:
        raise DataError("matrix header must be f0..f{d-1}", 1)
    if not rows:
        raise DataError("no data rows", 2)
    out = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} columns, got {len(row)}", lineno)
        try:
            out.append([float(v) for v in row])
        except ValueError:
            raise DataError("non-numeric value", lineno) from None
    return np.array(out)


def _save_index_column(values, name, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", name])
        writer.writerows((i, int(v)) for i, v in enumerate(values))


def _load_index_column(path, name, n):
    header, rows = _read_rows(path)
    if header != ["index", name]:
        raise DataError(f"header must be 'index,{name}'", 1)
    values = np.full(n, -1, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for lineno, row in enumerate(rows, start=2):
        if len(row) != 2:
            raise DataError(f"expected 2 columns, got {len(row)}", lineno)
        idx = _parse_label(row[0], lineno, "sample index")
        if idx >= n:
            raise DataError(f"sample index {idx} out of range for n={n}", lineno)
        if seen[idx]:
            raise DataError(f"duplicate sample index {idx}", lineno)
        seen[idx] = True
        values[idx] = _parse_label(row[1], lineno, name)
    if len(rows) != n:
        raise DataError(f"file has {len(rows)} rows, expected {n}")
    return values


def save_pattern(pattern: DividingPattern, path) -> None:
    _save_index_column(pattern.assignment, "domain", path)


def load_pattern(path, n: int, num_domains: int | None = None) -> DividingPattern:
    values = _load_index_column(path, "domain", n)
    e = num_domains if num_domains is not None else int(values.max()) + 1
    if values.max() >= e:
        raise DataError(f"domain label {values.max()} >= declared {e}")
    return DividingPattern(values, e)


def save_labels(labels, path) -> None:
    _save_index_column(labels, "class", path)


def load_labels(path, n: int) -> np.ndarray:
    return _load_index_column(path, "class", n)


# batching -------------------------------------------------------------------


def stratified_batches(
    dataset: Dataset, pattern: DividingPattern, batch_size: int, seed: int
) -> list[np.ndarray]:
    """One epoch of index batches, every (class, domain) cell spread evenly.

    Each cell is shuffled and its members are given evenly spaced positions
    in [0, 1) with a random phase; sorting by position interleaves the cells
    so that every batch receives a proportional share of each one.
    """
    if len(pattern) != dataset.n:
        raise ContractError("pattern length does not match dataset")
    if batch_size < 2 * pattern.num_domains:
        raise ContractError(f"batch_size {batch_size} < 2 * {pattern.num_domains} domains")
    rng = np.random.default_rng(seed)
    cells = dataset.class_labels * pattern.num_domains + pattern.assignment
    position = np.empty(dataset.n)
    for cell in np.unique(cells):
        idx = np.flatnonzero(cells == cell)
        idx = idx[rng.permutation(idx.size)]
        position[idx] = (np.arange(idx.size) + rng.random()) / idx.size
    order = np.lexsort((rng.random(dataset.n), position))
    num_batches = max(1, int(np.ceil(dataset.n / batch_size)))
    return [b for b in np.array_split(order, num_batches) if b.size]


def batches_for_steps(dataset, pattern, batch_size, seed, steps):
    """Yield ``steps`` batches, re-shuffling at every epoch boundary."""
    epoch = 0
    emitted = 0
    while emitted < steps:
        for batch in stratified_batches(dataset, pattern, batch_size, seed * 100003 + epoch):
            if emitted == steps:
                return
            yield batch
            emitted += 1
        epoch += 1

