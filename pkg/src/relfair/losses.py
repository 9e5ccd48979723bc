"""Client losses, first/second-order oracles, and client data construction.

Every loss is a sample mean plus an optional ``reg * ||theta||^2`` term, so
curvature constants do not scale with shard size.  Three kinds are supported:

* ``quadratic-regression``: mean squared residual of a linear model.
* ``multinomial-logistic``: mean softmax cross-entropy, weights laid out as a
  ``(p + 1, K)`` matrix (row 0 is the bias) flattened in C order.
* ``tiny-mlp``: one tanh hidden layer with a softmax head; nonconvex, so no
  Hessian or smoothness constants are offered for it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

KINDS = ("quadratic-regression", "multinomial-logistic", "tiny-mlp")


class ContractViolation(ValueError):
    """An operation was called outside its precondition."""


class UnsupportedKind(ValueError):
    pass


class CsvParseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DataShard:
    client_id: int
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.features, dtype=float))
        y = np.asarray(self.labels)
        if x.shape[0] != y.shape[0] or x.shape[0] < 1:
            raise ContractViolation(
                f"shard {self.client_id}: {x.shape[0]} feature rows vs {y.shape[0]} labels"
            )
        if np.isnan(x).any() or (y.dtype.kind == "f" and np.isnan(y).any()):
            raise ContractViolation(f"shard {self.client_id} contains NaN")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "DataShard":
        return DataShard(self.client_id, self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class NoiseModel:
    """Stochastic-gradient model.

    ``additive``: exact gradient plus isotropic Gaussian noise whose total
    variance (summed over coordinates) is ``delta_g**2``.
    ``minibatch``: gradient of a with-replacement minibatch of ``batch_size``
    samples; its variance is whatever the data imply (see
    :func:`minibatch_variance`).  ``delta_g == 0`` switches noise off in both
    modes.
    """

    delta_g: float = 0.0
    mode: str = "additive"
    batch_size: int = 1

    def __post_init__(self):
        if self.delta_g < 0:
            raise ValueError("delta_g must be nonnegative")
        if self.mode not in ("additive", "minibatch"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class SmoothnessConstants:
    m_f: float
    M_f: float
    L_lambda_theta: float | None = None

    def __post_init__(self):
        if self.m_f < 0 or self.M_f <= 0 or self.m_f > self.M_f * (1 + 1e-12):
            raise ValueError(f"need 0 <= m_f <= M_f, got m_f={self.m_f}, M_f={self.M_f}")


@dataclass(frozen=True, eq=False)
class ClientObjective:
    kind: str
    shard: DataShard
    regularizer: float = 0.0
    n_classes: int | None = None
    hidden: int = 8
    fit_intercept: bool = False
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedKind(f"unknown objective kind {self.kind!r}")
        if self.regularizer < 0:
            raise ValueError("regularizer must be nonnegative")
        if self.kind != "quadratic-regression":
            labels = self.shard.labels
            if self.n_classes is None:
                object.__setattr__(self, "n_classes", int(labels.max()) + 1)
            if np.any(labels < 0) or np.any(labels >= self.n_classes):
                raise ContractViolation("class labels outside [0, n_classes)")

    # -- layout -----------------------------------------------------------
    @property
    def n_features(self) -> int:
        return self.shard.features.shape[1]

    @property
    def dim(self) -> int:
        p = self.n_features
        if self.kind == "quadratic-regression":
            return p + int(self.fit_intercept)
        if self.kind == "multinomial-logistic":
            return (p + 1) * self.n_classes
        h, k = self.hidden, self.n_classes
        return p * h + h + h * k + k

    def design(self) -> np.ndarray:
        """Feature matrix with the bias column prepended where the kind uses one."""
        z = self._cache.get("design")
        if z is None:
            x = self.shard.features
            if self.kind == "multinomial-logistic" or (
                self.kind == "quadratic-regression" and self.fit_intercept
            ):
                x = np.hstack([np.ones((x.shape[0], 1)), x])
            z = self._cache.setdefault("design", x)
        return z

    def _onehot(self) -> np.ndarray:
        y = self._cache.get("onehot")
        if y is None:
            y = np.eye(self.n_classes)[self.shard.labels.astype(int)]
            y = self._cache.setdefault("onehot", y)
        return y

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 1 or theta.shape[0] != self.dim:
            raise ContractViolation(f"theta has shape {theta.shape}, objective expects ({self.dim},)")
        return theta

    def _mlp_unpack(self, theta):
        p, h, k = self.n_features, self.hidden, self.n_classes
        i = 0
        w1 = theta[i : i + p * h].reshape(p, h)
        i += p * h
        b1 = theta[i : i + h]
        i += h
        w2 = theta[i : i + h * k].reshape(h, k)
        i += h * k
        return w1, b1, w2, theta[i:]

    def quadratic_stats(self):
        """(G, h, s) with f(theta) = theta'G theta - 2 h'theta + s (before reg)."""
        st = self._cache.get("qstats")
        if st is None:
            z, y = self.design(), self.shard.labels.astype(float)
            n = z.shape[0]
            st = self._cache.setdefault("qstats", (z.T @ z / n, z.T @ y / n, float(y @ y) / n))
        return st

    # -- oracles ----------------------------------------------------------
    def value(self, theta) -> float:
        theta = self._check(theta)
        reg = self.regularizer * float(theta @ theta)
        if self.kind == "quadratic-regression":
            r = self.shard.labels - self.design() @ theta
            return float(r @ r) / r.shape[0] + reg
        logits = self._logits(theta)
        return _cross_entropy(logits, self.shard.labels.astype(int)) + reg

    def _logits(self, theta):
        if self.kind == "multinomial-logistic":
            return self.design() @ theta.reshape(-1, self.n_classes)
        w1, b1, w2, b2 = self._mlp_unpack(theta)
        return np.tanh(self.shard.features @ w1 + b1) @ w2 + b2

    def gradient(self, theta) -> np.ndarray:
        theta = self._check(theta)
        return self._data_gradient(theta, None) + 2.0 * self.regularizer * theta

    def _data_gradient(self, theta, idx) -> np.ndarray:
        """Gradient of the mean data loss over rows ``idx`` (all rows if None)."""
        if self.kind == "quadratic-regression":
            z = self.design() if idx is None else self.design()[idx]
            y = self.shard.labels if idx is None else self.shard.labels[idx]
            return -2.0 * z.T @ (y - z @ theta) / z.shape[0]
        x = self.shard.features if idx is None else self.shard.features[idx]
        onehot = self._onehot() if idx is None else self._onehot()[idx]
        n = x.shape[0]
        if self.kind == "multinomial-logistic":
            z = self.design() if idx is None else self.design()[idx]
            p = _softmax(z @ theta.reshape(-1, self.n_classes))
            return (z.T @ (p - onehot) / n).ravel()
        w1, b1, w2, b2 = self._mlp_unpack(theta)
        a = np.tanh(x @ w1 + b1)
        d_out = (_softmax(a @ w2 + b2) - onehot) / n
        d_hid = (d_out @ w2.T) * (1.0 - a * a)
        return np.concatenate(
            [(x.T @ d_hid).ravel(), d_hid.sum(0), (a.T @ d_out).ravel(), d_out.sum(0)]
        )

    def per_sample_gradients(self, theta) -> np.ndarray:
        """Rows are gradients of the individual sample losses (no regularizer)."""
        theta = self._check(theta)
        if self.kind == "quadratic-regression":
            z = self.design()
            return -2.0 * z * (self.shard.labels - z @ theta)[:, None]
        if self.kind == "multinomial-logistic":
            z = self.design()
            p = _softmax(z @ theta.reshape(-1, self.n_classes))
            return np.einsum("jr,jk->jrk", z, p - self._onehot()).reshape(z.shape[0], -1)
        return np.stack([self._data_gradient(theta, [j]) for j in range(self.shard.n_samples)])

    def hessian(self, theta) -> np.ndarray:
        theta = self._check(theta)
        d = self.dim
        if self.kind == "quadratic-regression":
            g, _, _ = self.quadratic_stats()
            return 2.0 * g + 2.0 * self.regularizer * np.eye(d)
        if self.kind == "multinomial-logistic":
            z = self.design()
            p = _softmax(z @ theta.reshape(-1, self.n_classes))
            s = np.einsum("jk,kl->jkl", p, np.eye(self.n_classes)) - np.einsum("jk,jl->jkl", p, p)
            h = np.einsum("jr,js,jkl->rksl", z, z, s) / z.shape[0]
            return h.reshape(d, d) + 2.0 * self.regularizer * np.eye(d)
        raise UnsupportedKind("hessian is not available for tiny-mlp objectives")

    def value_batch(self, thetas) -> np.ndarray:
        """Values at each row of ``thetas``; vectorized for the quadratic kind."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if self.kind == "quadratic-regression":
            g, h, s = self.quadratic_stats()
            vals = np.einsum("mi,ij,mj->m", thetas, g, thetas) - 2.0 * thetas @ h + s
            return vals + self.regularizer * np.einsum("mi,mi->m", thetas, thetas)
        return np.array([self.value(t) for t in thetas])


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def value(obj: ClientObjective, theta) -> float:
    return obj.value(theta)


def gradient(obj: ClientObjective, theta) -> np.ndarray:
    return obj.gradient(theta)


def hessian(obj: ClientObjective, theta) -> np.ndarray:
    return obj.hessian(theta)


def stochastic_gradient(obj: ClientObjective, theta, noise: NoiseModel, stream: np.random.Generator):
    """One stochastic gradient draw; unbiased for ``obj.gradient(theta)``."""
    theta = obj._check(theta)
    if noise.delta_g == 0.0:
        return obj.gradient(theta)
    if noise.mode == "additive":
        d = theta.shape[0]
        return obj.gradient(theta) + stream.normal(0.0, noise.delta_g / math.sqrt(d), size=d)
    idx = stream.integers(0, obj.shard.n_samples, size=noise.batch_size)
    return obj._data_gradient(theta, idx) + 2.0 * obj.regularizer * theta


def minibatch_variance(obj: ClientObjective, theta, batch_size: int) -> float:
    """Exact total variance of the with-replacement minibatch gradient."""
    g = obj.per_sample_gradients(theta)
    centered = g - g.mean(axis=0)
    return float(np.mean(np.sum(centered * centered, axis=1))) / batch_size


def finite_difference_gradient(f, theta, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences with per-coordinate step ``rel_step * (1 + |theta_k|)``."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for k in range(theta.shape[0]):
        h = rel_step * (1.0 + abs(theta[k]))
        e = np.zeros_like(theta)
        e[k] = h
        out[k] = (f(theta + e) - f(theta - e)) / (2.0 * h)
    return out


def smoothness_constants(
    objs: Sequence[ClientObjective], diameter: float | None = None
) -> SmoothnessConstants:
    """Uniform curvature bounds (m_f, M_f) over a family of client losses.

    Quadratic losses get the exact extreme Hessian eigenvalues.  Logistic losses
    get ``M_f = ||Z||_2^2 / (2N) + 2 reg`` (softmax curvature is at most 1/2) and
    ``m_f = 2 reg``.  With a finite domain ``diameter`` the loss vector is
    Lipschitz with ``L = sqrt(n) * M_f * diameter``; otherwise ``L`` is None.
    """
    lo, hi = math.inf, 0.0
    for obj in objs:
        if obj.kind == "quadratic-regression":
            eig = np.linalg.eigvalsh(obj.hessian(np.zeros(obj.dim)))
            lo, hi = min(lo, float(eig[0])), max(hi, float(eig[-1]))
        elif obj.kind == "multinomial-logistic":
            z = obj.design()
            s = float(np.linalg.norm(z, 2)) ** 2
            lo = min(lo, 2.0 * obj.regularizer)
            hi = max(hi, s / (2.0 * z.shape[0]) + 2.0 * obj.regularizer)
        else:
            raise UnsupportedKind("smoothness constants are not defined for tiny-mlp objectives")
    lo = max(lo, 0.0)
    L = None if diameter is None else math.sqrt(len(objs)) * hi * float(diameter)
    return SmoothnessConstants(m_f=lo, M_f=hi, L_lambda_theta=L)


# -- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    clients: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()
    label_name: str = "label"
    client_names: tuple[str, ...] = ()


@dataclass(frozen=True)
class CsvSchema:
    feature_columns: tuple[str, ...]
    label_column: str
    client_column: str | None = None


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    concentration: float = 0.5
    seed: int = 0
    class_count: int | None = None

    def __post_init__(self):
        if self.n_clients < 1 or self.concentration <= 0:
            raise ValueError("need n_clients >= 1 and concentration > 0")


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Parse a headered CSV.  Client-column values may be any token; clients are
    numbered in order of first appearance."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        wanted = list(schema.feature_columns) + [schema.label_column]
        if schema.client_column is not None:
            wanted.append(schema.client_column)
        for col in wanted:
            if col not in header:
                raise CsvParseError(f"{path}: missing column {col!r}")
        pos = {c: header.index(c) for c in wanted}
        feats, labels, clients = [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for col in list(schema.feature_columns) + [schema.label_column]:
                cell = row[pos[col]].strip() if pos[col] < len(row) else ""
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise CsvParseError(f"{path}: row {rowno}, column {col!r}: non-numeric cell {cell!r}") from None
                if not math.isfinite(vals[-1]):
                    raise CsvParseError(f"{path}: row {rowno}, column {col!r}: non-finite cell {cell!r}")
            feats.append(vals[:-1])
            labels.append(vals[-1])
            if schema.client_column is not None:
                clients.append(row[pos[schema.client_column]].strip())
    if not labels:
        raise CsvParseError(f"{path}: no data rows")
    client_ids, names = None, ()
    if schema.client_column is not None:
        names = tuple(dict.fromkeys(clients))
        lookup = {c: i for i, c in enumerate(names)}
        client_ids = np.array([lookup[c] for c in clients])
    y = np.array(labels)
    if np.all(y == np.round(y)):
        y = y.astype(int)
    return Dataset(
        np.array(feats, dtype=float), y, client_ids, tuple(schema.feature_columns), schema.label_column, names
    )


def shards_by_client(ds: Dataset) -> list[DataShard]:
    if ds.clients is None:
        return [DataShard(0, ds.features, ds.labels)]
    return [
        DataShard(i, ds.features[ds.clients == i], ds.labels[ds.clients == i])
        for i in range(int(ds.clients.max()) + 1)
    ]


def partition_indices(labels, spec: PartitionSpec) -> list[np.ndarray]:
    """Label-skewed Dirichlet allocation of sample indices to clients.

    For every class, one Dirichlet(concentration) vector over clients decides
    the share of that class each client receives.  Clients left empty are then
    repaired round-robin by moving one sample from the currently largest client.
    """
    labels = np.asarray(labels).astype(int)
    n = spec.n_clients
    rng = np.random.default_rng(spec.seed)
    n_classes = spec.class_count or int(labels.max()) + 1
    buckets: list[list[int]] = [[] for _ in range(n)]
    for k in range(n_classes):
        idx = np.flatnonzero(labels == k)
        rng.shuffle(idx)
        if n == 1:
            buckets[0].extend(idx.tolist())
            continue
        p = rng.dirichlet(np.full(n, spec.concentration))
        cuts = (np.cumsum(p)[:-1] * len(idx)).astype(int)
        for i, part in enumerate(np.split(idx, cuts)):
            buckets[i].extend(part.tolist())
    for i in range(n):
        if not buckets[i]:
            donor = max(range(n), key=lambda j: (len(buckets[j]), -j))
            if len(buckets[donor]) < 2:
                raise ContractViolation("not enough samples to give every client one")
            buckets[i].append(buckets[donor].pop())
    return [np.array(sorted(b), dtype=int) for b in buckets]


def partition_dirichlet(ds: Dataset, spec: PartitionSpec) -> list[DataShard]:
    parts = partition_indices(ds.labels, spec)
    return [DataShard(i, ds.features[idx], ds.labels[idx]) for i, idx in enumerate(parts)]


def train_val_split(shard: DataShard, train_fraction: float, rng: np.random.Generator):
    """Random per-client split; both sides keep at least one sample when possible."""
    n = shard.n_samples
    if n < 2:
        return shard, shard
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    perm = rng.permutation(n)
    return shard.subset(np.sort(perm[:n_train])), shard.subset(np.sort(perm[n_train:]))


def synth_regression(d, n_samples, client_ground_truths, noise_sd, seed) -> list[DataShard]:
    """Per-client linear-regression shards around distinct ground-truth vectors.

    ``n_samples`` is an int or one count per client.  Spread of the ground
    truths is the heterogeneity knob.
    """
    truths = np.atleast_2d(np.asarray(client_ground_truths, dtype=float))
    if truths.shape[1] != d:
        raise ContractViolation(f"ground truths have dimension {truths.shape[1]}, expected {d}")
    counts = np.broadcast_to(np.asarray(n_samples, dtype=int), (truths.shape[0],))
    rng = np.random.default_rng(seed)
    shards = []
    for i, (truth, m) in enumerate(zip(truths, counts)):
        x = rng.normal(size=(int(m), d))
        y = x @ truth + noise_sd * rng.normal(size=int(m))
        shards.append(DataShard(i, x, y))
    return shards


def synth_classification(n_samples, n_features, n_classes, class_sep=1.0, noise_sd=1.0, seed=0) -> Dataset:
    """Gaussian-mixture classification data with random class centers."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, n_features))
    centers *= class_sep / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = rng.integers(0, n_classes, size=n_samples)
    x = centers[labels] + noise_sd * rng.normal(size=(n_samples, n_features))
    return Dataset(x, labels, None, tuple(f"x{j}" for j in range(n_features)), "label")
