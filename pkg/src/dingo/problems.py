"""Finite-sum objectives, datasets and shards.

The global objective is f(w) = (1/m) sum_i f_i(w), where f_i only sees the
samples of shard i. Three families are provided:

* ``least_squares``: f_i(w) = 1/2 ||A_i w - b_i||^2 + reg/2 ||w||^2 (a sum
  over the shard's rows, so A = I, b = 0 gives f = 1/2 ||w||^2).
* ``softmax``: multinomial cross-entropy averaged over the shard, with C-1
  weight blocks of length p (the last class is pinned at zero logits), so
  d = p (C - 1).
* ``logistic``: binary cross-entropy averaged over the shard, labels in {0, 1}.

Each f_i carries the regulariser reg/2 ||w||^2.
"""
import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .linops import LinearMap

KINDS = ("least_squares", "softmax", "logistic")
DEFAULT_REG = {"least_squares": 0.0, "softmax": 1e-6, "logistic": 1e-6}


@dataclass(frozen=True)
class Dataset:
    """Features (n x p) and labels (ints for classification, reals for regression)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int = 0  # 0 for regression

    def __post_init__(self):
        X = self.features
        if X.ndim != 2 or self.labels.shape != (X.shape[0],):
            raise DataError("features must be n x p and labels length n")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain NaN or Inf")
        if self.num_classes:
            y = self.labels
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise DataError("labels out of range")
        elif not np.all(np.isfinite(self.labels)):
            raise DataError("targets contain NaN or Inf")
        X.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def p(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class Shard:
    """Index set S_i into a dataset."""

    indices: np.ndarray
    dataset: Dataset

    @property
    def size(self):
        return self.indices.shape[0]

    def arrays(self):
        return self.dataset.features[self.indices], self.dataset.labels[self.indices]


@dataclass(frozen=True)
class Objective:
    """Loss family, regulariser and problem dimension."""

    kind: str
    reg: float
    dim: int
    num_classes: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if self.reg < 0:
            raise ConfigError("regulariser must be non-negative")

    @property
    def num_features(self):
        if self.kind == "softmax":
            return self.dim // (self.num_classes - 1)
        return self.dim


def make_objective(kind, dataset, reg=None):
    """Objective matching ``dataset`` (softmax d = p (C-1); otherwise d = p)."""
    if kind not in KINDS:
        raise ConfigError(f"unknown objective kind {kind!r}")
    reg = DEFAULT_REG[kind] if reg is None else float(reg)
    p = dataset.p
    if kind == "softmax":
        C = dataset.num_classes
        if C < 2:
            raise ConfigError("softmax needs at least two classes")
        return Objective(kind, reg, p * (C - 1), C)
    if kind == "logistic":
        if dataset.num_classes != 2:
            raise ConfigError("logistic regression needs labels in {0, 1}")
        return Objective(kind, reg, p, 2)
    if dataset.num_classes:
        raise ConfigError("least squares needs real-valued targets")
    return Objective(kind, reg, p)


# ---------------------------------------------------------------------------
# local objective


class LocalObjective:
    """f_i for one shard: value, gradient and Hessian-vector products.

    Instances are read-only after construction and safe to share between
    threads.
    """

    def __init__(self, objective, X, y):
        self.objective = objective
        self.X = X
        self.y = y
        self.size = X.shape[0]
        self.reg = objective.reg
        if objective.kind == "softmax":
            C = objective.num_classes
            onehot = np.zeros((X.shape[0], C - 1))
            rows = np.nonzero(y < C - 1)[0]
            onehot[rows, y[rows].astype(int)] = 1.0
            self._onehot = onehot

    def _check(self, w):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.objective.dim,):
            raise DimensionError(f"expected w of length {self.objective.dim}, got {w.shape}")
        return w

    # softmax helpers: logits of the first C-1 classes, last class fixed at 0
    def _blocks(self, w):
        C = self.objective.num_classes
        return w.reshape(C - 1, -1).T

    def _softmax_probs(self, Z):
        top = np.maximum(Z.max(axis=1), 0.0)
        E = np.exp(Z - top[:, None])
        denom = E.sum(axis=1) + np.exp(-top)
        return E / denom[:, None], top + np.log(denom)

    def value(self, w):
        w = self._check(w)
        kind = self.objective.kind
        reg_term = 0.5 * self.reg * float(w @ w)
        if self.size == 0:
            return reg_term
        if kind == "least_squares":
            r = self.X @ w - self.y
            return 0.5 * float(r @ r) + reg_term
        if kind == "logistic":
            z = self.X @ w
            return float(np.mean(np.logaddexp(0.0, z) - self.y * z)) + reg_term
        Z = self.X @ self._blocks(w)
        _, lse = self._softmax_probs(Z)
        picked = np.sum(Z * self._onehot, axis=1)
        return float(np.mean(lse - picked)) + reg_term

    def gradient(self, w):
        w = self._check(w)
        kind = self.objective.kind
        g = self.reg * w
        if self.size == 0:
            return g
        if kind == "least_squares":
            return self.X.T @ (self.X @ w - self.y) + g
        if kind == "logistic":
            s = _sigmoid(self.X @ w)
            return self.X.T @ (s - self.y) / self.size + g
        P, _ = self._softmax_probs(self.X @ self._blocks(w))
        G = self.X.T @ (P - self._onehot) / self.size
        return G.T.ravel() + g

    def value_and_gradient(self, w):
        return self.value(w), self.gradient(w)

    def minibatch_gradient(self, w, rows):
        """Unbiased estimate of the shard gradient from the rows ``rows``."""
        rows = np.asarray(rows)
        if rows.shape[0] == self.size:
            return self.gradient(w)
        sub = LocalObjective(self.objective, self.X[rows], self.y[rows])
        g = sub.gradient(w)
        if self.objective.kind == "least_squares":
            # sum-form loss: rescale the data term to the full shard
            w = self._check(w)
            g = (g - self.reg * w) * (self.size / rows.shape[0]) + self.reg * w
        return g

    def hessian_map(self, w):
        """Symmetric LinearMap v -> H_i(w) v with the w-dependent parts precomputed."""
        w = self._check(w)
        kind = self.objective.kind
        X, reg, d = self.X, self.reg, self.objective.dim
        if self.size == 0:
            return LinearMap(d, d, lambda v: reg * v, symmetric=True)
        if kind == "least_squares":
            def apply(v):
                return X.T @ (X @ v) + reg * v
        elif kind == "logistic":
            s = _sigmoid(X @ w)
            weights = s * (1.0 - s) / self.size

            def apply(v):
                return X.T @ (weights * (X @ v)) + reg * v
        else:
            P, _ = self._softmax_probs(X @ self._blocks(w))
            scale = 1.0 / self.size

            def apply(v):
                A = X @ self._blocks(v)
                B = P * A
                B -= P * B.sum(axis=1, keepdims=True)
                return (X.T @ B).T.ravel() * scale + reg * v
        return LinearMap(d, d, apply, symmetric=True)

    def hvp(self, w, v):
        v = self._check(v)
        return self.hessian_map(w).matvec(v)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def local_objective(objective, shard):
    X, y = shard.arrays()
    return LocalObjective(objective, X, y)


def local_value(objective, shard, w):
    return local_objective(objective, shard).value(w)


def local_gradient(objective, shard, w):
    return local_objective(objective, shard).gradient(w)


def local_hvp(objective, shard, w, v):
    return local_objective(objective, shard).hvp(w, v)


# ---------------------------------------------------------------------------
# partitioning


def partition(n, m, seed=0, dataset=None):
    """Randomly split {0..n-1} into m shards whose sizes differ by at most one.

    Returns index arrays (sorted within each shard), or ``Shard`` objects
    when ``dataset`` is given.
    """
    n, m = int(n), int(m)
    if m < 1:
        raise ConfigError("need at least one worker")
    if m > n:
        raise ConfigError(f"cannot split {n} samples over {m} workers")
    perm = np.random.default_rng(seed).permutation(n)
    parts = [np.sort(c) for c in np.array_split(perm, m)]
    if dataset is None:
        return parts
    return [Shard(idx, dataset) for idx in parts]


# ---------------------------------------------------------------------------
# synthetic data

_SYNTH_KEYS = {
    "softmax": {"n": int, "p": int, "C": int, "scale": float, "cond": float, "flip": float},
    "logistic": {"n": int, "p": int, "scale": float, "cond": float, "flip": float},
    "least_squares": {"n": int, "p": int, "noise": float, "cond": float},
}
_SYNTH_DEFAULTS = {
    "softmax": {"n": 1000, "p": 20, "C": 5, "scale": 1.0, "cond": 1.0, "flip": 0.0},
    "logistic": {"n": 1000, "p": 20, "scale": 1.0, "cond": 1.0, "flip": 0.0},
    "least_squares": {"n": 100, "p": 20, "noise": 0.1, "cond": 1.0},
}


def parse_params(text, kind):
    """Parse "n=100,p=20" against the keys allowed for ``kind``."""
    allowed = _SYNTH_KEYS[kind]
    params = dict(_SYNTH_DEFAULTS[kind])
    if text:
        for item in text.split(","):
            key, sep, val = item.partition("=")
            key = key.strip()
            if not sep or key not in allowed:
                raise ConfigError(f"bad synthetic parameter {item!r} for {kind}")
            try:
                params[key] = allowed[key](val)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {val!r}") from None
    if params["n"] < 1 or params["p"] < 1:
        raise ConfigError("n and p must be positive")
    if kind == "softmax" and params["C"] < 2:
        raise ConfigError("C must be at least 2")
    return params


def _flip_labels(rng, y, num_classes, fraction):
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"flip must lie in [0, 1], got {fraction}")
    mask = rng.random(y.size) < fraction
    y = y.copy()
    y[mask] = rng.integers(0, num_classes, size=int(mask.sum()))
    return y


def gen_synthetic(kind, params=None, seed=0):
    """Gaussian-feature data with a planted model.

    Classification labels come from a planted linear separator (the arg-max
    of the planted scores), so by default the classes are linearly
    separable; ``flip`` re-draws that fraction of labels uniformly at random.
    Least-squares targets are b = A w* + noise and may be under- or
    over-determined. ``cond`` spreads the feature scales geometrically over
    [1/cond, 1].
    """
    if isinstance(params, str) or params is None:
        params = parse_params(params or "", kind)
    rng = np.random.default_rng(seed)
    n, p = params["n"], params["p"]
    X = rng.standard_normal((n, p)) * np.geomspace(1.0, 1.0 / params["cond"], p)
    if kind == "least_squares":
        w_star = rng.standard_normal(p)
        y = X @ w_star + params["noise"] * rng.standard_normal(n)
        return Dataset(X, y, 0)
    if kind == "logistic":
        w_star = params["scale"] * rng.standard_normal(p) / math.sqrt(p)
        y = (X @ w_star > 0).astype(np.int64)
        return Dataset(X, _flip_labels(rng, y, 2, params["flip"]), 2)
    if kind == "softmax":
        C = params["C"]
        W = params["scale"] * rng.standard_normal((p, C)) / math.sqrt(p)
        y = np.argmax(X @ W, axis=1).astype(np.int64)
        return Dataset(X, _flip_labels(rng, y, C, params["flip"]), C)
    raise ConfigError(f"unknown objective kind {kind!r}")


# ---------------------------------------------------------------------------
# file formats


def _parse_label(tok, classification, where):
    try:
        if classification:
            val = float(tok)
            if not val.is_integer():
                raise ValueError
            return int(val)
        return float(tok)
    except ValueError:
        raise DataError(f"{where}: bad label {tok!r}") from None


def _finish(rows_X, labels, classification, source):
    if not rows_X:
        raise DataError(f"{source}: no data rows")
    X = np.array(rows_X, dtype=np.float64)
    if not classification:
        return Dataset(X, np.array(labels, dtype=np.float64), 0)
    y = np.array(labels, dtype=np.int64)
    classes = np.unique(y)
    if classes[0] != 0 or classes[-1] != classes.size - 1:
        warnings.warn(f"{source}: labels {classes.tolist()} re-mapped to 0..{classes.size - 1}",
                      stacklevel=3)
        y = np.searchsorted(classes, y)
    return Dataset(X, y, int(classes.size))


def load_csv(path, classification=True):
    """Dense CSV: no header, first field label, remaining p fields reals."""
    rows_X, labels, width = [], [], None
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open dataset file {path}: {exc.strerror}") from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            where = f"{path}: row {lineno}"
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{where}: expected {width} fields, got {len(row)}")
            labels.append(_parse_label(row[0].strip(), classification, where))
            try:
                rows_X.append([float(c) for c in row[1:]])
            except ValueError:
                raise DataError(f"{where}: non-numeric feature value") from None
    return _finish(rows_X, labels, classification, path)


def load_sparse(path, classification=True, num_features=None):
    """Sparse text: "LABEL idx:val idx:val ..." with 1-based ascending indices, densified."""
    entries, labels, width = [], [], 0
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open dataset file {path}: {exc.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            toks = line.split()
            if not toks:
                continue
            where = f"{path}: row {lineno}"
            labels.append(_parse_label(toks[0], classification, where))
            row, last = [], 0
            for tok in toks[1:]:
                idx, sep, val = tok.partition(":")
                try:
                    j, v = int(idx), float(val)
                except ValueError:
                    raise DataError(f"{where}: bad entry {tok!r}") from None
                if not sep or j <= last:
                    raise DataError(f"{where}: indices must be 1-based and ascending")
                row.append((j - 1, v))
                last = j
            width = max(width, last)
            entries.append(row)
    if num_features is not None:
        if width > num_features:
            raise DataError(f"{path}: feature index {width} exceeds {num_features}")
        width = num_features
    rows_X = []
    for row in entries:
        dense = [0.0] * width
        for j, v in row:
            dense[j] = v
        rows_X.append(dense)
    return _finish(rows_X, labels, classification, path)


def load_dataset(path, fmt, classification=True):
    if fmt == "csv":
        return load_csv(path, classification)
    if fmt == "sparse":
        return load_sparse(path, classification)
    raise ConfigError(f"unknown dataset format {fmt!r}")


# ---------------------------------------------------------------------------
# problem spec strings


def parse_problem(spec):
    """Split a problem spec into (kind, source, argument).

    Forms: ``synthetic-<kind>:k=v,...``, ``csv-<kind>:PATH``,
    ``sparse-<kind>:PATH`` where kind is softmax, least-squares or logistic.
    """
    head, _, arg = spec.partition(":")
    source, _, kind = head.partition("-")
    kind = kind.replace("-", "_")
    if source not in ("synthetic", "csv", "sparse") or kind not in KINDS:
        raise ConfigError(f"bad problem spec {spec!r}")
    if source != "synthetic" and not arg:
        raise ConfigError(f"problem spec {spec!r} needs a file path")
    return kind, source, arg


def build_problem(spec, seed=0, reg=None):
    """Dataset and Objective for a problem spec string."""
    kind, source, arg = parse_problem(spec)
    classification = kind != "least_squares"
    if source == "synthetic":
        data = gen_synthetic(kind, parse_params(arg, kind), seed)
    else:
        data = load_dataset(arg, source, classification)
    return data, make_objective(kind, data, reg)
