"""Vector helpers and matrix-free linear operators.

Operators wrap a callable ``apply`` (and ``apply_transpose`` when the map is
not symmetric). The Hessian of a shard, its damped stacking [H; phi I] and
the normal operator H^2 + phi^2 I are all expressed through these classes so
the Krylov solvers never need an explicit matrix.
"""
import math

import numpy as np

from .errors import DimensionError, NonFiniteError


def as_vector(x, name="vector"):
    """Return ``x`` as a 1-D float64 array, rejecting NaN/Inf."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {v.shape}")
    check_finite(v, name)
    return v


def check_finite(v, name="vector"):
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return v


def _check_same(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")


def dot(a, b):
    """Inner product with a correctly rounded sum, independent of BLAS blocking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    return math.fsum(np.multiply(a, b).tolist())


def norm(v):
    return math.sqrt(dot(v, v))


def axpy(a, x, y):
    """Return a*x + y (new array)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same(x, y)
    return a * x + y


def scale(a, x):
    return a * np.asarray(x, dtype=np.float64)


def copy(x):
    return np.array(x, dtype=np.float64, copy=True)


class LinearMap:
    """A linear operator given by callables.

    Args:
        rows, cols: operator shape.
        apply: x (cols,) -> A x (rows,).
        apply_transpose: y (rows,) -> A^T y (cols,). Ignored when ``symmetric``.
        symmetric: the operator equals its transpose.
    """

    def __init__(self, rows, cols, apply, apply_transpose=None, symmetric=False):
        if rows <= 0 or cols <= 0:
            raise DimensionError("operator dimensions must be positive")
        if symmetric and rows != cols:
            raise DimensionError("a symmetric operator must be square")
        self.rows = int(rows)
        self.cols = int(cols)
        self.symmetric = bool(symmetric)
        self._apply = apply
        self._apply_t = apply if symmetric else apply_transpose

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def has_transpose(self):
        return self._apply_t is not None

    def matvec(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.cols,):
            raise DimensionError(f"expected vector of length {self.cols}, got {x.shape}")
        return np.asarray(self._apply(x), dtype=np.float64)

    def rmatvec(self, y):
        if self._apply_t is None:
            raise NotImplementedError("operator has no transpose")
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.rows,):
            raise DimensionError(f"expected vector of length {self.rows}, got {y.shape}")
        return np.asarray(self._apply_t(y), dtype=np.float64)

    def __matmul__(self, x):
        return self.matvec(x)

    def to_dense(self):
        """Materialise the operator column by column (tests and small problems only)."""
        eye = np.eye(self.cols)
        return np.column_stack([self.matvec(eye[:, j]) for j in range(self.cols)])


class DenseMap(LinearMap):
    """LinearMap backed by an explicit matrix."""

    def __init__(self, matrix, symmetric=None):
        M = np.array(matrix, dtype=np.float64)
        if M.ndim != 2:
            raise DimensionError("matrix must be 2-D")
        if symmetric is None:
            symmetric = M.shape[0] == M.shape[1] and np.allclose(M, M.T, rtol=0.0, atol=0.0)
        self.matrix = M
        super().__init__(M.shape[0], M.shape[1], M.__matmul__, M.T.__matmul__, symmetric)


class IdentityMap(LinearMap):
    def __init__(self, n):
        super().__init__(n, n, lambda x: x.copy(), symmetric=True)


class StackedMap(LinearMap):
    """The (2d x d) operator [H; phi I] for a symmetric d x d map ``H``."""

    def __init__(self, top, phi):
        if not top.symmetric:
            raise DimensionError("StackedMap needs a symmetric top block")
        if not phi > 0.0:
            raise ValueError("phi must be positive")
        self.top = top
        self.phi = float(phi)
        d = top.cols
        super().__init__(2 * d, d, self._stack, self._unstack)

    def _stack(self, x):
        return np.concatenate([self.top.matvec(x), self.phi * x])

    def _unstack(self, y):
        d = self.cols
        return self.top.matvec(y[:d]) + self.phi * y[d:]


class NormalMap(LinearMap):
    """H^2 + phi^2 I, the normal operator of ``StackedMap(H, phi)`` (SPD for phi > 0)."""

    def __init__(self, top, phi):
        if not top.symmetric:
            raise DimensionError("NormalMap needs a symmetric operator")
        self.top = top
        self.phi = float(phi)
        phi2 = self.phi * self.phi
        super().__init__(top.rows, top.cols,
                         lambda x: top.matvec(top.matvec(x)) + phi2 * x,
                         symmetric=True)


def adjoint_check(A, trials=10, seed=0):
    """Largest relative violation of <A x, y> = <x, A^T y> over random probes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(A.cols)
        y = rng.standard_normal(A.rows)
        Ax = A.matvec(x)
        Aty = A.rmatvec(y)
        gap = abs(dot(Ax, y) - dot(x, Aty))
        worst = max(worst, gap / (norm(Ax) * norm(y) + 1e-300))
    return worst
