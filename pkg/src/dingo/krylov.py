"""Matrix-free sub-problem solvers.

Three solvers, each started from the zero vector:

* ``cg_solve``: SPD systems, used for (H^2 + phi^2 I) v = H_t g.
* ``minres_minnorm_solve``: minimum-norm least squares A^+ b for symmetric,
  possibly singular A (MINRES-QLP).
* ``damped_lsq_solve``: (H^2 + phi^2 I)^{-1} H b through LSMR on the
  stacked operator [H; phi I].

Every ``SolveReport.relative_residual`` is recomputed explicitly from the
returned solution in the normal-equation form the optimizer checks, so it
is directly usable as an inexactness certificate.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError, InvariantViolation
from .linops import LinearMap, NormalMap, as_vector, norm

DEFAULT_CAP = 50
DEFAULT_TOL = 1e-8
# slack on the ||x|| <= ||b|| / phi post-check of damped_lsq_solve
NORM_BOUND_SLACK = 1e-9

FLAG_NAMES = {
    kernels.TOLERANCE_MET: "tolerance_met",
    kernels.CAP_REACHED: "cap_reached",
    kernels.BREAKDOWN: "breakdown",
}


@dataclass
class SolveReport:
    """Result of one sub-problem solve.

    Attributes:
        solution: the returned iterate.
        iterations: Krylov iterations performed (<= cap).
        relative_residual: explicit residual of ``solution`` in the solver's
            normal-equation form (see each solver).
        converged: the solver met its tolerance.
        flag: "tolerance_met", "cap_reached" or "breakdown".
        history: per-iteration residual of the best iterate so far
            (non-increasing), from the solver's recurrence.
    """

    solution: np.ndarray
    iterations: int
    relative_residual: float
    converged: bool
    flag: str
    history: list = field(default_factory=list)

    @property
    def certificate(self):
        return self.relative_residual


def _report(x, iters, flag, history, residual):
    hist = np.minimum.accumulate(np.asarray(history, dtype=float)).tolist() if history else []
    return SolveReport(x, int(iters), float(residual), flag == kernels.TOLERANCE_MET,
                       FLAG_NAMES[flag], hist)


def _rel(r, scale):
    return norm(r) / scale if scale > 0.0 else 0.0


def _check_inputs(A, b):
    b = as_vector(b, "right-hand side")
    if b.shape[0] != A.cols:
        raise DimensionError(f"operator has {A.cols} columns, rhs has length {b.shape[0]}")
    return b


def cg_solve(A: LinearMap, b, cap=DEFAULT_CAP, tol=DEFAULT_TOL, reorth=True, backend=None):
    """Conjugate gradients on an SPD operator.

    Args:
        A: symmetric positive-definite LinearMap.
        b: right-hand side.
        cap: iteration cap.
        tol: stop once ||A x - b|| <= tol ||b||.
        reorth: keep the residuals mutually orthogonal (finite termination).
        backend: kernel backend name, default the active one.

    Returns:
        SolveReport with relative_residual = ||A x - b|| / ||b||. A
        non-positive curvature direction ends the solve with flag
        "breakdown" and the best iterate found so far.
    """
    b = _check_inputs(A, b)
    K = kernels.get_backend(backend)
    x, iters, flag, hist = K.cg(A.matvec, b, int(cap), float(tol), reorth)
    res = _rel(A.matvec(x) - b, norm(b))
    return _report(x, iters, flag, hist, res)


def minres_minnorm_solve(A: LinearMap, b, cap=DEFAULT_CAP, tol=DEFAULT_TOL, reorth=True,
                         backend=None):
    """Minimum-norm least-squares solution of A x = b for symmetric A (MINRES-QLP).

    Returns:
        SolveReport with relative_residual = ||A^2 x - A b|| / ||A b||. When
        A b = 0 the minimum-norm solution is 0 and the flag is "breakdown".
    """
    b = _check_inputs(A, b)
    K = kernels.get_backend(backend)
    x, iters, flag, hist = K.minres_qlp(A.matvec, b, int(cap), float(tol), reorth)
    Ab = A.matvec(b)
    scale = norm(Ab)
    res = _rel(A.matvec(A.matvec(x)) - Ab, scale) if scale > 0.0 else 0.0
    return _report(x, iters, flag, hist, res)


def damped_lsq_solve(H: LinearMap, phi, b, cap=DEFAULT_CAP, tol=DEFAULT_TOL, reorth=True,
                     backend=None):
    """Solve min ||H x - b||^2 + phi^2 ||x||^2, i.e. x = (H^2 + phi^2 I)^{-1} H b.

    Returns:
        SolveReport with relative_residual = ||(H^2 + phi^2 I) x - H b|| / ||H b||.

    Raises:
        InvariantViolation: if ||x|| > ||b|| / phi (beyond a 1e-9 relative slack).
    """
    if not phi > 0.0:
        raise ValueError("phi must be positive")
    b = _check_inputs(H, b)
    K = kernels.get_backend(backend)
    x, iters, flag, hist = K.lsmr(H.matvec, H.matvec, b, float(phi), int(cap), float(tol), reorth)
    Hb = H.matvec(b)
    scale = norm(Hb)
    if scale == 0.0:
        return _report(np.zeros_like(b), 0, kernels.TOLERANCE_MET, [], 0.0)
    res = _rel(NormalMap(H, phi).matvec(x) - Hb, scale)
    bound = norm(b) / phi
    if norm(x) > bound * (1.0 + NORM_BOUND_SLACK):
        raise InvariantViolation(f"||x|| = {norm(x):.6e} exceeds ||b||/phi = {bound:.6e}")
    return _report(x, iters, flag, hist, res)
