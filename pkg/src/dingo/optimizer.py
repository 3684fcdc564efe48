"""The DINGO iteration: case selection, Case-3 direction and line-search.

One iteration at w_t with gradient g_t:

1. Workers compute H_i g, v1_i ~ H_i^+ g (MINRES-QLP) and
   v2_i ~ (H_i^2 + phi^2 I)^{-1} H_i g (LSMR); the driver averages them.
2. Case 1 takes p = -mean(v1) if <mean(v1), Hg> >= theta ||g||^2, else
   Case 2 takes p = -mean(v2) under the same test, else Case 3 asks the
   workers with <v2_i, Hg> < theta ||g||^2 for p_i = -v2_i - lambda_i v3_i,
   where v3_i ~ (H_i^2 + phi^2 I)^{-1} Hg (CG) and lambda_i > 0 makes the
   constraint <p_i, Hg> = -theta ||g||^2 active.
3. Backtracking picks the largest alpha in {1, w, w^2, ...} with
   ||g(w + alpha p)||^2 <= ||g||^2 + 2 alpha rho <p, Hg>; workers return
   their gradients at every trial point, so the accepted one becomes the
   next g_t without another gradient round.

Exact updates are the same code with solver tolerance 1e-14 and cap d + 5.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .comms import fixed_order_mean, fixed_order_sum
from .errors import AssumptionViolation, ConfigError, InvariantViolation, LineSearchError
from .krylov import cg_solve, damped_lsq_solve, minres_minnorm_solve
from .linops import NormalMap, dot, norm

EPS = np.finfo(float).eps
# relative margin kept on the descent certificate so that it survives
# re-evaluation of <p, Hg> in a different summation order
CERTIFICATE_RTOL = 1e-11


@dataclass
class DingoConfig:
    """Hyper-parameters.

    Attributes:
        theta: descent threshold in <p, Hg> <= -theta ||g||^2.
        phi: damping in the Case-2/3 sub-problems.
        rho: sufficient-decrease constant of the line-search.
        grad_tol: stop once ||g|| <= grad_tol (delta).
        max_iters: iteration limit T.
        solver_cap, solver_tol: Krylov cap and relative tolerance.
        exact: use tolerance 1e-14 and cap d + 5 instead.
        ls_points, ls_ratio: line-search grid {ls_ratio^j, j < ls_points}.
        reorth: full reorthogonalisation inside the Krylov solvers.
        keep_vectors: store w, g, Hg, p and per-worker p_i on each state.
    """

    theta: float = 1e-4
    phi: float = 1e-6
    rho: float = 1e-4
    grad_tol: float = 1e-8
    max_iters: int = 100
    solver_cap: int = 50
    solver_tol: float = 1e-8
    exact: bool = False
    ls_points: int = 51
    ls_ratio: float = 0.5
    reorth: bool = True
    keep_vectors: bool = False

    def validate(self):
        if not self.theta > 0:
            raise ConfigError("theta must be positive")
        if not self.phi > 0:
            raise ConfigError("phi must be positive")
        if not 0 < self.rho < 1:
            raise ConfigError("rho must lie in (0, 1)")
        if self.grad_tol < 0:
            raise ConfigError("grad_tol must be non-negative")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be non-negative")
        if self.solver_cap < 1 or not self.solver_tol > 0:
            raise ConfigError("solver cap must be >= 1 and tolerance positive")
        if self.ls_points < 1 or not 0 < self.ls_ratio < 1:
            raise ConfigError("line-search needs >= 1 point and ratio in (0, 1)")
        return self

    def solver_settings(self, d):
        if self.exact:
            return d + 5, 1e-14
        return self.solver_cap, self.solver_tol

    def grid(self):
        return [self.ls_ratio ** j for j in range(self.ls_points)]


@dataclass
class IterateState:
    """Record of iteration t (the last state of a run carries the stop reason as ``case``)."""

    iteration: int
    rounds: int
    f: float
    grad_norm: float
    case: str = ""
    alpha: float = math.nan
    dir_hg: float = math.nan
    hg_norm: float = math.nan
    lambdas: dict = field(default_factory=dict)
    istar: list = field(default_factory=list)
    certificates: list = field(default_factory=list)
    lemma3_ok: object = None
    iteration_rounds: int = 0
    next_grad_norm: float = math.nan
    w: object = None
    g: object = None
    Hg: object = None
    p: object = None
    p_workers: dict = field(default_factory=dict)

    def row(self):
        alpha = "" if math.isnan(self.alpha) else repr(float(self.alpha))
        return [self.iteration, self.rounds, repr(float(self.f)), repr(float(self.grad_norm)),
                self.case, alpha]


@dataclass
class RunResult:
    """Final iterate, per-iteration states and the ledger snapshot of a run."""

    w: np.ndarray
    states: list
    status: str
    ledger: object

    def rows(self):
        return [s.row() for s in self.states]


DingoResult = RunResult


# ---------------------------------------------------------------------------
# rounds


def gradient_round(env, w):
    """Broadcast w, reduce (g_i, f_i). Returns (g, f) averaged in worker order."""
    env.broadcast("gradient:w", {"w": w})

    def work(ctx):
        f_i, g_i = ctx.objective.value_and_gradient(ctx.inbox["w"])
        return {"g": g_i, "f": f_i}

    res = env.reduce("gradient:g_i", work, vector_keys=("g",))
    g = fixed_order_mean([r["g"] for r in res])
    f = math.fsum(r["f"] for r in res) / env.m
    return g, f


def _worker_case_vectors(cap, tol, phi, reorth):
    def work(ctx):
        w, g = ctx.inbox["w"], ctx.inbox["g"]
        H = ctx.objective.hessian_map(w)
        Hg = H.matvec(g)
        r1 = minres_minnorm_solve(H, g, cap, tol, reorth)
        r2 = damped_lsq_solve(H, phi, g, cap, tol, reorth)
        ctx.state["H"] = H
        ctx.state["v2"] = r2.solution
        return {"Hg": Hg, "v1": r1.solution, "v2": r2.solution,
                "eps1": r1.relative_residual, "eps2": r2.relative_residual,
                "flag1": r1.flag, "flag2": r2.flag,
                "iters1": r1.iterations, "iters2": r2.iterations}
    return work


def case_vectors_round(env, w, g, cfg):
    """Broadcast (w, g); reduce (H_i g, v1_i, v2_i). Two rounds.

    Returns:
        (Hg, v1_bar, v2_bar, per-worker results).
    """
    cap, tol = cfg.solver_settings(env.dim)
    env.broadcast("case:w,g", {"w": w, "g": g})
    res = env.reduce("case:Hg_i,v1_i,v2_i", _worker_case_vectors(cap, tol, cfg.phi, cfg.reorth),
                     vector_keys=("Hg", "v1", "v2"))
    Hg = fixed_order_mean([r["Hg"] for r in res])
    v1 = fixed_order_mean([r["v1"] for r in res])
    v2 = fixed_order_mean([r["v2"] for r in res])
    return Hg, v1, v2, res


def select_case(Hg, v1_bar, v2_bar, g, theta):
    """Return "case1", "case2" or "case3" (tests applied in that order)."""
    gg = dot(g, g)
    if gg == 0.0:
        raise InvariantViolation("case selection needs g != 0")
    if norm(Hg) == 0.0:
        raise AssumptionViolation("H g = 0 with g != 0: the Hessian annihilates the gradient")
    thr = theta * gg
    if dot(v1_bar, Hg) >= thr:
        return "case1"
    if dot(v2_bar, Hg) >= thr:
        return "case2"
    return "case3"


def case3_lambda(v2, v3, Hg, gnorm2, theta):
    """lambda = (theta ||g||^2 - <v2, Hg>) / <v3, Hg>."""
    denom = dot(v3, Hg)
    if not denom > 0.0:
        raise InvariantViolation(f"<v3, Hg> = {denom!r} is not positive")
    return (theta * gnorm2 - dot(v2, Hg)) / denom


def case3_direction(v2, v3, Hg, gnorm2, theta):
    """p_i = -v2 - lambda v3 with the constraint <p_i, Hg> = -theta ||g||^2 active.

    lambda comes from the closed form; one correction step then removes
    the rounding left in <p_i, Hg>.

    Returns:
        (p_i, lambda).
    """
    lam = case3_lambda(v2, v3, Hg, gnorm2, theta)
    p = -v2 - lam * v3
    lam += (dot(p, Hg) + theta * gnorm2) / dot(v3, Hg)
    p = -v2 - lam * v3
    if not lam > 0.0:
        raise InvariantViolation(f"lambda = {lam!r} is not positive for a worker in I*")
    return p, lam


def _worker_case3(cap, tol, phi, theta, reorth):
    def work(ctx):
        Hg = ctx.inbox["Hg"]
        gnorm2 = ctx.inbox["gnorm2"]
        H = ctx.state["H"]
        v2 = ctx.state["v2"]
        r3 = cg_solve(NormalMap(H, phi), Hg, cap, tol, reorth)
        p, lam = case3_direction(v2, r3.solution, Hg, gnorm2, theta)
        return {"p": p, "lam": lam, "eps3": r3.relative_residual, "flag3": r3.flag,
                "iters3": r3.iterations}
    return work


def case3_round(env, Hg, g, per_worker, cfg):
    """Case-3 direction. Two rounds (broadcast Hg to I*, reduce p_i from I*).

    Workers outside I* contribute p_i = -v2_i, which the driver already holds.

    Returns:
        (p, istar, lambdas, p_workers, case3 results keyed by worker).
    """
    gnorm2 = dot(g, g)
    thr = cfg.theta * gnorm2
    istar = [i for i, r in enumerate(per_worker) if dot(r["v2"], Hg) < thr]
    if not istar:
        raise InvariantViolation("Case 3 selected with an empty I*")
    cap, tol = cfg.solver_settings(env.dim)
    env.broadcast("case3:Hg", {"Hg": Hg, "gnorm2": gnorm2}, targets=istar)
    res = env.reduce("case3:p_i", _worker_case3(cap, tol, cfg.phi, cfg.theta, cfg.reorth),
                     targets=istar, vector_keys=("p",))
    by_worker = dict(zip(istar, res))
    p_workers = {}
    for i, r in enumerate(per_worker):
        p_workers[i] = by_worker[i]["p"] if i in by_worker else -r["v2"]
    p = fixed_order_mean([p_workers[i] for i in range(env.m)])
    lambdas = {i: by_worker[i]["lam"] for i in istar}
    return p, istar, lambdas, p_workers, by_worker


def enforce_certificate(p, Hg, gnorm2, theta):
    """Scale p up (if needed) so <p, Hg> <= -theta ||g||^2 holds with a rounding margin.

    The margin covers evaluating the inner product in any summation order.
    Raises InvariantViolation if <p, Hg> is not negative at all.
    """
    c = dot(p, Hg)
    slack = len(p) * EPS * math.fsum(np.abs(p * Hg).tolist())
    target = theta * gnorm2 * (1.0 + CERTIFICATE_RTOL) + slack
    if not c < 0.0:
        raise InvariantViolation(f"<p, Hg> = {c!r} is not negative")
    if -c < target:
        p = p * (target / -c)
        c = dot(p, Hg)
    return p, c


def _worker_line_search(grid):
    def work(ctx):
        w, p = ctx.inbox["w"], ctx.inbox["p"]
        G = np.empty((len(grid), w.shape[0]))
        F = np.empty(len(grid))
        for j, a in enumerate(grid):
            F[j], G[j] = ctx.objective.value_and_gradient(w + a * p)
        return {"G": G, "F": F}
    return work


def line_search(env, w, p, dir_hg, g, cfg):
    """Backtracking on ||g||^2 over the grid. Two rounds.

    Returns:
        (alpha, g_next, f_next).

    Raises:
        LineSearchError: ``dir_hg`` is not a descent certificate, or no grid
            point passes the test.
    """
    gnorm2 = dot(g, g)
    if not dir_hg <= -cfg.theta * gnorm2:
        raise LineSearchError("line-search needs <p, Hg> <= -theta ||g||^2",
                              {"dir_hg": dir_hg, "theta_gnorm2": cfg.theta * gnorm2})
    grid = cfg.grid()
    env.broadcast("linesearch:p", {"p": p})
    res = env.reduce("linesearch:grad_i(trials)", _worker_line_search(grid),
                     max_vectors=len(grid), vector_keys=("G",))
    G = fixed_order_sum([r["G"] for r in res]) / env.m
    F = fixed_order_sum([r["F"] for r in res]) / env.m
    # the test is evaluated with a few ulps to spare so that it cannot be
    # met by rounding alone
    guard = 4.0 * EPS * gnorm2
    for j, a in enumerate(grid):
        if dot(G[j], G[j]) <= gnorm2 + 2.0 * a * cfg.rho * dir_hg - guard:
            return a, G[j].copy(), float(F[j])
    raise LineSearchError("no line-search step satisfied the sufficient-decrease test",
                          {"grad_norm2": gnorm2, "dir_hg": dir_hg,
                           "smallest_trial_norm2": float(min(dot(x, x) for x in G))})


def check_inexactness(per_worker, case3=None, phi=None, K_hat=None):
    """Per-worker inexactness certificates from the solver reports.

    Returns:
        One dict per worker with eps1, eps2 (and eps3 for Case-3 workers),
        ``flagged`` when any is >= 1, and, when ``K_hat`` and ``phi`` are
        given, the advisory check eps3 < sqrt(phi^2 / (K_hat^2 + phi^2)).
    """
    out = []
    case3 = case3 or {}
    for i, r in enumerate(per_worker):
        cert = {"worker": i, "eps1": r["eps1"], "eps2": r["eps2"],
                "flag1": r.get("flag1"), "flag2": r.get("flag2")}
        if i in case3:
            cert["eps3"] = case3[i]["eps3"]
            cert["flag3"] = case3[i].get("flag3")
            if K_hat is not None and phi is not None:
                cert["eps3_bound_ok"] = cert["eps3"] < math.sqrt(phi * phi / (K_hat * K_hat + phi * phi))
        cert["flagged"] = any(cert.get(k, 0.0) >= 1.0 for k in ("eps1", "eps2", "eps3"))
        out.append(cert)
    return out


# ---------------------------------------------------------------------------
# driver loop


def dingo_run(env, cfg, w0, callback=None):
    """Run DINGO from ``w0`` until ||g|| <= grad_tol or max_iters iterations.

    Returns:
        DingoResult; the last state's ``case`` is "converged" or "max_iters".
    """
    cfg.validate()
    w = np.array(w0, dtype=np.float64, copy=True)
    if w.shape != (env.dim,):
        raise ConfigError(f"w0 must have length {env.dim}")
    states = []
    g = f = None
    t = 0
    while True:
        env.ledger.begin_iteration(t)
        start_rounds = env.ledger.rounds
        if g is None:
            g, f = gradient_round(env, w)
        else:
            env.ledger.note_skipped("gradient:reused from line-search")
        gnorm2 = dot(g, g)
        gnorm = math.sqrt(gnorm2)
        state = IterateState(t, env.ledger.rounds, f, gnorm)
        if cfg.keep_vectors:
            state.w, state.g = w.copy(), g.copy()
        states.append(state)
        if gnorm <= cfg.grad_tol or t >= cfg.max_iters:
            state.case = "converged" if gnorm <= cfg.grad_tol else "max_iters"
            state.iteration_rounds = env.ledger.rounds - start_rounds
            break

        Hg, v1, v2, per_worker = case_vectors_round(env, w, g, cfg)
        case = select_case(Hg, v1, v2, g, cfg.theta)
        state.hg_norm = norm(Hg)
        case3_res = {}
        if case == "case1":
            p = -v1
        elif case == "case2":
            p = -v2
        else:
            p, istar, lambdas, p_workers, case3_res = case3_round(env, Hg, g, per_worker, cfg)
            state.istar, state.lambdas = istar, lambdas
            if cfg.keep_vectors:
                state.p_workers = p_workers
        # if some worker passes the Case-2 test, theta phi <= ||Hg|| / ||g|| must hold
        small = sum(1 for r in per_worker if dot(r["v2"], Hg) < cfg.theta * gnorm2)
        if small < env.m:
            state.lemma3_ok = cfg.theta * cfg.phi <= state.hg_norm / gnorm * (1.0 + 1e-12)
        state.certificates = check_inexactness(per_worker, case3_res)
        p, dir_hg = enforce_certificate(p, Hg, gnorm2, cfg.theta)
        state.case = case
        state.dir_hg = dir_hg
        if cfg.keep_vectors:
            state.Hg, state.p = Hg, p.copy()

        alpha, g, f = line_search(env, w, p, dir_hg, g, cfg)
        w = w + alpha * p
        state.alpha = alpha
        state.next_grad_norm = norm(g)
        state.iteration_rounds = env.ledger.rounds - start_rounds
        if callback is not None:
            callback(state)
        t += 1
    status = states[-1].case
    return RunResult(w, states, status, env.ledger_report())
