"""Baselines that share the cluster and ledger with DINGO.

* GIANT: workers solve H_i x_i = g with CG, the driver averages
  p = -mean(x_i) and backtracks on the objective value. Six rounds per
  iteration (w, g_i, g, x_i, p, k objective values).
* Gradient descent: w <- w - lr g. Two rounds per iteration.
* Synchronous mini-batch SGD: each worker draws a fixed-seed mini-batch of
  its shard per step. Two rounds per step.
"""
import math
from dataclasses import dataclass

import numpy as np

from .comms import fixed_order_mean, fixed_order_sum
from .errors import ConfigError, LineSearchError
from .krylov import cg_solve
from .linops import dot
from .optimizer import IterateState, RunResult, gradient_round

METHODS = ("giant", "gd", "sync_sgd")


@dataclass
class BaselineConfig:
    """Baseline hyper-parameters.

    Attributes:
        method: "giant", "gd" or "sync_sgd".
        lr: step size for gd / sync_sgd.
        batch_fraction: fraction of each shard per SGD step (0.2 gives n/(5m)).
        cg_cap, cg_tol: GIANT's local CG settings.
        rho: Armijo constant of GIANT's line-search on f.
        ls_points, ls_ratio: GIANT's grid {ls_ratio^j}.
        grad_tol, max_iters: stopping rule.
    """

    method: str = "gd"
    lr: float = 1.0
    batch_fraction: float = 0.2
    cg_cap: int = 50
    cg_tol: float = 1e-8
    rho: float = 1e-4
    ls_points: int = 51
    ls_ratio: float = 0.5
    grad_tol: float = 1e-8
    max_iters: int = 100

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown baseline {self.method!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0 < self.batch_fraction <= 1:
            raise ConfigError("batch fraction must lie in (0, 1]")
        if self.cg_cap < 1 or not self.cg_tol > 0:
            raise ConfigError("CG cap must be >= 1 and tolerance positive")
        if not 0 < self.rho < 1 or self.ls_points < 1 or not 0 < self.ls_ratio < 1:
            raise ConfigError("bad line-search settings")
        if self.max_iters < 0 or self.grad_tol < 0:
            raise ConfigError("bad stopping rule")
        return self


def _finite(*xs):
    return all(np.all(np.isfinite(x)) for x in xs)


def _finish(state, status):
    state.case = status
    return status


def giant_step(env, w, cfg, g=None, f=None):
    """One GIANT iteration from w.

    Returns:
        (w_next, alpha, g, f, cg_flags) where g, f are the gradient and value at w.
    """
    if g is None:
        g, f = gradient_round(env, w)
    env.broadcast("giant:g", {"g": g})

    def local_newton(ctx):
        H = ctx.objective.hessian_map(ctx.inbox["w"])
        rep = cg_solve(H, ctx.inbox["g"], cfg.cg_cap, cfg.cg_tol)
        return {"x": rep.solution, "flag": rep.flag}

    res = env.reduce("giant:x_i", local_newton, vector_keys=("x",))
    p = -fixed_order_mean([r["x"] for r in res])
    grid = [cfg.ls_ratio ** j for j in range(cfg.ls_points)]
    env.broadcast("giant:p", {"p": p})

    def trial_values(ctx):
        w0, q = ctx.inbox["w"], ctx.inbox["p"]
        return {"F": np.array([ctx.objective.value(w0 + a * q) for a in grid])}

    vals = env.reduce("giant:f_i(trials)", trial_values)
    F = fixed_order_sum([r["F"] for r in vals]) / env.m
    slope = dot(p, g)
    for a, fa in zip(grid, F):
        if fa <= f + a * cfg.rho * slope:
            return w + a * p, a, g, f, [r["flag"] for r in res]
    raise LineSearchError("GIANT line-search found no step",
                          {"f": f, "slope": slope, "smallest_trial": float(np.min(F))})


def gd_step(env, w, cfg, g=None):
    """w - lr * g (gradient computed if not given). Returns (w_next, g, f)."""
    f = None
    if g is None:
        g, f = gradient_round(env, w)
    return w - cfg.lr * g, g, f


def _batch_rows(ctx, step, fraction):
    size = ctx.objective.size
    b = max(1, int(round(fraction * size)))
    if b >= size:
        return np.arange(size)
    return np.sort(ctx.rng(step).choice(size, size=b, replace=False))


def sgd_step(env, w, cfg, step):
    """One synchronous mini-batch step. Returns (w_next, averaged mini-batch gradient)."""
    env.broadcast("sgd:w", {"w": w, "step": float(step)})

    def work(ctx):
        rows = _batch_rows(ctx, int(ctx.inbox["step"]), cfg.batch_fraction)
        return {"g": ctx.objective.minibatch_gradient(ctx.inbox["w"], rows)}

    res = env.reduce("sgd:g_i", work, vector_keys=("g",))
    ghat = fixed_order_mean([r["g"] for r in res])
    return w - cfg.lr * ghat, ghat


def _full_metrics(env, w):
    res = env.monitor("monitor:f,g", lambda ctx: ctx.objective.value_and_gradient(w))
    f = math.fsum(r[0] for r in res) / env.m
    g = fixed_order_mean([r[1] for r in res])
    return g, f


def baseline_run(env, cfg, w0, callback=None):
    """Run a baseline from w0. Trace rows mirror DINGO's (case column left empty).

    The final state's ``case`` is "converged", "max_iters" or "diverged"
    (non-finite iterate, objective or gradient).
    """
    cfg.validate()
    w = np.array(w0, dtype=np.float64, copy=True)
    if w.shape != (env.dim,):
        raise ConfigError(f"w0 must have length {env.dim}")
    with np.errstate(over="ignore", invalid="ignore"):
        # a diverging iterate overflows; that is detected and reported below
        return _baseline_loop(env, cfg, w, callback)


def _baseline_loop(env, cfg, w, callback):
    states = []
    g = f = None
    t = 0
    status = None
    while status is None:
        env.ledger.begin_iteration(t)
        start = env.ledger.rounds
        if cfg.method == "sync_sgd":
            g, f = _full_metrics(env, w)
        else:
            g, f = gradient_round(env, w)
        gnorm = math.sqrt(dot(g, g)) if _finite(g) else math.inf
        state = IterateState(t, env.ledger.rounds, f, gnorm)
        states.append(state)
        if not (_finite(w, g) and math.isfinite(f)):
            status = _finish(state, "diverged")
        elif gnorm <= cfg.grad_tol:
            status = _finish(state, "converged")
        elif t >= cfg.max_iters:
            status = _finish(state, "max_iters")
        else:
            if cfg.method == "giant":
                w, state.alpha, _, _, _ = giant_step(env, w, cfg, g, f)
            elif cfg.method == "gd":
                w, _, _ = gd_step(env, w, cfg, g)
                state.alpha = cfg.lr
            else:
                w, _ = sgd_step(env, w, cfg, t)
                state.alpha = cfg.lr
            if callback is not None:
                callback(state)
            t += 1
        state.iteration_rounds = env.ledger.rounds - start
    return RunResult(w, states, status, env.ledger_report())
