import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dingo.comms import ClusterEnv
from dingo.errors import AssumptionViolation, InvariantViolation, LineSearchError
from dingo.krylov import cg_solve, damped_lsq_solve, minres_minnorm_solve
from dingo.linops import DenseMap, NormalMap
from dingo.optimizer import (DingoConfig, case3_direction, case3_lambda, case3_round,
                             case_vectors_round, check_inexactness, dingo_run, gradient_round,
                             line_search, select_case)
from dingo.problems import Dataset, LocalObjective, Shard, build_problem, make_objective, partition


def env_for(spec, m, seed=0, reg=None):
    data, obj = build_problem(spec, seed=seed, reg=reg)
    return ClusterEnv(obj, partition(data.n, m, seed, data), seed=seed), data, obj


def identity_env(d, m=1):
    data = Dataset(np.eye(d), np.zeros(d), 0)
    obj = make_objective("least_squares", data)
    return ClusterEnv(obj, [Shard(np.arange(d), data)] * m), obj


def softmax_dense_hessian(X, y, C, w, reg):
    """Explicit sum over samples of (diag(p) - p p^T) kron x x^T, with the last class pinned."""
    p = X.shape[1]
    W = w.reshape(C - 1, p).T
    H = np.zeros(((C - 1) * p, (C - 1) * p))
    for x in X:
        z = np.append(x @ W, 0.0)
        pr = np.exp(z - z.max())
        pr = (pr / pr.sum())[:-1]
        H += np.kron(np.diag(pr) - np.outer(pr, pr), np.outer(x, x))
    return H / X.shape[0] + reg * np.eye(H.shape[0])


# --- gradient round ---------------------------------------------------------


def test_gradient_round_identity_quadratic():
    env, _ = identity_env(2)
    g, f = gradient_round(env, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [1.0, 2.0])
    assert f == 2.5 and env.ledger.rounds == 2


def test_gradient_round_matches_unsharded_gradient():
    env, data, obj = env_for("synthetic-softmax:n=120,p=6,C=4", 4)
    w = np.random.default_rng(1).standard_normal(obj.dim)
    g, _ = gradient_round(env, w)
    ref = LocalObjective(obj, data.features, data.labels).gradient(w)
    assert np.linalg.norm(g - ref) <= 1e-12 * np.linalg.norm(ref)


def test_run_returns_immediately_below_tolerance():
    env, _ = identity_env(3)
    w0 = np.array([1e-10, 0.0, 0.0])
    res = dingo_run(env, DingoConfig(grad_tol=1e-8), w0)
    assert res.status == "converged" and len(res.states) == 1
    np.testing.assert_array_equal(res.w, w0)
    assert res.ledger.rounds == 2


# --- case vectors -----------------------------------------------------------


def test_case_vectors_identity_hessian():
    env, _ = identity_env(4)
    g = np.array([1.0, -2.0, 0.5, 3.0])
    cfg = DingoConfig(phi=0.5)
    Hg, v1, v2, _ = case_vectors_round(env, np.zeros(4), g, cfg)
    np.testing.assert_allclose(Hg, g, rtol=1e-14)
    np.testing.assert_allclose(v1, g, rtol=1e-12)
    np.testing.assert_allclose(v2, g / 1.25, rtol=1e-12)


def test_hg_matches_dense_hessian():
    env, data, obj = env_for("synthetic-softmax:n=90,p=5,C=4", 3, reg=1e-3)
    r = np.random.default_rng(2)
    w, g = r.standard_normal((2, obj.dim))
    Hg, _, _, _ = case_vectors_round(env, w, g, DingoConfig())
    H = softmax_dense_hessian(data.features, data.labels, 4, w, 1e-3)
    assert np.linalg.norm(Hg - H @ g) <= 1e-10 * np.linalg.norm(H @ g)


def test_exact_v1_is_average_pseudo_inverse():
    # shards of 6 rows in 12 dimensions: every local Hessian is singular
    env, data, obj = env_for("synthetic-least-squares:n=24,p=12", 4)
    g = np.random.default_rng(3).standard_normal(12)
    _, v1, _, _ = case_vectors_round(env, np.zeros(12), g, DingoConfig(exact=True))
    shards = partition(data.n, 4, 0)
    ref = np.mean([np.linalg.pinv(data.features[s].T @ data.features[s], rcond=1e-10) @ g
                   for s in shards], axis=0)
    assert np.linalg.norm(v1 - ref) <= 1e-6 * np.linalg.norm(ref)


# --- case selection ---------------------------------------------------------


def test_select_case_order():
    g = np.array([1.0, 0.0])
    Hg = np.array([2.0, 0.0])
    assert select_case(Hg, g / 2, g / 2, g, theta=1.0) == "case1"
    assert select_case(Hg, -g, g, g, theta=1.0) == "case2"
    assert select_case(Hg, -g, -g, g, theta=1.0) == "case3"
    with pytest.raises(AssumptionViolation):
        select_case(np.zeros(2), g, g, g, theta=1.0)


def test_strongly_convex_single_worker_is_case1():
    env, _, obj = env_for("synthetic-least-squares:n=50,p=8", 1)
    phi = 0.3
    res = dingo_run(env, DingoConfig(theta=1.0 / (1.0 + phi * phi), phi=phi, max_iters=3,
                                     grad_tol=1e-10), np.ones(8))
    assert all(s.case == "case1" for s in res.states[:-1])


def test_large_theta_forces_case3_on_every_worker():
    # Hessian eigenvalues <= 4e-8, so ||Hg|| / ||g|| < theta * phi = 1e-4
    r = np.random.default_rng(4)
    X = 1e-4 * r.standard_normal((40, 6)) / math.sqrt(40)
    data = Dataset(X, r.standard_normal(40), 0)
    obj = make_objective("least_squares", data)
    env = ClusterEnv(obj, partition(40, 4, 0, data))
    res = dingo_run(env, DingoConfig(theta=100.0, phi=1e-6, max_iters=3, grad_tol=0.0),
                    np.zeros(6))
    for s in res.states[:-1]:
        assert s.case == "case3" and s.istar == [0, 1, 2, 3]
        assert s.lemma3_ok is None


# --- case 3 -----------------------------------------------------------------


def test_lambda_formula():
    Hg = np.array([1.0, 1.0])
    v3 = np.array([1.0, 1.0])  # <v3, Hg> = 2
    assert case3_lambda(np.zeros(2), v3, Hg, 4.0, 1.0) == 2.0
    for eps in (1e-2, 1e-6, 1e-10):
        lam = case3_lambda(np.array([2.0 - eps, 0.0]), v3, Hg, 4.0, 0.5)
        assert 0.0 < lam <= eps
    with pytest.raises(InvariantViolation):
        case3_lambda(np.zeros(2), -v3, Hg, 4.0, 1.0)


def kkt_oracle(H, phi, g, Hg, theta):
    """argmin 1/2 ||H p + g||^2 + phi^2/2 ||p||^2 with <p, Hg> = -theta ||g||^2."""
    d = len(g)
    K = np.zeros((d + 1, d + 1))
    K[:d, :d] = H @ H + phi * phi * np.eye(d)
    K[:d, d] = Hg
    K[d, :d] = Hg
    rhs = np.append(-H @ g, -theta * (g @ g))
    return np.linalg.solve(K, rhs)[:d]


def test_case3_direction_matches_kkt_oracle():
    r = np.random.default_rng(5)
    d, phi = 10, 1e-1
    H = r.standard_normal((d, d))
    H = 0.5 * (H + H.T)
    g = r.standard_normal(d)
    Hg = (H + 0.3 * np.diag(r.standard_normal(d))) @ g
    v2 = np.linalg.solve(H @ H + phi * phi * np.eye(d), H @ g)
    theta = (v2 @ Hg) / (g @ g) + 1.0
    v3 = np.linalg.solve(H @ H + phi * phi * np.eye(d), Hg)
    p, lam = case3_direction(v2, v3, Hg, g @ g, theta)
    assert lam > 0
    ref = kkt_oracle(H, phi, g, Hg, theta)
    assert np.linalg.norm(p - ref) <= 1e-8 * np.linalg.norm(ref)
    assert abs(p @ Hg + theta * (g @ g)) <= 1e-10 * theta * (g @ g)


def test_case3_round_two_workers_one_in_istar():
    env, data, obj = env_for("synthetic-softmax:n=60,p=4,C=3", 2, seed=6)
    w = 0.3 * np.random.default_rng(6).standard_normal(obj.dim)
    cfg = DingoConfig(phi=1e-2, exact=True)
    g, _ = gradient_round(env, w)
    Hg, _, _, per = case_vectors_round(env, w, g, cfg)
    ratios = [r["v2"] @ Hg / (g @ g) for r in per]
    lo, hi = sorted(range(2), key=lambda i: ratios[i])
    cfg.theta = 0.5 * (ratios[0] + ratios[1])
    p, istar, lambdas, p_workers, _ = case3_round(env, Hg, g, per, cfg)
    assert istar == [lo] and lambdas[lo] > 0
    shard = partition(data.n, 2, 6, data)[lo]
    H = softmax_dense_hessian(*shard.arrays(), 3, w, obj.reg)
    ref_lo = kkt_oracle(H, cfg.phi, g, Hg, cfg.theta)
    assert np.linalg.norm(p_workers[lo] - ref_lo) <= 1e-6 * np.linalg.norm(ref_lo)
    np.testing.assert_allclose(p, 0.5 * (p_workers[lo] - per[hi]["v2"]), rtol=1e-14, atol=0)
    assert p @ Hg <= -cfg.theta * (g @ g)


def test_case3_round_rejects_empty_istar():
    env, _, obj = env_for("synthetic-softmax:n=60,p=4,C=3", 2)
    w = np.zeros(obj.dim)
    g, _ = gradient_round(env, w)
    cfg = DingoConfig(theta=1e-12)
    Hg, _, _, per = case_vectors_round(env, w, g, cfg)
    with pytest.raises(InvariantViolation):
        case3_round(env, Hg, g, per, cfg)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(-6, 2), st.floats(-8, 1))
def test_descent_certificate_on_random_instances(seed, log_theta, log_phi):
    spec = "synthetic-softmax:n=48,p=3,C=3" if seed % 2 else "synthetic-logistic:n=48,p=6"
    env, _, obj = env_for(spec, 3, seed=seed % 1000)
    cfg = DingoConfig(theta=10.0 ** log_theta, phi=10.0 ** log_phi, max_iters=1, grad_tol=0.0)
    w0 = np.random.default_rng(seed).standard_normal(obj.dim)
    s = dingo_run(env, cfg, w0).states[0]
    assert s.dir_hg <= -cfg.theta * s.grad_norm ** 2 * (1.0 + 1e-12)
    assert s.next_grad_norm ** 2 <= (1.0 - 2.0 * s.alpha * cfg.rho * cfg.theta) * s.grad_norm ** 2
    assert all(lam > 0 for lam in s.lambdas.values())


# --- line-search ------------------------------------------------------------


def test_line_search_full_step_on_identity_quadratic():
    env, _ = identity_env(3)
    w = np.array([1.0, -2.0, 3.0])
    cfg = DingoConfig(rho=1e-4, theta=1.0)
    # workers hold w from the case-vector broadcast of the same iteration
    env.broadcast("w", {"w": w})
    alpha, g_next, f_next = line_search(env, w, -w, -(w @ w), w, cfg)
    assert alpha == 1.0 and np.all(g_next == 0.0) and f_next == 0.0


def test_line_search_rejects_ascent_direction():
    env, _ = identity_env(3)
    w = np.array([1.0, -2.0, 3.0])
    env.broadcast("w", {"w": w})
    with pytest.raises(LineSearchError) as err:
        line_search(env, w, w, w @ w, w, DingoConfig())
    assert "dir_hg" in err.value.diagnostics


# --- full runs --------------------------------------------------------------


def test_newton_step_on_nonsingular_least_squares():
    env, _, _ = env_for("synthetic-least-squares:n=60,p=12", 1)
    res = dingo_run(env, DingoConfig(exact=True, grad_tol=1e-12, max_iters=5), np.zeros(12))
    assert res.states[0].alpha == 1.0 and res.status == "converged" and len(res.states) == 2


def test_identical_shards_take_case1():
    data, obj = build_problem("synthetic-logistic:n=60,p=6", seed=2, reg=0.1)
    env = ClusterEnv(obj, [Shard(np.arange(data.n), data)] * 5)
    res = dingo_run(env, DingoConfig(theta=0.9, max_iters=10, grad_tol=1e-12), np.ones(6))
    assert len(res.states) > 2
    assert all(s.case == "case1" for s in res.states[:-1])


def test_gradient_norm_strictly_decreases():
    env, _, obj = env_for("synthetic-softmax:n=200,p=5,C=4", 4, seed=3)
    res = dingo_run(env, DingoConfig(max_iters=15, grad_tol=0.0), np.zeros(obj.dim))
    norms = [s.grad_norm for s in res.states]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert all(s.lemma3_ok in (True, None) for s in res.states)


def test_round_counts_per_iteration():
    env, _, obj = env_for("synthetic-softmax:n=200,p=5,C=4", 4, seed=3)
    res = dingo_run(env, DingoConfig(max_iters=6), np.zeros(obj.dim))
    for s in res.states[:-1]:
        expected = (2 if s.iteration == 0 else 0) + 4 + (2 if s.case == "case3" else 0)
        assert s.iteration_rounds == expected
    labels = res.ledger.labels(1)
    assert "gradient:reused from line-search" in labels


def test_keep_vectors_records_iterates():
    env, _, obj = env_for("synthetic-logistic:n=80,p=4", 2)
    res = dingo_run(env, DingoConfig(max_iters=2, keep_vectors=True), np.zeros(4))
    s0, s1 = res.states[:2]
    np.testing.assert_allclose(s1.w, s0.w + s0.alpha * s0.p)
    assert s0.p @ s0.Hg == pytest.approx(s0.dir_hg, rel=1e-12)


# --- inexactness certificates -----------------------------------------------


def test_exact_solves_give_zero_certificates():
    env, _, obj = env_for("synthetic-least-squares:n=40,p=8", 2)
    res = dingo_run(env, DingoConfig(exact=True, max_iters=1, grad_tol=0.0), np.ones(8))
    for cert in res.states[0].certificates:
        assert cert["eps1"] <= 1e-12 and cert["eps2"] <= 1e-12 and not cert["flagged"]


def test_zero_vector_is_flagged():
    H = np.diag([1.0, 2.0, 3.0])
    b = np.ones(3)
    eps_zero = np.linalg.norm(H @ (H @ np.zeros(3)) - H @ b) / np.linalg.norm(H @ b)
    (cert,) = check_inexactness([{"eps1": eps_zero, "eps2": 0.0}])
    assert cert["eps1"] == 1.0 and cert["flagged"]


def test_capped_cg_certificate_strictly_inside_unit_interval():
    r = np.random.default_rng(7)
    Q, _ = np.linalg.qr(r.standard_normal((40, 40)))
    H = (Q * np.geomspace(1.0, 1e-2, 40)) @ Q.T
    H = 0.5 * (H + H.T)
    rep = cg_solve(NormalMap(DenseMap(H), 1e-2), r.standard_normal(40), cap=20)
    assert rep.flag == "cap_reached" and 0.0 < rep.relative_residual < 1.0
    (cert,) = check_inexactness([{"eps1": 0.0, "eps2": 0.0}], {0: {"eps3": rep.relative_residual}},
                                phi=1e-2, K_hat=1.0)
    assert not cert["flagged"] and cert["eps3_bound_ok"] in (True, False)


def test_config_validation():
    for bad in ({"theta": 0.0}, {"phi": -1.0}, {"rho": 1.0}, {"ls_ratio": 1.5}):
        with pytest.raises(ValueError):
            DingoConfig(**bad).validate()


def test_message_sizes_stay_within_three_vectors_except_line_search():
    env, _, obj = env_for("synthetic-softmax:n=400,p=10,C=4", 4, seed=2)
    cfg = DingoConfig(theta=1.0, max_iters=6)
    dingo_run(env, cfg, np.zeros(obj.dim))
    d = obj.dim
    entries = [e for e in env.ledger_report().entries if e.direction in ("broadcast", "reduce")]
    assert {e.label.split(":")[0] for e in entries} >= {"gradient", "case", "linesearch"}
    for e in entries:
        if e.label.startswith("linesearch:grad_i"):
            # one gradient and one value per trial step size
            assert e.message_bytes == cfg.ls_points * (d + 1) * 8
        else:
            assert e.message_bytes <= 3 * d * 8 + 64 * 8
