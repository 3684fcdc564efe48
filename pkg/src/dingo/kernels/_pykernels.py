"""Pure-Python (numpy) Krylov kernels.

This module is the reference fallback used when the compiled extension
``dingo.kernels._ckernels`` is unavailable. Both modules expose the same
functions with the same return conventions:

    solver(...) -> (x, iterations, flag, history)

``flag`` is one of ``TOLERANCE_MET``, ``CAP_REACHED`` or ``BREAKDOWN`` and
``history`` lists the per-iteration relative residual in the form each
caller checks (see the individual solvers).
"""
import math

import numpy as np

TOLERANCE_MET = 0
CAP_REACHED = 1
BREAKDOWN = 2

BACKEND = "python"

# Relative size below which an LQ diagonal entry is treated as a zero
# singular value of the tridiagonal (minimum-length truncation).
QLP_SINGULAR_RTOL = 1e-10
# Switch from MINRES to QLP updates once the estimated condition number
# of T_k exceeds this.
QLP_TRANSITION_COND = 1e7
# Relative size of the next Lanczos coupling below which the Krylov space
# is treated as invariant.
LANCZOS_EXHAUSTED_RTOL = 1e-12


def dot(a, b):
    return float(np.dot(a, b))


def sym_ortho(a, b):
    """Stable Givens rotation: returns (c, s, r) with [c s; s -c][a; b] = [r; 0]."""
    if b == 0.0:
        if a == 0.0:
            return 1.0, 0.0, 0.0
        return math.copysign(1.0, a), 0.0, abs(a)
    if a == 0.0:
        return 0.0, math.copysign(1.0, b), abs(b)
    if abs(b) > abs(a):
        tau = a / b
        s = math.copysign(1.0, b) / math.sqrt(1.0 + tau * tau)
        c = s * tau
        r = b / s
    else:
        tau = b / a
        c = math.copysign(1.0, a) / math.sqrt(1.0 + tau * tau)
        s = c * tau
        r = a / c
    return c, s, r


def cg(matvec, b, cap, tol, reorth=True):
    """Conjugate gradients from x0 = 0 on an SPD operator.

    ``history[j]`` is ||b - A x_j|| / ||b|| for iterate j+1. The returned
    iterate is the one with the smallest such residual among x_1, x_2, ...
    (never the starting point), so <x, b> > 0 holds for it as for every
    CG iterate started at zero. With
    ``reorth`` each new residual is orthogonalised against the previous
    ones, which CG residuals are in exact arithmetic.
    """
    n = b.shape[0]
    x = np.zeros(n)
    bnorm = math.sqrt(dot(b, b))
    if bnorm == 0.0:
        return x, 0, TOLERANCE_MET, []
    basis = np.empty((n, cap + 1)) if reorth else None
    if reorth:
        basis[:, 0] = b / bnorm
    r = b.copy()
    p = r.copy()
    rr = bnorm * bnorm
    best_x = x
    best_res = math.inf
    res = 1.0
    history = []
    flag = CAP_REACHED
    iters = 0
    while iters < cap:
        Ap = matvec(p)
        pAp = dot(p, Ap)
        if not pAp > 0.0:
            flag = BREAKDOWN
            break
        iters += 1
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        if reorth:
            q = basis[:, :iters]
            r = r - q @ (q.T @ r)
        rr_new = dot(r, r)
        res = math.sqrt(rr_new) / bnorm
        history.append(res)
        if res < best_res:
            best_x, best_res = x, res
        if res <= tol:
            flag = TOLERANCE_MET
            break
        if reorth and iters < cap:
            basis[:, iters] = r / math.sqrt(rr_new)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return best_x, iters, flag, history


def _lq_coordinate(num, diag, small):
    if abs(diag) <= small:
        return 0.0
    return num / diag


def minres_qlp(matvec, b, cap, tol, reorth=True):
    """MINRES-QLP from x0 = 0 for symmetric, possibly singular, operators.

    Returns an approximation of the minimum-length least-squares solution
    A^+ b. The stopping quantity and ``history`` entries are the relative
    normal-equation residual ||A^2 x - A b|| / ||A b|| = ||A r|| / ||A b||,
    which the recurrence yields with a lag of one iteration. ``history``
    holds the raw estimates, which need not decrease; the iterate returned
    on reaching the cap is the one with the smallest estimate.

    With ``reorth`` the Lanczos vectors are kept and each new one is
    orthogonalised against all of them, which makes the exhaustion of the
    Krylov space detectable on singular systems.
    """
    n = b.shape[0]
    x = np.zeros(n)
    beta1 = math.sqrt(dot(b, b))
    if beta1 == 0.0:
        return x, 0, TOLERANCE_MET, []

    basis = np.empty((n, cap + 1)) if reorth else None
    if reorth:
        basis[:, 0] = b / beta1

    r1 = np.zeros(n)
    r2 = b.copy()
    r3 = b.copy()
    w = np.zeros(n)
    wl = np.zeros(n)
    wl2 = np.zeros(n)
    xl2 = np.zeros(n)

    beta = 0.0
    betan = beta1
    phi = beta1
    tau = taul = 0.0
    cs, sn = -1.0, 0.0
    cr1, sr1 = -1.0, 0.0
    cr2, sr2 = -1.0, 0.0
    dltan = eplnn = 0.0
    gama = gamal = gamal2 = 0.0
    eta = etal = 0.0
    vepln = veplnl = 0.0
    ul3 = ul2 = ul = u = 0.0
    Anorm = 0.0
    Acond = 1.0
    gmin = gminl = 0.0
    gamal_qlp = vepln_qlp = gama_qlp = ul_qlp = u_qlp = 0.0
    Abnorm = 0.0
    qlp_iter = 0
    iters = 0
    best_x = x
    best_rel = 1.0
    history = []
    flag = CAP_REACHED

    while iters < cap:
        iters += 1
        betal = beta
        beta = betan
        v = r3 * (1.0 / beta)
        r3 = matvec(v)
        if iters > 1:
            r3 = r3 - (beta / betal) * r1
        alfa = dot(r3, v)
        r3 = r3 - (alfa / beta) * r2
        if reorth:
            vk = basis[:, :iters]
            r3 = r3 - beta * (vk @ (vk.T @ (r3 * (1.0 / beta))))
        r1 = r2
        r2 = r3
        betan = math.sqrt(dot(r3, r3))
        if reorth and iters < cap:
            basis[:, iters] = r3 / betan if betan > 0.0 else 0.0
        if iters == 1:
            Abnorm = beta1 * math.hypot(alfa, betan)
            if Abnorm == 0.0:
                # b lies in the null space: A^+ b = 0
                return x, 0, BREAKDOWN, []
        pnorm = math.sqrt(betal * betal + alfa * alfa + betan * betan)
        exhausted = betan <= LANCZOS_EXHAUSTED_RTOL * max(Anorm, pnorm)

        # previous left rotation Q_{k-1}
        dbar = dltan
        dlta = cs * dbar + sn * alfa
        epln = eplnn
        gbar = sn * dbar - cs * alfa
        eplnn = sn * betan
        dltan = -cs * betan
        dlta_qlp = dlta
        # current left rotation Q_k
        gamal3 = gamal2
        gamal2 = gamal
        gamal = gama
        cs, sn, gama = sym_ortho(gbar, betan)
        gama_tmp = gama
        taul2 = taul
        taul = tau
        tau = cs * phi
        phil = phi
        phi = sn * phi
        # previous right rotation P_{k-2,k}
        if iters > 2:
            veplnl2 = veplnl
            etal2 = etal
            etal = eta
            dlta_tmp = sr2 * vepln - cr2 * dlta
            veplnl = cr2 * vepln + sr2 * dlta
            dlta = dlta_tmp
            eta = sr2 * gama
            gama = -cr2 * gama
        # current right rotation P_{k-1,k}
        if iters > 1:
            cr1, sr1, gamal = sym_ortho(gamal, dlta)
            vepln = sr1 * gama
            gama = -cr1 * gama

        # solution coordinates in the W basis
        # a diagonal of L_k at roundoff level is a zero singular value of
        # T_k; dropping its coordinate gives the minimum-length solution
        small = QLP_SINGULAR_RTOL * max(Anorm, pnorm)
        ul4 = ul3
        ul3 = ul2
        if iters > 2:
            ul2 = _lq_coordinate(taul2 - etal2 * ul4 - veplnl2 * ul3, gamal2, small)
        if iters > 1:
            ul = _lq_coordinate(taul - etal * ul3 - veplnl * ul2, gamal, small)
        singular = abs(gama) <= small
        u = _lq_coordinate(tau - eta * ul2 - vepln * ul, gama, small)

        x_prev = x
        if Acond < QLP_TRANSITION_COND and not singular and qlp_iter == 0:
            # MINRES update
            wl2 = wl
            wl = w
            w = (v - epln * wl2 - dlta_qlp * wl) * (1.0 / gama_tmp)
            x = x + tau * w
        else:
            # MINRES-QLP update
            qlp_iter += 1
            if qlp_iter == 1:
                xl2 = np.zeros(n)
                if iters > 1:
                    # rebuild w_{k-3}, w_{k-2}, w_{k-1} from the MINRES ones
                    if iters > 3:
                        wl2 = gamal3 * wl2 + veplnl2 * wl + etal * w
                    if iters > 2:
                        wl = gamal_qlp * wl + vepln_qlp * w
                    w = gama_qlp * w
                    xl2 = x - wl * ul_qlp - w * u_qlp
            if iters == 1:
                wl2 = wl
                wl = v * sr1
                w = -v * cr1
            elif iters == 2:
                wl2 = wl
                wl = w * cr1 + v * sr1
                w = w * sr1 - v * cr1
            else:
                wl2 = wl
                wl = w
                w = wl2 * sr2 - v * cr2
                wl2 = wl2 * cr2 + v * sr2
                vt = wl * cr1 + w * sr1
                w = wl * sr1 - w * cr1
                wl = vt
            xl2 = xl2 + wl2 * ul2
            x = xl2 + wl * ul + w * u

        # next right rotation P_{k-1,k+1}
        gamal_tmp = gamal
        cr2, sr2, gamal = sym_ortho(gamal, eplnn)
        gamal_qlp = gamal_tmp
        vepln_qlp = vepln
        gama_qlp = gama
        ul_qlp = ul
        u_qlp = u

        abs_gama = abs(gama)
        Anorm = max(Anorm, pnorm, abs(gamal), abs_gama)
        if iters == 1:
            gmin = abs_gama
            gminl = gmin
        else:
            gminl2 = gminl
            gminl = gmin
            gmin = min(gminl2, abs(gamal), abs_gama)
        Acond = Anorm / gmin if gmin > 0.0 else math.inf

        if exhausted:
            # invariant Krylov space: x is the minimum-length LS solution in it
            history.append(0.0)
            flag = TOLERANCE_MET
            break
        # ||A r_{k-1}|| from the previous residual norm and current rotation
        if iters > 1:
            rel_prev = abs(phil) * math.hypot(gbar, dltan) / Abnorm
            history.append(rel_prev)
            if rel_prev < best_rel:
                best_x, best_rel = x_prev, rel_prev
            if rel_prev <= tol:
                if not singular:
                    x = x_prev
                    iters -= 1
                flag = TOLERANCE_MET
                break
    if flag == CAP_REACHED:
        x = best_x
    return x, iters, flag, history


def lsmr(matvec, rmatvec, b, damp, cap, tol, reorth=True):
    """LSMR from x0 = 0 for min ||A x - b||^2 + damp^2 ||x||^2.

    ``history`` holds ||A~^T r~_k|| / ||A^T b||, the normal-equation
    residual of the damped (stacked) problem, which LSMR decreases
    monotonically. With ``reorth`` both Golub-Kahan bases are kept
    orthonormal, so the bidiagonalisation terminates once the Krylov
    space is exhausted.
    """
    m = b.shape[0]
    beta = math.sqrt(dot(b, b))
    if beta == 0.0:
        x = np.zeros_like(rmatvec(b))
        return x, 0, TOLERANCE_MET, []
    u = b * (1.0 / beta)
    v = rmatvec(u)
    n = v.shape[0]
    x = np.zeros(n)
    alpha = math.sqrt(dot(v, v))
    if alpha == 0.0:
        return x, 0, TOLERANCE_MET, []
    v = v * (1.0 / alpha)
    if reorth:
        ubasis = np.empty((m, cap + 1))
        vbasis = np.empty((n, cap + 1))
        ubasis[:, 0] = u
        vbasis[:, 0] = v
    anorm = alpha

    normar0 = alpha * beta
    zetabar = alpha * beta
    alphabar = alpha
    rho = 1.0
    rhobar = 1.0
    cbar = 1.0
    sbar = 0.0
    h = v.copy()
    hbar = np.zeros(n)

    history = []
    flag = CAP_REACHED
    iters = 0
    while iters < cap:
        iters += 1
        u = matvec(v) - alpha * u
        if reorth:
            q = ubasis[:, :iters]
            u = u - q @ (q.T @ u)
        beta = math.sqrt(dot(u, u))
        if beta <= LANCZOS_EXHAUSTED_RTOL * anorm:
            beta = 0.0
        if beta > 0.0:
            u = u * (1.0 / beta)
            v = rmatvec(u) - beta * v
            if reorth:
                q = vbasis[:, :iters]
                v = v - q @ (q.T @ v)
                if iters < cap:
                    ubasis[:, iters] = u
            alpha = math.sqrt(dot(v, v))
            anorm = max(anorm, math.hypot(alpha, beta))
            if alpha <= LANCZOS_EXHAUSTED_RTOL * anorm:
                alpha = 0.0
            if alpha > 0.0:
                v = v * (1.0 / alpha)
                if reorth and iters < cap:
                    vbasis[:, iters] = v

        chat, shat, alphahat = sym_ortho(alphabar, damp)
        rhoold = rho
        c, s, rho = sym_ortho(alphahat, beta)
        thetanew = s * alpha
        alphabar = c * alpha

        rhobarold = rhobar
        thetabar = sbar * rho
        rhotemp = cbar * rho
        cbar, sbar, rhobar = sym_ortho(rhotemp, thetanew)
        zeta = cbar * zetabar
        zetabar = -sbar * zetabar

        hbar = h - (thetabar * rho / (rhoold * rhobarold)) * hbar
        x = x + (zeta / (rho * rhobar)) * hbar
        h = v - (thetanew / rho) * h

        rel = abs(zetabar) / normar0
        history.append(rel)
        if rel <= tol:
            flag = TOLERANCE_MET
            break
        if alpha == 0.0 or beta == 0.0:
            # bidiagonalisation terminated: x is exact
            flag = TOLERANCE_MET
            break
    return x, iters, flag, history
