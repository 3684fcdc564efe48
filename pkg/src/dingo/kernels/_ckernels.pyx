# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Krylov kernels.

Line-for-line mirror of ``dingo.kernels._pykernels``: the scalar
recurrences run on C doubles and the vector updates are explicit loops,
so per-iteration interpreter overhead is limited to the operator callback.
"""
from libc.math cimport sqrt, fabs, hypot, copysign, INFINITY

import numpy as np

TOLERANCE_MET = 0
CAP_REACHED = 1
BREAKDOWN = 2

BACKEND = "cython"

QLP_SINGULAR_RTOL = 1e-10
QLP_TRANSITION_COND = 1e7
LANCZOS_EXHAUSTED_RTOL = 1e-12


cdef inline double _dot(double[::1] a, double[::1] b) noexcept nogil:
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


cdef inline void _copy(double[::1] src, double[::1] dst) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(src.shape[0]):
        dst[i] = src[i]


cdef inline void _scale(double a, double[::1] x) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        x[i] = a * x[i]


cdef inline void _axpy(double a, double[::1] x, double[::1] y) noexcept nogil:
    # y += a x
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        y[i] += a * x[i]


cdef inline void _lincomb(double a, double[::1] x, double b, double[::1] y,
                          double[::1] out) noexcept nogil:
    # out = a x + b y (out may alias x or y)
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = a * x[i] + b * y[i]


cdef inline tuple _sym_ortho(double a, double b):
    cdef double tau, c, s, r
    if b == 0.0:
        if a == 0.0:
            return 1.0, 0.0, 0.0
        return copysign(1.0, a), 0.0, fabs(a)
    if a == 0.0:
        return 0.0, copysign(1.0, b), fabs(b)
    if fabs(b) > fabs(a):
        tau = a / b
        s = copysign(1.0, b) / sqrt(1.0 + tau * tau)
        c = s * tau
        r = b / s
    else:
        tau = b / a
        c = copysign(1.0, a) / sqrt(1.0 + tau * tau)
        s = c * tau
        r = a / c
    return c, s, r


def sym_ortho(double a, double b):
    """Stable Givens rotation: returns (c, s, r) with [c s; s -c][a; b] = [r; 0]."""
    return _sym_ortho(a, b)


def dot(a, b):
    return float(np.dot(a, b))


cdef inline double _lq_coordinate(double num, double diag, double small) noexcept nogil:
    if fabs(diag) <= small:
        return 0.0
    return num / diag


cdef inline double[::1] _apply(op, double[::1] v):
    # copy so an operator that returns (a view of) its input cannot alias
    # the solver's work vectors
    return np.array(op(np.asarray(v)), dtype=np.float64, copy=True).ravel()


def cg(matvec, b_in, Py_ssize_t cap, double tol, bint reorth=True):
    """Conjugate gradients from x0 = 0 on an SPD operator (see _pykernels.cg)."""
    cdef double[::1] b = np.array(b_in, dtype=np.float64, copy=True).ravel()
    cdef Py_ssize_t n = b.shape[0]
    x_arr = np.zeros(n)
    cdef double[::1] x = x_arr
    cdef double bnorm = sqrt(_dot(b, b))
    if bnorm == 0.0:
        return x_arr, 0, TOLERANCE_MET, []
    basis = np.empty((n, cap + 1)) if reorth else None
    if reorth:
        basis[:, 0] = np.asarray(b) / bnorm
    r_arr = np.array(b, copy=True)
    cdef double[::1] r = r_arr
    cdef double[::1] p = np.array(b, copy=True)
    best_arr = np.zeros(n)
    cdef double[::1] best_x = best_arr
    cdef double[::1] Ap
    cdef double rr = bnorm * bnorm
    cdef double best_res = INFINITY
    cdef double pAp, alpha, rr_new, res = 1.0
    cdef Py_ssize_t iters = 0
    history = []
    flag = CAP_REACHED
    while iters < cap:
        Ap = _apply(matvec, p)
        pAp = _dot(p, Ap)
        if not pAp > 0.0:
            flag = BREAKDOWN
            break
        iters += 1
        alpha = rr / pAp
        _axpy(alpha, p, x)
        _axpy(-alpha, Ap, r)
        if reorth:
            q = basis[:, :iters]
            r_arr -= q @ (q.T @ r_arr)
        rr_new = _dot(r, r)
        res = sqrt(rr_new) / bnorm
        history.append(res)
        if res < best_res:
            _copy(x, best_x)
            best_res = res
        if res <= tol:
            flag = TOLERANCE_MET
            break
        if reorth and iters < cap:
            basis[:, iters] = r_arr / sqrt(rr_new)
        _lincomb(1.0, r, rr_new / rr, p, p)
        rr = rr_new
    return best_arr, iters, flag, history


def minres_qlp(matvec, b_in, Py_ssize_t cap, double tol, bint reorth=True):
    """MINRES-QLP from x0 = 0 (see _pykernels.minres_qlp)."""
    cdef double[::1] b = np.array(b_in, dtype=np.float64, copy=True).ravel()
    cdef Py_ssize_t n = b.shape[0]
    cdef Py_ssize_t i
    x_arr = np.zeros(n)
    cdef double[::1] x = x_arr
    cdef double beta1 = sqrt(_dot(b, b))
    if beta1 == 0.0:
        return x_arr, 0, TOLERANCE_MET, []

    basis = np.empty((n, cap + 1)) if reorth else None
    if reorth:
        basis[:, 0] = np.asarray(b) / beta1

    cdef double[::1] r1 = np.zeros(n)
    cdef double[::1] r2 = np.array(b, copy=True)
    cdef double[::1] r3 = np.array(b, copy=True)
    cdef double[::1] v = np.zeros(n)
    cdef double[::1] w = np.zeros(n)
    cdef double[::1] wl = np.zeros(n)
    cdef double[::1] wl2 = np.zeros(n)
    cdef double[::1] xl2 = np.zeros(n)
    cdef double[::1] x_prev = np.zeros(n)
    cdef double[::1] best_x = np.zeros(n)
    cdef double[::1] tmp = np.zeros(n)
    cdef double[::1] tmp2 = np.zeros(n)
    cdef double[::1] swap

    cdef double beta = 0.0, betal = 0.0, betan = beta1
    cdef double phi = beta1, phil = 0.0
    cdef double tau = 0.0, taul = 0.0, taul2 = 0.0
    cdef double cs = -1.0, sn = 0.0
    cdef double cr1 = -1.0, sr1 = 0.0
    cdef double cr2 = -1.0, sr2 = 0.0
    cdef double dltan = 0.0, eplnn = 0.0, dbar, dlta, epln, gbar, dlta_qlp, dlta_tmp
    cdef double gama = 0.0, gamal = 0.0, gamal2 = 0.0, gamal3 = 0.0, gama_tmp, gamal_tmp
    cdef double eta = 0.0, etal = 0.0, etal2 = 0.0
    cdef double vepln = 0.0, veplnl = 0.0, veplnl2 = 0.0
    cdef double ul4 = 0.0, ul3 = 0.0, ul2 = 0.0, ul = 0.0, u = 0.0
    cdef double Anorm = 0.0, Acond = 1.0, pnorm, small
    cdef double gmin = 0.0, gminl = 0.0, gminl2, abs_gama
    cdef double gamal_qlp = 0.0, vepln_qlp = 0.0, gama_qlp = 0.0, ul_qlp = 0.0, u_qlp = 0.0
    cdef double Abnorm = 0.0, alfa, rel_prev, best_rel = 1.0
    cdef Py_ssize_t qlp_iter = 0, iters = 0
    cdef bint exhausted, singular
    history = []
    flag = CAP_REACHED

    while iters < cap:
        iters += 1
        betal = beta
        beta = betan
        for i in range(n):
            v[i] = r3[i] / beta
        r3 = _apply(matvec, v)
        if iters > 1:
            _axpy(-(beta / betal), r1, r3)
        alfa = _dot(r3, v)
        _axpy(-(alfa / beta), r2, r3)
        if reorth:
            vk = basis[:, :iters]
            r3_arr = np.asarray(r3)
            r3_arr -= vk @ (vk.T @ r3_arr)
        r1 = r2
        r2 = r3
        betan = sqrt(_dot(r3, r3))
        if reorth and iters < cap:
            if betan > 0.0:
                basis[:, iters] = np.asarray(r3) / betan
            else:
                basis[:, iters] = 0.0
        if iters == 1:
            Abnorm = beta1 * hypot(alfa, betan)
            if Abnorm == 0.0:
                return x_arr, 0, BREAKDOWN, []
        pnorm = sqrt(betal * betal + alfa * alfa + betan * betan)
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
        cs, sn, gama = _sym_ortho(gbar, betan)
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
            cr1, sr1, gamal = _sym_ortho(gamal, dlta)
            vepln = sr1 * gama
            gama = -cr1 * gama

        small = QLP_SINGULAR_RTOL * max(Anorm, pnorm)
        ul4 = ul3
        ul3 = ul2
        if iters > 2:
            ul2 = _lq_coordinate(taul2 - etal2 * ul4 - veplnl2 * ul3, gamal2, small)
        if iters > 1:
            ul = _lq_coordinate(taul - etal * ul3 - veplnl * ul2, gamal, small)
        singular = fabs(gama) <= small
        u = _lq_coordinate(tau - eta * ul2 - vepln * ul, gama, small)

        _copy(x, x_prev)
        if Acond < QLP_TRANSITION_COND and not singular and qlp_iter == 0:
            # MINRES update; rotate buffers wl2 <- wl <- w
            swap = wl2
            wl2 = wl
            wl = w
            w = swap
            for i in range(n):
                w[i] = (v[i] - epln * wl2[i] - dlta_qlp * wl[i]) / gama_tmp
            _axpy(tau, w, x)
        else:
            qlp_iter += 1
            if qlp_iter == 1:
                for i in range(n):
                    xl2[i] = 0.0
                if iters > 1:
                    if iters > 3:
                        for i in range(n):
                            wl2[i] = gamal3 * wl2[i] + veplnl2 * wl[i] + etal * w[i]
                    if iters > 2:
                        _lincomb(gamal_qlp, wl, vepln_qlp, w, wl)
                    _scale(gama_qlp, w)
                    for i in range(n):
                        xl2[i] = x[i] - wl[i] * ul_qlp - w[i] * u_qlp
            if iters == 1:
                _copy(wl, wl2)
                for i in range(n):
                    wl[i] = v[i] * sr1
                    w[i] = -v[i] * cr1
            elif iters == 2:
                _copy(wl, wl2)
                for i in range(n):
                    tmp[i] = w[i]
                    wl[i] = tmp[i] * cr1 + v[i] * sr1
                    w[i] = tmp[i] * sr1 - v[i] * cr1
            else:
                # wl2 <- wl, wl <- w, then the two right rotations
                for i in range(n):
                    tmp[i] = wl[i]          # new wl2 before rotation
                    tmp2[i] = w[i]          # new wl before rotation
                for i in range(n):
                    w[i] = tmp[i] * sr2 - v[i] * cr2
                    wl2[i] = tmp[i] * cr2 + v[i] * sr2
                for i in range(n):
                    tmp[i] = tmp2[i] * cr1 + w[i] * sr1
                    w[i] = tmp2[i] * sr1 - w[i] * cr1
                    wl[i] = tmp[i]
            for i in range(n):
                xl2[i] = xl2[i] + wl2[i] * ul2
                x[i] = xl2[i] + wl[i] * ul + w[i] * u

        # next right rotation P_{k-1,k+1}
        gamal_tmp = gamal
        cr2, sr2, gamal = _sym_ortho(gamal, eplnn)
        gamal_qlp = gamal_tmp
        vepln_qlp = vepln
        gama_qlp = gama
        ul_qlp = ul
        u_qlp = u

        abs_gama = fabs(gama)
        Anorm = max(Anorm, pnorm, fabs(gamal), abs_gama)
        if iters == 1:
            gmin = abs_gama
            gminl = gmin
        else:
            gminl2 = gminl
            gminl = gmin
            gmin = min(gminl2, fabs(gamal), abs_gama)
        Acond = Anorm / gmin if gmin > 0.0 else INFINITY

        if exhausted:
            history.append(0.0)
            flag = TOLERANCE_MET
            break
        if iters > 1:
            rel_prev = fabs(phil) * hypot(gbar, dltan) / Abnorm
            history.append(rel_prev)
            if rel_prev < best_rel:
                _copy(x_prev, best_x)
                best_rel = rel_prev
            if rel_prev <= tol:
                if not singular:
                    _copy(x_prev, x)
                    iters -= 1
                flag = TOLERANCE_MET
                break
    if flag == CAP_REACHED:
        return np.asarray(best_x), iters, flag, history
    return x_arr, iters, flag, history


def lsmr(matvec, rmatvec, b_in, double damp, Py_ssize_t cap, double tol, bint reorth=True):
    """LSMR from x0 = 0 for min ||A x - b||^2 + damp^2 ||x||^2 (see _pykernels.lsmr)."""
    cdef double[::1] b = np.array(b_in, dtype=np.float64, copy=True).ravel()
    cdef Py_ssize_t m = b.shape[0]
    cdef Py_ssize_t i, n
    cdef double beta = sqrt(_dot(b, b))
    if beta == 0.0:
        return np.zeros_like(np.asarray(rmatvec(np.asarray(b)), dtype=np.float64)), 0, TOLERANCE_MET, []
    cdef double[::1] u = np.array(b, copy=True)
    _scale(1.0 / beta, u)
    cdef double[::1] v = _apply(rmatvec, u)
    n = v.shape[0]
    x_arr = np.zeros(n)
    cdef double[::1] x = x_arr
    cdef double alpha = sqrt(_dot(v, v))
    if alpha == 0.0:
        return x_arr, 0, TOLERANCE_MET, []
    _scale(1.0 / alpha, v)
    if reorth:
        ubasis = np.empty((m, cap + 1))
        vbasis = np.empty((n, cap + 1))
        ubasis[:, 0] = np.asarray(u)
        vbasis[:, 0] = np.asarray(v)
    cdef double anorm = alpha

    cdef double normar0 = alpha * beta
    cdef double zetabar = alpha * beta
    cdef double alphabar = alpha
    cdef double rho = 1.0, rhobar = 1.0, cbar = 1.0, sbar = 0.0
    cdef double chat, shat, alphahat, rhoold, c, s, thetanew, rhobarold
    cdef double thetabar, rhotemp, zeta, rel, hcoef, xcoef
    cdef double[::1] h = np.array(v, copy=True)
    cdef double[::1] hbar = np.zeros(n)
    cdef Py_ssize_t iters = 0
    history = []
    flag = CAP_REACHED
    while iters < cap:
        iters += 1
        u_new = _apply(matvec, v)
        _axpy(-alpha, u, u_new)
        u = u_new
        if reorth:
            q = ubasis[:, :iters]
            u_arr = np.asarray(u)
            u_arr -= q @ (q.T @ u_arr)
        beta = sqrt(_dot(u, u))
        if beta <= LANCZOS_EXHAUSTED_RTOL * anorm:
            beta = 0.0
        if beta > 0.0:
            _scale(1.0 / beta, u)
            v_new = _apply(rmatvec, u)
            _axpy(-beta, v, v_new)
            v = v_new
            if reorth:
                q = vbasis[:, :iters]
                v_arr = np.asarray(v)
                v_arr -= q @ (q.T @ v_arr)
                if iters < cap:
                    ubasis[:, iters] = np.asarray(u)
            alpha = sqrt(_dot(v, v))
            anorm = max(anorm, hypot(alpha, beta))
            if alpha <= LANCZOS_EXHAUSTED_RTOL * anorm:
                alpha = 0.0
            if alpha > 0.0:
                _scale(1.0 / alpha, v)
                if reorth and iters < cap:
                    vbasis[:, iters] = np.asarray(v)

        chat, shat, alphahat = _sym_ortho(alphabar, damp)
        rhoold = rho
        c, s, rho = _sym_ortho(alphahat, beta)
        thetanew = s * alpha
        alphabar = c * alpha

        rhobarold = rhobar
        thetabar = sbar * rho
        rhotemp = cbar * rho
        cbar, sbar, rhobar = _sym_ortho(rhotemp, thetanew)
        zeta = cbar * zetabar
        zetabar = -sbar * zetabar

        hcoef = thetabar * rho / (rhoold * rhobarold)
        xcoef = zeta / (rho * rhobar)
        for i in range(n):
            hbar[i] = h[i] - hcoef * hbar[i]
            x[i] += xcoef * hbar[i]
            h[i] = v[i] - (thetanew / rho) * h[i]

        rel = fabs(zetabar) / normar0
        history.append(rel)
        if rel <= tol:
            flag = TOLERANCE_MET
            break
        if alpha == 0.0 or beta == 0.0:
            flag = TOLERANCE_MET
            break
    return x_arr, iters, flag, history
