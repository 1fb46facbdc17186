"""Jitted inner loops shared by the samplers, the annealing engine, and the
reference MCMC.

Everything here operates on plain arrays; objects are unpacked by the public
wrappers.  Conventions:

* likelihood kinds are integer codes: 0 linear-Gaussian, 1 phase retrieval,
  2 Poisson x-ray, -1 no likelihood (pure Gaussian target).  ``p0`` carries
  1/tau^2 for the Gaussian kinds and I0 for x-ray; ``lik_const`` is an
  additive constant (the -sum log y! term for x-ray, 0 otherwise).
* the Gaussian factor of a target is either isotropic (``iso=True`` with
  precision ``gscal`` and log-determinant ``glogdet``) or full covariance in
  eigenform (columns of ``gvec`` and inverse eigenvalues ``ginve``).
* random numbers are always pre-drawn by the caller and passed in, so the
  kernels are pure functions and draw order is owned by one place.
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)

KIND_NONE = -1
KIND_LINEAR = 0
KIND_PHASE = 1
KIND_XRAY = 2

# L-BFGS termination codes.
LBFGS_CONVERGED = 0
LBFGS_MAX_ITER = 1
LBFGS_LINE_SEARCH_FAILED = 2


# ----------------------------------------------------------------------
# target evaluation


@njit(cache=True, fastmath=False)
def loglik_grad(kind, op, y, p0, lik_const, m, grad):
    """Log likelihood at ``m``; gradient written into ``grad``."""
    d = m.shape[0]
    for j in range(d):
        grad[j] = 0.0
    if kind == KIND_NONE:
        return 0.0
    k = op.shape[0]
    ll = 0.0
    if kind == KIND_LINEAR:
        for i in range(k):
            r = y[i]
            for j in range(d):
                r -= op[i, j] * m[j]
            ll -= 0.5 * p0 * r * r
            rp = p0 * r
            for j in range(d):
                grad[j] += op[i, j] * rp
    elif kind == KIND_PHASE:
        for i in range(k):
            u = 0.0
            for j in range(d):
                u += op[i, j] * m[j]
            r = y[i] - u * u
            ll -= 0.5 * p0 * r * r
            c = 2.0 * p0 * u * r
            for j in range(d):
                grad[j] += op[i, j] * c
    else:
        log_i0 = math.log(p0)
        for i in range(k):
            u = 0.0
            for j in range(d):
                u += op[i, j] * m[j]
            f = p0 * math.exp(-u)
            ll += y[i] * (log_i0 - u) - f
            c = f - y[i]
            for j in range(d):
                grad[j] += op[i, j] * c
        ll += lik_const
    return ll


@njit(cache=True, fastmath=False)
def gauss_part(m, gmean, iso, gscal, gvec, ginve, glogdet, grad):
    """Gaussian log density at ``m``; gradient added into ``grad``."""
    d = m.shape[0]
    quad = 0.0
    if iso:
        for j in range(d):
            diff = m[j] - gmean[j]
            quad += diff * diff
            grad[j] -= gscal * diff
        quad *= gscal
    else:
        w = np.empty(d)
        for a in range(d):
            acc = 0.0
            for j in range(d):
                acc += gvec[j, a] * (m[j] - gmean[j])
            w[a] = acc
            quad += acc * acc * ginve[a]
        for j in range(d):
            acc = 0.0
            for a in range(d):
                acc += gvec[j, a] * ginve[a] * w[a]
            grad[j] -= acc
    return -0.5 * (quad + glogdet + d * LOG_2PI)


@njit(cache=True, fastmath=False)
def pred_logp_grad(kind, op, y, p0, lik_const,
                   gmean, iso, gscal, gvec, ginve, glogdet, m, grad):
    """Log density of the prediction target (likelihood x Gaussian)."""
    ll = loglik_grad(kind, op, y, p0, lik_const, m, grad)
    ll += gauss_part(m, gmean, iso, gscal, gvec, ginve, glogdet, grad)
    return ll


# ----------------------------------------------------------------------
# Langevin samplers


@njit(cache=True, fastmath=False)
def ula(kind, op, y, p0, lik_const,
        gmean, iso, gscal, gvec, ginve, glogdet,
        init, step, noise):
    """Unadjusted Langevin; returns (state, diverged_iteration or -1).

    ``noise`` holds one standard-normal row per iteration.  Divergence is a
    non-finite state or squared norm above 1e16.
    """
    d = init.shape[0]
    m = init.copy()
    grad = np.empty(d)
    sq = math.sqrt(2.0 * step)
    for i in range(noise.shape[0]):
        pred_logp_grad(kind, op, y, p0, lik_const,
                       gmean, iso, gscal, gvec, ginve, glogdet, m, grad)
        nrm2 = 0.0
        for j in range(d):
            m[j] += step * grad[j] + sq * noise[i, j]
            nrm2 += m[j] * m[j]
        if not (nrm2 < 1e16):
            return m, i
    return m, -1


@njit(cache=True, fastmath=False)
def _chol_solve_inplace(lo, b, out):
    """out = (lo lo^T)^{-1} b via two triangular substitutions."""
    d = b.shape[0]
    for i in range(d):
        acc = b[i]
        for j in range(i):
            acc -= lo[i, j] * out[j]
        out[i] = acc / lo[i, i]
    for i in range(d - 1, -1, -1):
        acc = out[i]
        for j in range(i + 1, d):
            acc -= lo[j, i] * out[j]
        out[i] = acc / lo[i, i]


@njit(cache=True, fastmath=False)
def _upper_solve(lo, b, out):
    """out = lo^{-T} b (so that out has covariance (lo lo^T)^{-1})."""
    d = b.shape[0]
    for i in range(d - 1, -1, -1):
        acc = b[i]
        for j in range(i + 1, d):
            acc -= lo[j, i] * out[j]
        out[i] = acc / lo[i, i]


@njit(cache=True, fastmath=False)
def _m_quad(lo, v):
    """v^T (lo lo^T) v = || lo^T v ||^2."""
    d = v.shape[0]
    quad = 0.0
    for i in range(d):
        acc = 0.0
        for j in range(i, d):
            acc += lo[j, i] * v[j]
        quad += acc * acc
    return quad


@njit(cache=True, fastmath=False)
def mala(kind, op, y, p0, lik_const,
         gmean, iso, gscal, gvec, ginve, glogdet,
         init, step0, prec_chol, noise, unif,
         adapt_until, target_accept, flip_every, flip_center, chain):
    """Preconditioned Metropolis-adjusted Langevin.

    Proposal: m' = m + step M^{-1} grad + sqrt(2 step) M^{-1/2} xi with
    M = prec_chol prec_chol^T, corrected by the exact asymmetric
    Metropolis-Hastings ratio; non-finite proposals are auto-rejected.

    Optional extras used by the reference sampler: multiplicative step
    adaptation toward ``target_accept`` during the first ``adapt_until``
    iterations, and a deterministic reflection move m -> 2 c - m every
    ``flip_every`` iterations (0 disables) that exchanges the symmetric
    likelihood modes.  If ``chain`` has as many rows as ``noise`` the whole
    trajectory is recorded.

    Returns (state, acceptance_count, final_step).
    """
    d = init.shape[0]
    n = noise.shape[0]
    record = chain.shape[0] == n
    m = init.copy()
    grad = np.empty(d)
    gradp = np.empty(d)
    drift = np.empty(d)
    driftp = np.empty(d)
    xi = np.empty(d)
    mp = np.empty(d)
    diff = np.empty(d)
    step = step0
    ll = pred_logp_grad(kind, op, y, p0, lik_const,
                        gmean, iso, gscal, gvec, ginve, glogdet, m, grad)
    _chol_solve_inplace(prec_chol, grad, drift)
    accepted = 0
    for i in range(n):
        if flip_every > 0 and (i + 1) % flip_every == 0:
            for j in range(d):
                mp[j] = 2.0 * flip_center[j] - m[j]
            llp = pred_logp_grad(kind, op, y, p0, lik_const,
                                 gmean, iso, gscal, gvec, ginve, glogdet,
                                 mp, gradp)
            if math.log(unif[i]) < llp - ll:
                for j in range(d):
                    m[j] = mp[j]
                    grad[j] = gradp[j]
                ll = llp
                _chol_solve_inplace(prec_chol, grad, drift)
                accepted += 1
            if record:
                for j in range(d):
                    chain[i, j] = m[j]
            continue
        sq = math.sqrt(2.0 * step)
        for j in range(d):
            xi[j] = noise[i, j]
        _upper_solve(prec_chol, xi, mp)  # mp <- M^{-1/2} xi
        for j in range(d):
            mp[j] = m[j] + step * drift[j] + sq * mp[j]
        llp = pred_logp_grad(kind, op, y, p0, lik_const,
                             gmean, iso, gscal, gvec, ginve, glogdet,
                             mp, gradp)
        alpha = -1e300
        if math.isfinite(llp):
            _chol_solve_inplace(prec_chol, gradp, driftp)
            # forward: mp - (m + step * drift); backward: m - (mp + step * driftp)
            for j in range(d):
                diff[j] = m[j] - mp[j] - step * driftp[j]
            qb = _m_quad(prec_chol, diff)
            for j in range(d):
                diff[j] = mp[j] - m[j] - step * drift[j]
            qf = _m_quad(prec_chol, diff)
            alpha = llp - ll + (qf - qb) / (4.0 * step)
        if math.log(unif[i]) < alpha:
            for j in range(d):
                m[j] = mp[j]
                grad[j] = gradp[j]
                drift[j] = driftp[j]
            ll = llp
            accepted += 1
        if i < adapt_until:
            acc_prob = math.exp(min(0.0, alpha))
            step *= math.exp(0.015 * (acc_prob - target_accept))
        if record:
            for j in range(d):
                chain[i, j] = m[j]
    return m, accepted, step


# ----------------------------------------------------------------------
# MAP solvers


@njit(cache=True, fastmath=False)
def map_linear_iso(cols, y, inv_tau2, gmean, gscal):
    """Closed-form MAP for row-selection operator + isotropic Gaussian.

    Observed coordinate j = cols[k] blends the data and the Gaussian mean by
    their precisions; unobserved coordinates pass the mean through.
    """
    x = gmean.copy()
    for k in range(cols.shape[0]):
        j = cols[k]
        x[j] = (inv_tau2 * y[k] + gscal * gmean[j]) / (inv_tau2 + gscal)
    return x


@njit(cache=True, fastmath=False)
def map_linear_full(op, y, inv_tau2, gmean, gvec, ginve):
    """Dense closed-form MAP for a linear model + full-covariance Gaussian."""
    k, d = op.shape
    h = np.empty((d, d))
    for a in range(d):
        for b in range(d):
            acc = 0.0
            for i in range(k):
                acc += op[i, a] * op[i, b]
            h[a, b] = inv_tau2 * acc
    rhs = np.empty(d)
    for a in range(d):
        acc = 0.0
        for i in range(k):
            acc += op[i, a] * y[i]
        rhs[a] = inv_tau2 * acc
    # add Gaussian precision V diag(ginve) V^T and its action on the mean
    for a in range(d):
        for b in range(d):
            acc = 0.0
            for e in range(d):
                acc += gvec[a, e] * ginve[e] * gvec[b, e]
            h[a, b] += acc
    w = np.empty(d)
    for e in range(d):
        acc = 0.0
        for j in range(d):
            acc += gvec[j, e] * gmean[j]
        w[e] = ginve[e] * acc
    for a in range(d):
        acc = 0.0
        for e in range(d):
            acc += gvec[a, e] * w[e]
        rhs[a] += acc
    return np.linalg.solve(h, rhs)


@njit(cache=True, fastmath=False)
def _dot(a, b):
    acc = 0.0
    for j in range(a.shape[0]):
        acc += a[j] * b[j]
    return acc


@njit(cache=True, fastmath=False)
def lbfgs(kind, op, y, p0, lik_const,
          gmean, iso, gscal, gvec, ginve, glogdet,
          init, max_iter, memory, gtol, c1, c2):
    """Limited-memory BFGS ascent on the prediction log density.

    Two-loop recursion with a strong-Wolfe line search (bracket + zoom with
    bisection).  Internally minimizes f = -logp.  Returns
    (best_x, best_f, grad_norm, iterations, status) where status is one of
    the LBFGS_* codes; on line-search failure the best iterate seen so far
    is returned.
    """
    d = init.shape[0]
    x = init.copy()
    g = np.empty(d)
    f = -pred_logp_grad(kind, op, y, p0, lik_const,
                        gmean, iso, gscal, gvec, ginve, glogdet, x, g)
    for j in range(d):
        g[j] = -g[j]
    best_x = x.copy()
    best_f = f
    s_mem = np.empty((memory, d))
    y_mem = np.empty((memory, d))
    rho_mem = np.empty(memory)
    alpha_buf = np.empty(memory)
    n_pairs = 0
    head = 0
    status = LBFGS_MAX_ITER
    it = 0
    gnorm = math.sqrt(_dot(g, g))
    if gnorm <= gtol:
        return best_x, -best_f, gnorm, 0, LBFGS_CONVERGED
    direction = np.empty(d)
    xt = np.empty(d)
    gt = np.empty(d)
    for it in range(1, max_iter + 1):
        # two-loop recursion for direction = -H g
        for j in range(d):
            direction[j] = g[j]
        for c in range(n_pairs):
            idx = (head - 1 - c) % memory
            a = rho_mem[idx] * _dot(s_mem[idx], direction)
            alpha_buf[idx] = a
            for j in range(d):
                direction[j] -= a * y_mem[idx, j]
        if n_pairs > 0:
            idx = (head - 1) % memory
            gamma = _dot(s_mem[idx], y_mem[idx]) / _dot(y_mem[idx], y_mem[idx])
            for j in range(d):
                direction[j] *= gamma
        for c in range(n_pairs - 1, -1, -1):
            idx = (head - 1 - c) % memory
            b = rho_mem[idx] * _dot(y_mem[idx], direction)
            a = alpha_buf[idx]
            for j in range(d):
                direction[j] += (a - b) * s_mem[idx, j]
        for j in range(d):
            direction[j] = -direction[j]
        dphi0 = _dot(g, direction)
        if dphi0 >= 0.0:
            # not a descent direction; restart from steepest descent
            n_pairs = 0
            for j in range(d):
                direction[j] = -g[j]
            dphi0 = -_dot(g, g)
        # strong Wolfe line search (bracketing phase)
        a_prev = 0.0
        f_prev = f
        dphi_prev = dphi0
        a_cur = 1.0
        a_max = 1e10
        ok = False
        a_lo = 0.0
        a_hi = 0.0
        f_lo = f
        dphi_lo = dphi0
        zoom = False
        for ls in range(30):
            for j in range(d):
                xt[j] = x[j] + a_cur * direction[j]
            ft = -pred_logp_grad(kind, op, y, p0, lik_const,
                                 gmean, iso, gscal, gvec, ginve, glogdet,
                                 xt, gt)
            for j in range(d):
                gt[j] = -gt[j]
            dphit = _dot(gt, direction)
            if (not math.isfinite(ft)) or ft > f + c1 * a_cur * dphi0 or (ls > 0 and ft >= f_prev):
                a_lo = a_prev
                f_lo = f_prev
                dphi_lo = dphi_prev
                a_hi = a_cur
                zoom = True
                break
            if abs(dphit) <= -c2 * dphi0:
                ok = True
                break
            if dphit >= 0.0:
                a_lo = a_cur
                f_lo = ft
                dphi_lo = dphit
                a_hi = a_prev
                zoom = True
                break
            a_prev = a_cur
            f_prev = ft
            dphi_prev = dphit
            a_cur = min(2.0 * a_cur, a_max)
        if zoom:
            for zi in range(40):
                a_cur = 0.5 * (a_lo + a_hi)
                for j in range(d):
                    xt[j] = x[j] + a_cur * direction[j]
                ft = -pred_logp_grad(kind, op, y, p0, lik_const,
                                     gmean, iso, gscal, gvec, ginve, glogdet,
                                     xt, gt)
                for j in range(d):
                    gt[j] = -gt[j]
                dphit = _dot(gt, direction)
                if (not math.isfinite(ft)) or ft > f + c1 * a_cur * dphi0 or ft >= f_lo:
                    a_hi = a_cur
                else:
                    if abs(dphit) <= -c2 * dphi0:
                        ok = True
                        break
                    if dphit * (a_hi - a_lo) >= 0.0:
                        a_hi = a_lo
                    a_lo = a_cur
                    f_lo = ft
                    dphi_lo = dphit
                if abs(a_hi - a_lo) < 1e-16 * (1.0 + abs(a_lo)):
                    break
        if not ok:
            status = LBFGS_LINE_SEARCH_FAILED
            break
        # accept the step
        idx = head % memory
        for j in range(d):
            s_mem[idx, j] = xt[j] - x[j]
            y_mem[idx, j] = gt[j] - g[j]
        sy = _dot(s_mem[idx], y_mem[idx])
        if sy > 1e-14:
            rho_mem[idx] = 1.0 / sy
            head += 1
            if n_pairs < memory:
                n_pairs += 1
        for j in range(d):
            x[j] = xt[j]
            g[j] = gt[j]
        f = ft
        if f < best_f:
            best_f = f
            for j in range(d):
                best_x[j] = x[j]
        gnorm = math.sqrt(_dot(g, g))
        if gnorm <= gtol:
            status = LBFGS_CONVERGED
            break
    return best_x, -best_f, gnorm, it, status


# ----------------------------------------------------------------------
# mixture score tables (one entry = one frozen sigma level)


@njit(cache=True, fastmath=False)
def mixture_score(m, log_w, means, chols, logdets, score):
    """Score of a Gaussian mixture at ``m`` from cached Cholesky factors.

    ``chols[c]`` is the lower factor of component c's covariance at the
    frozen noise level and ``logdets[c]`` its log determinant.  Writes the
    score in place and returns the mixture log density (up to the shared
    -D/2 log 2 pi constant, which responsibilities do not need).
    """
    ncomp = log_w.shape[0]
    d = m.shape[0]
    lq = np.empty(ncomp)
    us = np.empty((ncomp, d))
    z = np.empty(d)
    mx = -1e300
    for c in range(ncomp):
        # z = L^{-1} (m - mu); u = L^{-T} z
        for i in range(d):
            acc = m[i] - means[c, i]
            for j in range(i):
                acc -= chols[c, i, j] * z[j]
            z[i] = acc / chols[c, i, i]
        quad = 0.0
        for i in range(d):
            quad += z[i] * z[i]
        for i in range(d - 1, -1, -1):
            acc = z[i]
            for j in range(i + 1, d):
                acc -= chols[c, j, i] * us[c, j]
            us[c, i] = acc / chols[c, i, i]
        lq[c] = log_w[c] - 0.5 * (quad + logdets[c])
        if lq[c] > mx:
            mx = lq[c]
    tot = 0.0
    for c in range(ncomp):
        lq[c] = math.exp(lq[c] - mx)
        tot += lq[c]
    for j in range(d):
        score[j] = 0.0
    for c in range(ncomp):
        r = lq[c] / tot
        for j in range(d):
            score[j] -= r * us[c, j]
    return mx + math.log(tot)


@njit(cache=True, fastmath=False)
def mixture_score_jacobian(m, log_w, means, chols, logdets, precs, score, jac):
    """Score and its Jacobian (mixture Hessian) at one frozen sigma level."""
    ncomp = log_w.shape[0]
    d = m.shape[0]
    lq = np.empty(ncomp)
    us = np.empty((ncomp, d))
    z = np.empty(d)
    mx = -1e300
    for c in range(ncomp):
        for i in range(d):
            acc = m[i] - means[c, i]
            for j in range(i):
                acc -= chols[c, i, j] * z[j]
            z[i] = acc / chols[c, i, i]
        quad = 0.0
        for i in range(d):
            quad += z[i] * z[i]
        for i in range(d - 1, -1, -1):
            acc = z[i]
            for j in range(i + 1, d):
                acc -= chols[c, j, i] * us[c, j]
            us[c, i] = acc / chols[c, i, i]
        lq[c] = log_w[c] - 0.5 * (quad + logdets[c])
        if lq[c] > mx:
            mx = lq[c]
    tot = 0.0
    for c in range(ncomp):
        lq[c] = math.exp(lq[c] - mx)
        tot += lq[c]
    for j in range(d):
        score[j] = 0.0
    for a in range(d):
        for b in range(d):
            jac[a, b] = 0.0
    for c in range(ncomp):
        r = lq[c] / tot
        for j in range(d):
            score[j] -= r * us[c, j]
        for a in range(d):
            for b in range(d):
                jac[a, b] += r * (us[c, a] * us[c, b] - precs[c, a, b])
    for a in range(d):
        for b in range(d):
            jac[a, b] -= score[a] * score[b]
    # exact symmetrization against accumulated round-off
    for a in range(d):
        for b in range(a):
            s = 0.5 * (jac[a, b] + jac[b, a])
            jac[a, b] = s
            jac[b, a] = s


@njit(cache=True, fastmath=False)
def ode_mean_tab(m_t, factors, log_w, means, chols, logdets):
    """Explicit Euler probability-flow mean from per-substep tables.

    ``factors[k]`` is sigma_dot(t_k) sigma(t_k) dt for substep k and
    ``chols[k] / logdets[k]`` the mixture factorization at sigma(t_k).
    """
    d = m_t.shape[0]
    m = m_t.copy()
    score = np.empty(d)
    for k in range(factors.shape[0]):
        mixture_score(m, log_w, means, chols[k], logdets[k], score)
        for j in range(d):
            m[j] += factors[k] * score[j]
    return m
