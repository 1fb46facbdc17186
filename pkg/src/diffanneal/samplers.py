"""Prediction-distribution samplers: Langevin, MAP, and randomize-then-optimize.

Each annealing iteration has to draw (or approximate a draw) from the
likelihood-tilted Gaussian ``pi_like(y | m) N(m; m_aprx, C_aprx)``.  That
target is wrapped by :class:`PredictionTarget`, and three samplers operate
on it:

* :func:`ula_sample` -- unadjusted Langevin (Euler-Maruyama) steps;
* :func:`mala_precond_sample` -- preconditioned Langevin with an exact
  Metropolis-Hastings correction;
* :func:`closed_form_map` / :func:`lbfgs_map` -- deterministic maximization;
* :func:`rto_sample` -- perturb the measurement and the Gaussian mean by
  their own noise models, then maximize, which in the linear-Gaussian case
  samples the target exactly.

All randomness is consumed from a caller-owned generator in a documented
order, so every sampler is a deterministic function of (inputs, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .gmm import GaussianDist
from .problems import KIND_LINEAR, KIND_PHASE, KIND_XRAY, Problem
from scipy.special import gammaln

__all__ = [
    "PredictionTarget",
    "SamplerConfig",
    "DivergedSampleError",
    "LbfgsResult",
    "log_prediction_density",
    "grad_log_prediction_density",
    "ula_sample",
    "mala_precond_sample",
    "mala_precond_chain",
    "closed_form_map",
    "lbfgs_map",
    "rto_sample",
    "average_gauss_newton_preconditioner",
]

_KIND_CODES = {KIND_LINEAR: kern.KIND_LINEAR, KIND_PHASE: kern.KIND_PHASE,
               KIND_XRAY: kern.KIND_XRAY}

_EMPTY_OP = np.zeros((0, 1))
_EMPTY_VEC = np.zeros(0)


class DivergedSampleError(RuntimeError):
    """A sampler state left the finite region; carries the iteration index."""

    def __init__(self, iteration, anneal_index=None):
        self.iteration = int(iteration)
        self.anneal_index = anneal_index
        where = f"iteration {iteration}"
        if anneal_index is not None:
            where += f" (anneal step {anneal_index})"
        super().__init__(f"sample diverged at {where}")


@dataclass(frozen=True)
class SamplerConfig:
    """Hyperparameters of the prediction-stage sampler.

    ``kind`` is one of ``lang``, ``map``, ``rto``.  Langevin settings are
    the step size, the subiteration count, whether a Metropolis correction
    is applied, and an optional SPD preconditioner (identity when omitted
    and a correction is requested).  The optimizer settings apply to the
    map/rto kinds on nonlinear problems.
    """

    kind: str = "rto"
    lang_step: float = 5e-5
    lang_iters: int = 100
    metropolis: bool = False
    precond: np.ndarray | None = None
    lbfgs_iters: int = 40
    lbfgs_memory: int = 10

    def __post_init__(self):
        if self.kind not in ("lang", "map", "rto"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.lang_step <= 0 or self.lang_iters < 0:
            raise ValueError("lang_step must be > 0 and lang_iters >= 0")
        if self.lbfgs_iters < 1 or self.lbfgs_memory < 1:
            raise ValueError("lbfgs iterations and memory must be positive")


class PredictionTarget:
    """Likelihood times Gaussian: the per-iteration sampling target.

    ``problem`` may be None, in which case the target is the bare Gaussian
    ``denoise`` (useful for calibration tests).  The Gaussian factor is
    stored in eigenform when its covariance is not an exact multiple of the
    identity.
    """

    def __init__(self, problem: Problem | None, y, denoise: GaussianDist):
        self.problem = problem
        self.denoise = denoise
        self.y = _EMPTY_VEC if y is None else np.ascontiguousarray(y, dtype=float)
        if problem is not None:
            if self.y.shape != (problem.dim_meas,):
                raise ValueError("measurement shape does not match the problem")
            if denoise.dim != problem.dim_param:
                raise ValueError("denoise dimension does not match the problem")
        self._pack()

    def _pack(self):
        d = self.denoise.dim
        cov = self.denoise.cov
        diag = np.diagonal(cov)
        off = cov - np.diag(diag)
        self.iso = bool(np.count_nonzero(off) == 0 and np.ptp(diag) == 0.0)
        self.gmean = np.ascontiguousarray(self.denoise.mean)
        if self.iso:
            v = float(diag[0])
            if v <= 0:
                raise ValueError("denoise covariance must be positive")
            self.gscal = 1.0 / v
            self.glogdet = d * math.log(v)
            self.gvec = np.zeros((1, 1))
            self.ginve = np.zeros(1)
            self.gsqrt = None
        else:
            vals, vecs = np.linalg.eigh(cov)
            if vals[0] <= 0:
                raise ValueError("denoise covariance must be positive definite")
            self.gscal = 0.0
            self.glogdet = float(np.sum(np.log(vals)))
            self.gvec = np.ascontiguousarray(vecs)
            self.ginve = np.ascontiguousarray(1.0 / vals)
            self.gsqrt = np.ascontiguousarray(vecs * np.sqrt(vals))
        if self.problem is None:
            self.kind_code = kern.KIND_NONE
            self.op = _EMPTY_OP
            self.p0 = 0.0
            self.lik_const = 0.0
        else:
            p = self.problem
            self.kind_code = _KIND_CODES[p.kind]
            self.op = np.ascontiguousarray(p.operator)
            if p.kind == KIND_XRAY:
                self.p0 = p.intensity
                counts = np.all(np.abs(self.y - np.round(self.y)) < 1e-9) and np.all(self.y >= 0)
                self.lik_const = float(-np.sum(gammaln(self.y + 1.0))) if counts else 0.0
            else:
                self.p0 = 1.0 / p.noise_std ** 2
                self.lik_const = 0.0

    @property
    def dim(self) -> int:
        return self.denoise.dim

    def _args(self):
        return (self.kind_code, self.op, self.y, self.p0, self.lik_const,
                self.gmean, self.iso, self.gscal, self.gvec, self.ginve,
                self.glogdet)

    def gauss_sqrt_mult(self, xi):
        """C_aprx^{1/2} xi (any matrix square root works for sampling)."""
        if self.iso:
            return xi / math.sqrt(self.gscal)
        return self.gsqrt @ xi


def log_prediction_density(target: PredictionTarget, m) -> float:
    """log pi_like(y | m) + log N(m; m_aprx, C_aprx)."""
    m = np.ascontiguousarray(m, dtype=float)
    if m.shape != (target.dim,):
        raise ValueError("point has wrong dimension")
    grad = np.empty_like(m)
    return float(kern.pred_logp_grad(*target._args(), m, grad))


def grad_log_prediction_density(target: PredictionTarget, m) -> np.ndarray:
    """Gradient of :func:`log_prediction_density` in m."""
    m = np.ascontiguousarray(m, dtype=float)
    if m.shape != (target.dim,):
        raise ValueError("point has wrong dimension")
    grad = np.empty_like(m)
    kern.pred_logp_grad(*target._args(), m, grad)
    return grad


# ----------------------------------------------------------------------
# Langevin samplers


def ula_sample(target: PredictionTarget, init, step, iters, rng) -> np.ndarray:
    """Unadjusted Langevin: m += step * grad + sqrt(2 step) * xi, iterated.

    Draws ``iters`` standard-normal rows from ``rng`` up front.  Raises
    :class:`DivergedSampleError` if the state becomes non-finite or its norm
    exceeds 1e8; with ``iters = 0`` the initial point is returned unchanged.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    init = np.ascontiguousarray(init, dtype=float)
    if iters == 0:
        return init.copy()
    noise = rng.standard_normal((iters, target.dim))
    m, bad = kern.ula(*target._args(), init, step, noise)
    if bad >= 0:
        raise DivergedSampleError(bad)
    return m


def _chol_spd(mat, what):
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{what} must be symmetric positive definite") from exc


_NO_CHAIN = np.empty((0, 1))
_NO_CENTER = np.zeros(1)


def mala_precond_sample(target: PredictionTarget, init, step, iters, precond,
                        rng, return_stats=False):
    """Metropolis-adjusted Langevin with preconditioner M (SPD).

    Proposals are m' = m + step M^{-1} grad + sqrt(2 step) M^{-1/2} xi with
    the exact asymmetric Metropolis-Hastings correction; non-finite
    proposals are rejected automatically.  Per iteration one normal row and
    one uniform are consumed from ``rng``.  Returns the final state, or
    (state, acceptance_rate) when ``return_stats`` is set.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    init = np.ascontiguousarray(init, dtype=float)
    lo = _chol_spd(np.asarray(precond, dtype=float), "preconditioner")
    noise = rng.standard_normal((iters, target.dim))
    unif = rng.random(iters)
    m, accepted, _ = kern.mala(*target._args(), init, step, lo, noise, unif,
                               0, 0.0, 0, _NO_CENTER, _NO_CHAIN)
    if return_stats:
        return m, accepted / max(iters, 1)
    return m


def mala_precond_chain(target: PredictionTarget, init, step, iters, precond, rng):
    """Like :func:`mala_precond_sample` but returns the full trajectory.

    Returns (chain, acceptance_rate) with chain of shape (iters, D).
    """
    init = np.ascontiguousarray(init, dtype=float)
    lo = _chol_spd(np.asarray(precond, dtype=float), "preconditioner")
    noise = rng.standard_normal((iters, target.dim))
    unif = rng.random(iters)
    chain = np.empty((iters, target.dim))
    _, accepted, _ = kern.mala(*target._args(), init, step, lo, noise, unif,
                               0, 0.0, 0, _NO_CENTER, chain)
    return chain, accepted / max(iters, 1)


# ----------------------------------------------------------------------
# MAP solvers


def closed_form_map(target: PredictionTarget) -> np.ndarray:
    """Exact maximizer of the prediction density for linear-Gaussian targets.

    With the row-selection operator and an isotropic Gaussian this is a
    coordinatewise precision blend on observed coordinates and a
    pass-through on null-space coordinates; a full covariance falls back to
    one dense symmetric solve.
    """
    p = target.problem
    if p is None or p.kind != KIND_LINEAR:
        raise ValueError("closed-form MAP needs a linear-Gaussian problem")
    inv_tau2 = 1.0 / p.noise_std ** 2
    if target.iso:
        cols = np.ascontiguousarray(np.argmax(p.operator, axis=1))
        return kern.map_linear_iso(cols, target.y, inv_tau2, target.gmean,
                                   target.gscal)
    return kern.map_linear_full(target.op, target.y, inv_tau2, target.gmean,
                                target.gvec, target.ginve)


@dataclass
class LbfgsResult:
    """Best iterate plus convergence telemetry from :func:`lbfgs_map`."""

    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    degraded: bool = False


def lbfgs_map(target: PredictionTarget, init, iters=40, memory=10,
              gtol=1e-8, c1=1e-4, c2=0.9) -> LbfgsResult:
    """L-BFGS ascent on the prediction log density.

    Two-loop recursion with a strong-Wolfe line search; the returned iterate
    is the best one visited, so the objective never falls below its value at
    ``init``.  A line-search failure terminates early and sets ``degraded``.
    """
    init = np.ascontiguousarray(init, dtype=float)
    f0 = log_prediction_density(target, init)
    if not math.isfinite(f0):
        raise ValueError("objective is not finite at the initial point")
    x, value, gnorm, n_it, status = kern.lbfgs(
        *target._args(), init, iters, memory, gtol, c1, c2)
    return LbfgsResult(x, value, gnorm, n_it,
                       degraded=status == kern.LBFGS_LINE_SEARCH_FAILED)


# ----------------------------------------------------------------------
# randomize-then-optimize


def _perturb_measurement(problem: Problem, y, xi):
    if problem.kind == KIND_XRAY:
        # variance-matched Gaussian surrogate of the Poisson noise
        return y + np.sqrt(np.maximum(y, 1.0)) * xi
    return y + problem.noise_std * xi


def rto_sample(target: PredictionTarget, init, rng, map_solver=None,
               lbfgs_iters=40, lbfgs_memory=10) -> np.ndarray:
    """Randomize-then-optimize draw from the prediction distribution.

    Draws the Gaussian-mean perturbation first (D normals) and the
    measurement perturbation second (K normals), then maximizes the
    perturbed density.  Linear-Gaussian targets use the closed-form MAP;
    nonlinear ones run L-BFGS from the perturbed mean (or ``init`` if
    given).  ``map_solver`` overrides the solver with a callable
    ``(perturbed_target, init) -> x``.
    """
    p = target.problem
    if p is None:
        raise ValueError("randomize-then-optimize needs a likelihood to perturb")
    xi_m = rng.standard_normal(target.dim)
    xi_y = rng.standard_normal(p.dim_meas)
    mean_p = target.gmean + target.gauss_sqrt_mult(xi_m)
    y_p = _perturb_measurement(p, target.y, xi_y)
    perturbed = PredictionTarget(p, y_p, GaussianDist(mean_p, target.denoise.cov))
    if map_solver is not None:
        return map_solver(perturbed, mean_p if init is None else init)
    if p.kind == KIND_LINEAR:
        return closed_form_map(perturbed)
    start = mean_p if init is None else np.asarray(init, dtype=float)
    return lbfgs_map(perturbed, start, lbfgs_iters, lbfgs_memory).x


# ----------------------------------------------------------------------
# preconditioning


def average_gauss_newton_preconditioner(problem: Problem, prior, n_points=32):
    """Average Gauss-Newton curvature over prior-shaped representative points.

    The point set is deterministic: the component means first, then pairs
    mean +- sqrt(lambda_j) v_j over principal axes in decreasing eigenvalue
    order, cycling through the components, truncated at ``n_points``.  The
    likelihood curvature alone can be rank-deficient (fewer measurements
    than parameters), so callers typically add the Gaussian-factor precision
    before factorizing.
    """
    points = [prior.means[c] for c in range(prior.n_components)]
    axes = []
    for c in range(prior.n_components):
        vals, vecs = np.linalg.eigh(prior.covs[c])
        order = np.argsort(vals)[::-1]
        axes.append([(math.sqrt(vals[j]) * vecs[:, j]) for j in order])
    rank = 0
    while len(points) < n_points:
        for c in range(prior.n_components):
            if rank < len(axes[c]):
                points.append(prior.means[c] + axes[c][rank])
                points.append(prior.means[c] - axes[c][rank])
        rank += 1
        if rank > prior.dim:
            break
    points = points[:n_points]
    acc = np.zeros((problem.dim_param, problem.dim_param))
    for pt in points:
        acc += problem.gauss_newton_hessian(pt)
    acc /= len(points)
    return 0.5 * (acc + acc.T)
