"""The decoupled noise-annealing loop.

One run starts from pure noise at the top of the schedule and alternates a
prediction stage (sample or maximize the likelihood-tilted denoising
Gaussian) with a corruption stage (re-noise the prediction to the next,
lower level).  The run returns the prediction of the final iteration, since
the last corruption has zero variance.

Randomness is consumed from a per-run generator in a fixed order: the
initialization draw first, then per annealing step the sampler draws
(Langevin noise rows and Metropolis uniforms, or the two
randomize-then-optimize perturbations) followed by one corruption row.
Batches derive one generator per sample index from the master seed, so
results are bitwise independent of how the batch is chunked over workers.

For analytic mixture priors the per-step mixture factorizations are frozen
into tables once per batch (the schedule is shared by every sample), and
the numerical work runs through the jitted kernels.  Any other score
provider falls back to a plain-numpy path with the same structure and draw
order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from . import _kernels as kern
from .annealing import (DenoiseApprox, MixtureScoreProvider, NoiseSchedule,
                        ScoreProvider, TC_EIGENVALUE_FLOOR,
                        VariantUnsupportedError, build_denoise_approx)
from .gmm import GaussianDist
from .problems import KIND_LINEAR, KIND_PHASE, KIND_XRAY, Problem
from .samplers import (DivergedSampleError, PredictionTarget, SamplerConfig,
                       average_gauss_newton_preconditioner, closed_form_map,
                       lbfgs_map, mala_precond_sample, rto_sample, ula_sample)
from scipy.special import gammaln

__all__ = [
    "VariantConfig",
    "SampleBatch",
    "VARIANT_LABELS",
    "variant_label",
    "sample_posterior",
    "sample_posterior_batch",
]

_SAMPLER_NAMES = {"lang": "Lang", "map": "MAP", "rto": "RTO"}
_DENOISE_NAMES = {"ode": "ODE", "tu": "TU", "tc": "TC"}

VARIANT_LABELS = tuple(
    f"{s}-{d}" for s in ("Lang", "MAP", "RTO") for d in ("ODE", "TU", "TC")
)

_DIVERGENCE_NORM2 = 1e16  # squared; states beyond 1e8 in norm are diverged


def variant_label(sampler_kind: str, denoise_variant: str) -> str:
    return f"{_SAMPLER_NAMES[sampler_kind]}-{_DENOISE_NAMES[denoise_variant]}"


@dataclass(frozen=True)
class VariantConfig:
    """One cell of the sampler-by-denoiser grid plus all hyperparameters."""

    denoise: DenoiseApprox
    sampler: SamplerConfig
    schedule: NoiseSchedule
    label: str = ""

    def __post_init__(self):
        expected = variant_label(self.sampler.kind, self.denoise.variant)
        if self.label == "":
            object.__setattr__(self, "label", expected)
        elif self.label != expected:
            raise ValueError(
                f"label {self.label!r} does not match configuration {expected!r}")


@dataclass
class SampleBatch:
    """An (n, D) sample matrix with its provenance."""

    samples: np.ndarray
    method: str
    seed: int = 0
    trial: int = 0
    discarded: int = 0
    runtime_seconds: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def _sample_rng(master_seed, index, retry):
    if master_seed < 0:
        raise ValueError("master seed must be nonnegative")
    return np.random.default_rng(np.random.SeedSequence((master_seed, index, retry)))


# ----------------------------------------------------------------------
# frozen per-schedule mixture tables


class _RunContext:
    """Everything a single run needs, precomputed once per batch."""

    def __init__(self, cfg: VariantConfig, problem: Problem | None, y,
                 sp: ScoreProvider):
        self.cfg = cfg
        self.problem = problem
        self.sp = sp
        self.dim = sp.prior.dim if isinstance(sp, MixtureScoreProvider) else None
        sched = cfg.schedule
        self.ts = np.asarray(sched.timesteps)
        self.sigmas = np.array([sched.sigma(t) for t in self.ts])
        self.n_steps = sched.num_steps
        if cfg.denoise.variant == "tc" and not sp.has_jacobian:
            raise VariantUnsupportedError(
                "tc denoising needs a Jacobian-capable score provider")
        self.fast = isinstance(sp, MixtureScoreProvider)
        self.y = None if y is None else np.ascontiguousarray(y, dtype=float)
        if self.fast:
            self.dim = sp.prior.dim
            self._build_tables()
            self._pack_problem()
            self._pack_precond()

    # -- fast-path packing -------------------------------------------------

    def _build_tables(self):
        prior = self.sp.prior
        sched = self.cfg.schedule
        ncomp, d = prior.n_components, prior.dim
        self.log_w = np.ascontiguousarray(prior.log_weights)
        self.means = np.ascontiguousarray(prior.means)
        eye = np.eye(d)
        n_lv = self.n_steps  # annealing visits ts[0 .. n_steps-1]
        self.main_chols = np.empty((n_lv, ncomp, d, d))
        self.main_logdets = np.empty((n_lv, ncomp))
        need_jac = self.cfg.denoise.variant == "tc"
        self.precs = np.empty((n_lv, ncomp, d, d)) if need_jac else None
        for k in range(n_lv):
            s2 = self.sigmas[k] ** 2
            for c in range(ncomp):
                cov = prior.covs[c] + s2 * eye
                lo = np.linalg.cholesky(cov)
                self.main_chols[k, c] = lo
                self.main_logdets[k, c] = 2.0 * np.sum(np.log(np.diag(lo)))
                if need_jac:
                    self.precs[k, c] = np.linalg.inv(cov)
        if self.cfg.denoise.variant == "ode":
            s_sub = self.cfg.denoise.ode_steps
            self.ode_chols = np.empty((n_lv, s_sub, ncomp, d, d))
            self.ode_logdets = np.empty((n_lv, s_sub, ncomp))
            self.ode_factors = np.empty((n_lv, s_sub))
            for k in range(n_lv):
                t = self.ts[k]
                dt = t / s_sub
                for j in range(s_sub):
                    t_sub = t * (1.0 - j / s_sub)
                    sig = sched.sigma(t_sub)
                    self.ode_factors[k, j] = sched.sigma_dot(t_sub) * sig * dt
                    s2 = sig ** 2
                    for c in range(ncomp):
                        lo = np.linalg.cholesky(prior.covs[c] + s2 * eye)
                        self.ode_chols[k, j, c] = lo
                        self.ode_logdets[k, j, c] = 2.0 * np.sum(np.log(np.diag(lo)))

    def _pack_problem(self):
        p = self.problem
        if p is None:
            self.kcode = kern.KIND_NONE
            self.kop = np.zeros((0, 1))
            self.ky = np.zeros(0)
            self.p0 = 0.0
            self.lik_const = 0.0
            self.y_scale = np.zeros(0)
            return
        if p.kind == KIND_LINEAR:
            self.kcode = kern.KIND_LINEAR
        elif p.kind == KIND_PHASE:
            self.kcode = kern.KIND_PHASE
        else:
            self.kcode = kern.KIND_XRAY
        self.kop = np.ascontiguousarray(p.operator)
        self.ky = self.y
        if p.kind == KIND_XRAY:
            self.p0 = p.intensity
            self.lik_const = float(-np.sum(gammaln(self.ky + 1.0)))
            self.y_scale = np.sqrt(np.maximum(self.ky, 1.0))
        else:
            self.p0 = 1.0 / p.noise_std ** 2
            self.lik_const = 0.0
            self.y_scale = np.full(p.dim_meas, p.noise_std)
        self.lin_cols = (np.ascontiguousarray(np.argmax(p.operator, axis=1))
                         if p.kind == KIND_LINEAR else None)

    def _pack_precond(self):
        cfg = self.cfg
        self.base_precond = None
        self.iso_prec_chols = None
        if cfg.sampler.kind != "lang" or not cfg.sampler.metropolis:
            return
        if cfg.sampler.precond is not None:
            base = np.asarray(cfg.sampler.precond, dtype=float)
        elif self.problem is not None:
            base = average_gauss_newton_preconditioner(self.problem, self.sp.prior)
        else:
            base = np.zeros((self.dim, self.dim))
        self.base_precond = base
        if cfg.denoise.variant != "tc":
            # M_k = base + I / beta(t_k)^2 is sample-independent: factor once
            eye = np.eye(self.dim)
            self.iso_prec_chols = np.empty((self.n_steps, self.dim, self.dim))
            for k in range(self.n_steps):
                beta2 = (cfg.denoise.beta_multiplier * self.sigmas[k]) ** 2
                self.iso_prec_chols[k] = np.linalg.cholesky(base + eye / beta2)


_DUMMY_VEC = np.zeros(1)
_DUMMY_MAT = np.zeros((1, 1))
_NO_CHAIN = np.empty((0, 1))


def _finite_state(m):
    return np.all(np.isfinite(m)) and float(m @ m) < _DIVERGENCE_NORM2


def _run_fast(ctx: _RunContext, rng, trace=None):
    """One annealing run through the jitted kernels."""
    cfg = ctx.cfg
    d = ctx.dim
    denoise = cfg.denoise
    samp = cfg.sampler
    m = ctx.sigmas[0] * rng.standard_normal(d)
    score = np.empty(d)
    jac = np.empty((d, d)) if denoise.variant == "tc" else None
    m0 = m
    for k in range(ctx.n_steps):
        sig = ctx.sigmas[k]
        s2 = sig * sig
        # --- denoising approximation
        if denoise.variant == "ode":
            ma = kern.ode_mean_tab(m, ctx.ode_factors[k], ctx.log_w, ctx.means,
                                   ctx.ode_chols[k], ctx.ode_logdets[k])
        elif denoise.variant == "tu":
            kern.mixture_score(m, ctx.log_w, ctx.means, ctx.main_chols[k],
                               ctx.main_logdets[k], score)
            ma = m + s2 * score
        else:
            kern.mixture_score_jacobian(m, ctx.log_w, ctx.means,
                                        ctx.main_chols[k], ctx.main_logdets[k],
                                        ctx.precs[k], score, jac)
            ma = m + s2 * score
            cov = s2 * (np.eye(d) + s2 * jac)
            vals, vecs = np.linalg.eigh(cov)
            vals = np.maximum(vals, TC_EIGENVALUE_FLOOR * s2)
        if denoise.variant == "tc":
            iso, gscal = False, 0.0
            gvec, ginve = vecs, 1.0 / vals
            glogdet = float(np.sum(np.log(vals)))
            beta2 = None
        else:
            beta2 = (denoise.beta_multiplier * sig) ** 2
            iso, gscal = True, 1.0 / beta2
            gvec, ginve = _DUMMY_MAT, _DUMMY_VEC
            glogdet = d * math.log(beta2)
        targs = (ctx.kcode, ctx.kop, ctx.ky, ctx.p0, ctx.lik_const,
                 ma, iso, gscal, gvec, ginve, glogdet)
        # --- prediction stage
        if samp.kind == "lang":
            noise = rng.standard_normal((samp.lang_iters, d))
            if samp.metropolis:
                unif = rng.random(samp.lang_iters)
                if ctx.iso_prec_chols is not None:
                    lo = ctx.iso_prec_chols[k]
                else:
                    prec = ctx.base_precond + (vecs * ginve) @ vecs.T
                    lo = np.linalg.cholesky(prec)
                m0, _, _ = kern.mala(*targs, ma, samp.lang_step, lo, noise,
                                     unif, 0, 0.0, 0, _DUMMY_VEC, _NO_CHAIN)
            else:
                m0, bad = kern.ula(*targs, ma, samp.lang_step, noise)
                if bad >= 0:
                    raise DivergedSampleError(bad, anneal_index=ctx.n_steps - k)
        elif samp.kind == "map":
            m0 = _solve_map(ctx, targs, ma, iso, gscal, gvec, ginve, samp)
        else:  # rto
            xi_m = rng.standard_normal(d)
            xi_y = rng.standard_normal(ctx.ky.shape[0])
            if iso:
                ma_p = ma + math.sqrt(beta2) * xi_m
            else:
                ma_p = ma + (gvec * np.sqrt(vals)) @ xi_m
            y_p = ctx.ky + ctx.y_scale * xi_y
            # perturbed measurements need no count normalization: drop it
            ptargs = (ctx.kcode, ctx.kop, y_p, ctx.p0, 0.0,
                      ma_p, iso, gscal, gvec, ginve, glogdet)
            m0 = _solve_map(ctx, ptargs, ma_p, iso, gscal, gvec, ginve, samp,
                            y_override=y_p)
        if not _finite_state(m0):
            raise DivergedSampleError(0, anneal_index=ctx.n_steps - k)
        # --- corruption stage
        if trace is not None:
            trace.append((ctx.ts[k], ma, m0.copy()))
        if k + 1 < ctx.n_steps:
            m = m0 + ctx.sigmas[k + 1] * rng.standard_normal(d)
    return m0


def _solve_map(ctx, targs, init, iso, gscal, gvec, ginve, samp, y_override=None):
    y_eff = ctx.ky if y_override is None else y_override
    if ctx.kcode == kern.KIND_LINEAR:
        if iso:
            return kern.map_linear_iso(ctx.lin_cols, y_eff, ctx.p0,
                                       targs[5], gscal)
        return kern.map_linear_full(ctx.kop, y_eff, ctx.p0, targs[5],
                                    gvec, ginve)
    x, _, _, _, _ = kern.lbfgs(*targs, init, samp.lbfgs_iters,
                               samp.lbfgs_memory, 1e-8, 1e-4, 0.9)
    return x


def _run_generic(cfg: VariantConfig, problem, y, sp: ScoreProvider, rng, dim,
                 trace=None):
    """Annealing run for arbitrary score providers (plain numpy path)."""
    sched = cfg.schedule
    ts = sched.timesteps
    sigmas = np.array([sched.sigma(t) for t in ts])
    m = sigmas[0] * rng.standard_normal(dim)
    samp = cfg.sampler
    base_precond = None
    if samp.kind == "lang" and samp.metropolis:
        if samp.precond is not None:
            base_precond = np.asarray(samp.precond, dtype=float)
        elif problem is not None and isinstance(sp, MixtureScoreProvider):
            base_precond = average_gauss_newton_preconditioner(problem, sp.prior)
        else:
            base_precond = np.zeros((dim, dim))
    m0 = m
    for k in range(sched.num_steps):
        t = ts[k]
        dist = build_denoise_approx(cfg.denoise, sp, m, t, sched)
        target = PredictionTarget(problem, y, dist)
        if samp.kind == "lang":
            if samp.metropolis:
                prec = base_precond + np.linalg.inv(dist.cov)
                m0 = mala_precond_sample(target, dist.mean, samp.lang_step,
                                         samp.lang_iters, prec, rng)
            else:
                try:
                    m0 = ula_sample(target, dist.mean, samp.lang_step,
                                    samp.lang_iters, rng)
                except DivergedSampleError as err:
                    raise DivergedSampleError(err.iteration,
                                              anneal_index=sched.num_steps - k)
        elif samp.kind == "map":
            if problem is not None and problem.kind == KIND_LINEAR:
                m0 = closed_form_map(target)
            else:
                m0 = lbfgs_map(target, dist.mean, samp.lbfgs_iters,
                               samp.lbfgs_memory).x
        else:
            m0 = rto_sample(target, None, rng, lbfgs_iters=samp.lbfgs_iters,
                            lbfgs_memory=samp.lbfgs_memory)
        if not _finite_state(m0):
            raise DivergedSampleError(0, anneal_index=sched.num_steps - k)
        if trace is not None:
            trace.append((t, dist.mean, np.array(m0, copy=True)))
        if k + 1 < sched.num_steps:
            m = m0 + sigmas[k + 1] * rng.standard_normal(dim)
    return m0


def sample_posterior(cfg: VariantConfig, problem: Problem | None, y,
                     sp: ScoreProvider, rng, return_trace=False):
    """One annealed posterior draw (a single run of the outer loop)."""
    trace = [] if return_trace else None
    if isinstance(sp, MixtureScoreProvider):
        ctx = _RunContext(cfg, problem, y, sp)
        out = _run_fast(ctx, rng, trace)
    else:
        if problem is None:
            raise ValueError("generic runs need a problem to size the state")
        if cfg.denoise.variant == "tc" and not sp.has_jacobian:
            raise VariantUnsupportedError(
                "tc denoising needs a Jacobian-capable score provider")
        out = _run_generic(cfg, problem, y, sp, rng, problem.dim_param, trace)
    return (out, trace) if return_trace else out


def _run_indices(ctx_or_none, cfg, problem, y, sp, indices, master_seed):
    ctx = ctx_or_none
    if ctx is None and isinstance(sp, MixtureScoreProvider):
        ctx = _RunContext(cfg, problem, y, sp)
    rows = []
    discarded = 0
    for idx in indices:
        out = None
        for retry in (0, 1):
            rng = _sample_rng(master_seed, idx, retry)
            try:
                if ctx is not None:
                    out = _run_fast(ctx, rng)
                else:
                    out = _run_generic(cfg, problem, y, sp, rng,
                                       problem.dim_param)
                break
            except DivergedSampleError:
                out = None
        if out is None:
            discarded += 1
        else:
            rows.append(out)
    return rows, discarded


def sample_posterior_batch(cfg: VariantConfig, problem, y, sp: ScoreProvider,
                           n, master_seed, n_workers=1, trial=0) -> SampleBatch:
    """n independent annealing runs under per-sample derived seeds.

    Sample ``idx`` always uses the generator seeded by
    ``(master_seed, idx, retry)``, so the output is bitwise identical for
    any ``n_workers``.  A diverged run is retried once with ``retry = 1``
    and discarded if it diverges again; discards are counted, not fatal.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    start = time.perf_counter()
    indices = np.arange(n)
    if n_workers is None or n_workers <= 1 or n < 4:
        ctx = _RunContext(cfg, problem, y, sp) if isinstance(sp, MixtureScoreProvider) else None
        rows, discarded = _run_indices(ctx, cfg, problem, y, sp, indices,
                                       master_seed)
    else:
        chunks = np.array_split(indices, min(n_workers * 4, n))
        results = Parallel(n_jobs=n_workers)(
            delayed(_run_indices)(None, cfg, problem, y, sp, chunk, master_seed)
            for chunk in chunks if chunk.size)
        rows = [r for part, _ in results for r in part]
        discarded = sum(dc for _, dc in results)
    dim = problem.dim_param if problem is not None else rows[0].shape[0]
    samples = (np.asarray(rows, dtype=float) if rows
               else np.empty((0, dim)))
    return SampleBatch(samples, cfg.label, seed=master_seed, trial=trial,
                       discarded=discarded,
                       runtime_seconds=time.perf_counter() - start)
