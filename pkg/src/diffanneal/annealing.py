"""Noise schedule and Gaussian denoising-distribution approximations.

The annealing loop needs, at every noise level, a Gaussian stand-in for the
conditional distribution of the clean variable given the noised iterate.
Three constructions are provided:

* ``ode``  -- mean from an explicit Euler solve of the probability-flow ODE
  backwards to time zero, isotropic covariance beta(t)^2 I;
* ``tu``   -- mean from Tweedie's identity m + sigma^2 * score, isotropic
  covariance beta(t)^2 I;
* ``tc``   -- Tweedie mean plus the second-order Tweedie covariance
  sigma^2 (I + sigma^2 * score Jacobian), which needs a Jacobian-capable
  score provider.

With the shipped sigma(t) = t schedule, a single Euler ODE step reproduces
the Tweedie mean exactly; tests pin that identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gmm import GaussianDist, GaussianMixture

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "ScoreProvider",
    "MixtureScoreProvider",
    "DenoiseApprox",
    "VariantUnsupportedError",
    "tweedie_mean",
    "tc_covariance",
    "ode_mean",
    "build_denoise_approx",
    "TC_EIGENVALUE_FLOOR",
]

# Relative floor applied to eigenvalues of the second-order Tweedie
# covariance: exact algebra gives a PSD matrix, finite precision can dip
# slightly negative, and downstream samplers need strictly positive spectra.
TC_EIGENVALUE_FLOOR = 1e-8


class VariantUnsupportedError(RuntimeError):
    """Raised when a variant needs capabilities the score provider lacks."""


def _identity(t):
    return t


def _one(t):
    return np.ones_like(np.asarray(t, dtype=float)) if np.ndim(t) else 1.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Decreasing annealing timesteps plus the noise-level map sigma(t).

    ``timesteps`` runs from T down to exactly 0 with ``num_steps + 1``
    entries.  The default map is sigma(t) = t (variance-exploding with unit
    rate); a custom monotone ``sigma`` with its derivative ``sigma_dot`` may
    be supplied as callables, subject to sigma(0) = 0.
    """

    big_t: float
    num_steps: int
    rho: float
    timesteps: np.ndarray
    sigma: callable = field(default=_identity)
    sigma_dot: callable = field(default=_one)

    def __post_init__(self):
        ts = np.asarray(self.timesteps, dtype=float)
        if ts.ndim != 1 or ts.size != self.num_steps + 1:
            raise ValueError("timesteps must hold num_steps + 1 values")
        if not (ts[0] == self.big_t and ts[-1] == 0.0):
            raise ValueError("timesteps must start at T and end at exactly 0")
        if np.any(np.diff(ts) >= 0):
            raise ValueError("timesteps must be strictly decreasing")
        if self.sigma(0.0) != 0.0:
            raise ValueError("sigma(0) must be 0")
        ts.setflags(write=False)

    @property
    def sigmas(self) -> np.ndarray:
        """sigma evaluated on the timesteps (same decreasing order)."""
        return np.array([self.sigma(t) for t in self.timesteps])


def make_schedule(big_t=10.0, num_steps=200, rho=7.0, sigma=None, sigma_dot=None) -> NoiseSchedule:
    """Polynomially spaced timesteps t_i = T (i / N)^rho, i = N .. 0.

    ``rho = 1`` gives uniform spacing; larger values concentrate steps near
    t = 0 where the posterior sharpens.  Endpoints are pinned to T and 0
    exactly.
    """
    if big_t <= 0 or num_steps < 1 or rho <= 0:
        raise ValueError("require T > 0, num_steps >= 1, rho > 0")
    idx = np.arange(num_steps, -1, -1, dtype=float)
    ts = big_t * (idx / num_steps) ** rho
    ts[0] = big_t
    ts[-1] = 0.0
    kwargs = {}
    if sigma is not None:
        kwargs["sigma"] = sigma
        kwargs["sigma_dot"] = sigma_dot if sigma_dot is not None else _one
    return NoiseSchedule(float(big_t), int(num_steps), float(rho), ts, **kwargs)


class ScoreProvider:
    """Interface for noisy-prior score oracles.

    ``score(m, sigma)`` returns the gradient of the log density of the prior
    convolved with N(0, sigma^2 I); ``jacobian`` returns its derivative in m
    when available (``has_jacobian`` advertises support).  Implementations
    must be pure so providers can be shared across workers.
    """

    has_jacobian = False

    def score(self, m, sigma):
        raise NotImplementedError

    def jacobian(self, m, sigma):
        raise VariantUnsupportedError(
            f"{type(self).__name__} does not expose a score Jacobian")


class MixtureScoreProvider(ScoreProvider):
    """Analytic score of a Gaussian-mixture prior (exact at every sigma)."""

    has_jacobian = True

    def __init__(self, prior: GaussianMixture):
        self.prior = prior

    def score(self, m, sigma):
        return self.prior.noisy_score(m, sigma)

    def jacobian(self, m, sigma):
        return self.prior.noisy_score_jacobian(m, sigma)


@dataclass(frozen=True)
class DenoiseApprox:
    """Choice of denoising approximation plus its hyperparameters.

    ``beta_multiplier`` scales the isotropic standard deviation
    beta(t) = beta_multiplier * sigma(t) used by the ode/tu variants;
    ``ode_steps`` is the Euler substep count of the ode variant.
    """

    variant: str = "tu"
    beta_multiplier: float = 1.0
    ode_steps: int = 5

    def __post_init__(self):
        if self.variant not in ("ode", "tu", "tc"):
            raise ValueError(f"unknown denoise variant {self.variant!r}")
        if self.beta_multiplier <= 0 or self.ode_steps < 1:
            raise ValueError("beta_multiplier must be > 0 and ode_steps >= 1")


def tweedie_mean(sp: ScoreProvider, m_t, sigma_t):
    """Posterior-mean estimate m + sigma^2 * score(m, sigma)."""
    m_t = np.asarray(m_t, dtype=float)
    if sigma_t == 0.0:
        return m_t.copy()
    return m_t + sigma_t ** 2 * sp.score(m_t, sigma_t)


def tc_covariance(sp: ScoreProvider, m_t, sigma_t):
    """Second-order Tweedie covariance sigma^2 (I + sigma^2 * d score / dm).

    The result is symmetrized and its eigenvalues are clamped from below at
    ``TC_EIGENVALUE_FLOOR * sigma^2`` so the returned matrix is safely SPD.
    """
    if not sp.has_jacobian:
        raise VariantUnsupportedError(
            "tc denoising needs a Jacobian-capable score provider")
    m_t = np.asarray(m_t, dtype=float)
    d = m_t.size
    s2 = sigma_t ** 2
    cov = s2 * (np.eye(d) + s2 * sp.jacobian(m_t, sigma_t))
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, TC_EIGENVALUE_FLOOR * s2)
    return (vecs * vals) @ vecs.T


def ode_mean(sp: ScoreProvider, m_t, t, schedule: NoiseSchedule, ode_steps=5):
    """Probability-flow estimate of the denoised mean.

    Integrates dm = -sigma_dot(t) sigma(t) score(m, sigma(t)) dt from t down
    to 0 with ``ode_steps`` explicit Euler substeps, uniformly spaced in t.
    One substep under sigma(t) = t coincides with :func:`tweedie_mean`.
    """
    if ode_steps < 1:
        raise ValueError("ode_steps must be >= 1")
    if not 0.0 < t <= schedule.big_t:
        raise ValueError("t must lie in (0, T]")
    m = np.asarray(m_t, dtype=float).copy()
    dt = t / ode_steps
    for k in range(ode_steps):
        t_k = t * (1.0 - k / ode_steps)
        sig = schedule.sigma(t_k)
        m += dt * schedule.sigma_dot(t_k) * sig * sp.score(m, sig)
    return m


def build_denoise_approx(cfg: DenoiseApprox, sp: ScoreProvider, m_t, t,
                         schedule: NoiseSchedule) -> GaussianDist:
    """Gaussian approximation of the denoising distribution at (m_t, t)."""
    sig = schedule.sigma(t)
    if cfg.variant == "ode":
        mean = ode_mean(sp, m_t, t, schedule, cfg.ode_steps)
    else:
        mean = tweedie_mean(sp, m_t, sig)
    if cfg.variant == "tc":
        cov = tc_covariance(sp, m_t, sig)
    else:
        beta = cfg.beta_multiplier * sig
        cov = beta ** 2 * np.eye(np.asarray(m_t).size)
    return GaussianDist(mean, cov)
