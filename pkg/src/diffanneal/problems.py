"""Benchmark likelihoods: stylized inpainting, phase retrieval, x-ray tomography.

Three forward-model families share one :class:`Problem` container:

* ``linear_gaussian`` -- y = A m + e with a binary row-selection operator A
  and isotropic Gaussian noise (the inpainting studies, low and high noise).
* ``phase_retrieval`` -- y = (B m)^2 + e, elementwise square of a dense
  Gaussian operator; the sign symmetry f(m) = f(-m) makes the posterior
  multimodal.
* ``poisson_xray`` -- y ~ Poisson(I0 exp(-C m)) with a nonnegative dense
  operator, a stylized attenuation model.

Operators are drawn once from documented seeds and frozen; a study never
redraws them between trials.
"""

from __future__ import annotations

import json
import math

import numpy as np
from scipy.special import gammaln

__all__ = [
    "Problem",
    "Measurement",
    "make_inpainting",
    "make_phase_retrieval",
    "make_xray",
    "KIND_LINEAR",
    "KIND_PHASE",
    "KIND_XRAY",
    "PHASE_OPERATOR_SEED",
    "XRAY_OPERATOR_SEED",
]

KIND_LINEAR = "linear_gaussian"
KIND_PHASE = "phase_retrieval"
KIND_XRAY = "poisson_xray"

# Default seeds freezing the dense operators B and C.
PHASE_OPERATOR_SEED = 0
XRAY_OPERATOR_SEED = 0


class Measurement:
    """One simulated measurement: the data, its generating truth, and seed."""

    __slots__ = ("y", "m_true", "trial_seed")

    def __init__(self, y, m_true, trial_seed=-1):
        self.y = np.asarray(y, dtype=float)
        self.m_true = np.asarray(m_true, dtype=float)
        self.trial_seed = int(trial_seed)
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.m_true))):
            raise ValueError("measurement entries must be finite")

    def to_json(self) -> str:
        return json.dumps({
            "y": self.y.tolist(),
            "m_true": self.m_true.tolist(),
            "trial_seed": self.trial_seed,
        })

    @classmethod
    def from_json(cls, text: str) -> "Measurement":
        doc = json.loads(text)
        return cls(doc["y"], doc["m_true"], doc["trial_seed"])


class Problem:
    """A likelihood family: forward model, noise model, and derivatives.

    Use the module factories (:func:`make_inpainting`,
    :func:`make_phase_retrieval`, :func:`make_xray`) rather than constructing
    directly.  Instances are immutable.
    """

    def __init__(self, kind, operator, noise_std=None, intensity=None,
                 seed=None, mask_kept=None):
        operator = np.asarray(operator, dtype=float)
        if operator.ndim != 2:
            raise ValueError("operator must be a matrix")
        self.kind = kind
        self.operator = operator
        self.noise_std = None if noise_std is None else float(noise_std)
        self.intensity = None if intensity is None else float(intensity)
        self.seed = seed
        self.mask_kept = None if mask_kept is None else tuple(int(i) for i in mask_kept)
        self._validate()
        self.operator.setflags(write=False)

    def _validate(self):
        k, d = self.operator.shape
        if self.kind == KIND_LINEAR:
            ok = np.all((self.operator == 0.0) | (self.operator == 1.0))
            one_per_row = np.all(self.operator.sum(axis=1) == 1.0)
            cols = np.argmax(self.operator, axis=1)
            if not (ok and one_per_row and len(set(cols.tolist())) == k):
                raise ValueError("selection operator must pick one distinct coordinate per row")
            if self.noise_std is None or self.noise_std <= 0:
                raise ValueError("linear-Gaussian problems need noise_std > 0")
        elif self.kind == KIND_PHASE:
            if self.noise_std is None or self.noise_std <= 0:
                raise ValueError("phase retrieval needs noise_std > 0")
        elif self.kind == KIND_XRAY:
            if np.any(self.operator < 0.01) or np.any(self.operator > 0.05):
                raise ValueError("attenuation operator entries must lie in [0.01, 0.05]")
            if self.intensity is None or self.intensity <= 0:
                raise ValueError("x-ray problems need intensity > 0")
        else:
            raise ValueError(f"unknown problem kind {self.kind!r}")

    @property
    def dim_param(self) -> int:
        return self.operator.shape[1]

    @property
    def dim_meas(self) -> int:
        return self.operator.shape[0]

    # ------------------------------------------------------------------
    # forward model and likelihood

    def forward(self, m):
        """f(m); accepts a point (D,) or a batch (n, D)."""
        m = np.asarray(m, dtype=float)
        u = m @ self.operator.T
        if self.kind == KIND_LINEAR:
            return u
        if self.kind == KIND_PHASE:
            return u * u
        return self.intensity * np.exp(-u)

    def _check_counts(self, y):
        if np.any(y < 0) or np.any(np.abs(y - np.round(y)) > 1e-9):
            raise ValueError("Poisson measurements must be nonnegative integers")

    def log_likelihood(self, m, y):
        """log pi(y | m).

        Gaussian kinds drop the additive normalization constant, so the
        maximum over m is 0 when the residual vanishes.  The Poisson kind
        keeps the full mass function including log(y!) via log-gamma.
        Batched ``m`` of shape (n, D) yields an (n,) array.
        """
        m = np.asarray(m, dtype=float)
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim_meas,):
            raise ValueError("measurement has wrong shape")
        f = self.forward(m)
        if self.kind in (KIND_LINEAR, KIND_PHASE):
            r = y - f
            val = -0.5 * np.sum(r * r, axis=-1) / self.noise_std ** 2
        else:
            self._check_counts(y)
            log_f = math.log(self.intensity) - m @ self.operator.T
            val = np.sum(y * log_f - f - gammaln(y + 1.0), axis=-1)
        return float(val) if m.ndim == 1 else val

    def grad_log_likelihood(self, m, y):
        """Gradient of :meth:`log_likelihood` in m, for a single point."""
        m = np.asarray(m, dtype=float)
        y = np.asarray(y, dtype=float)
        if m.ndim != 1:
            raise ValueError("gradient is pointwise; pass a single m")
        if self.kind == KIND_LINEAR:
            r = (y - self.operator @ m) / self.noise_std ** 2
            return self.operator.T @ r
        if self.kind == KIND_PHASE:
            u = self.operator @ m
            r = (y - u * u) / self.noise_std ** 2
            return self.operator.T @ (2.0 * u * r)
        self._check_counts(y)
        f = self.forward(m)
        return self.operator.T @ (f - y)

    def gauss_newton_hessian(self, m, y=None):
        """Gauss-Newton curvature of the negative log likelihood at m.

        J^T W J with J the forward Jacobian and W the likelihood information
        weight: 1/tau^2 for the Gaussian kinds, the Poisson Fisher weight
        diag(1/f) for x-ray (which collapses to C^T diag(f) C).  Always
        symmetric positive semidefinite; independent of y.
        """
        m = np.asarray(m, dtype=float)
        if self.kind == KIND_LINEAR:
            return self.operator.T @ self.operator / self.noise_std ** 2
        if self.kind == KIND_PHASE:
            u = self.operator @ m
            j = 2.0 * u[:, None] * self.operator
            return j.T @ j / self.noise_std ** 2
        f = self.forward(m)
        h = self.operator.T @ (f[:, None] * self.operator)
        return 0.5 * (h + h.T)

    # ------------------------------------------------------------------
    # measurement simulation

    def simulate_measurement(self, prior, rng, seed=-1) -> Measurement:
        """Draw m_true from the prior, then y from the likelihood at m_true."""
        m_true = prior.sample(1, rng)[0]
        f = self.forward(m_true)
        if self.kind == KIND_XRAY:
            y = rng.poisson(f).astype(float)
        else:
            y = f + self.noise_std * rng.standard_normal(self.dim_meas)
        return Measurement(y, m_true, seed)

    def snr_estimate(self, prior, rng, n=10000):
        """Monte Carlo SNR diagnostic, 10 log10(E||f||^2 / E||z||^2), in dB.

        Informational only; the convention is not pinned down anywhere, so
        nothing should gate on this number.
        """
        f = self.forward(prior.sample(n, rng))
        sig = np.mean(np.sum(f * f, axis=1))
        if self.kind == KIND_XRAY:
            noise = np.mean(np.sum(f, axis=1))
        else:
            noise = self.dim_meas * self.noise_std ** 2
        return 10.0 * math.log10(sig / noise)

    # ------------------------------------------------------------------
    # serialization

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "operator": self.operator.tolist(),
            "noise_std": self.noise_std,
            "intensity": self.intensity,
            "seed": self.seed,
            "mask_kept": list(self.mask_kept) if self.mask_kept is not None else None,
        })

    @classmethod
    def from_json(cls, text: str) -> "Problem":
        doc = json.loads(text)
        return cls(doc["kind"], np.array(doc["operator"]), doc["noise_std"],
                   doc["intensity"], doc["seed"], doc["mask_kept"])

    def __repr__(self):  # pragma: no cover
        return f"Problem(kind={self.kind!r}, K={self.dim_meas}, D={self.dim_param})"


def make_inpainting(tau, mask_kept=tuple(range(8)), dim=10) -> Problem:
    """Row-selection inpainting problem observing ``mask_kept`` coordinates.

    The default keeps coordinates 0-7 of a 10-dimensional parameter, leaving
    two null-space directions.  ``tau`` is the Gaussian noise standard
    deviation (0.1 for the low-noise study, 5 for the high-noise one).
    """
    kept = tuple(int(i) for i in mask_kept)
    if len(set(kept)) != len(kept):
        raise ValueError("kept indices must be distinct")
    if any(i < 0 or i >= dim for i in kept):
        raise ValueError(f"kept indices must lie in [0, {dim})")
    a = np.zeros((len(kept), dim))
    a[np.arange(len(kept)), kept] = 1.0
    return Problem(KIND_LINEAR, a, noise_std=tau, mask_kept=kept)


def make_phase_retrieval(seed=PHASE_OPERATOR_SEED, dim=10, dim_meas=5, tau=25.0) -> Problem:
    """Elementwise-squared Gaussian forward model, y = (B m)^2 + e."""
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((dim_meas, dim))
    return Problem(KIND_PHASE, b, noise_std=tau, seed=seed)


def make_xray(seed=XRAY_OPERATOR_SEED, dim=10, dim_meas=15, intensity=1000.0) -> Problem:
    """Poisson attenuation model, y ~ Poisson(I0 exp(-C m)), C in [.01, .05]."""
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.01, 0.05, size=(dim_meas, dim))
    return Problem(KIND_XRAY, c, intensity=intensity, seed=seed)
