"""Model primitives: correlations, distortion constants, factor coefficients."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import DomainError, InvalidCorrelation, InvalidExponent


class CorrelationVerdict(NamedTuple):
    valid: bool
    determinant: float


def validate_correlations(rho1, rho2, rho12):
    """Check that (rho1, rho2, rho12) is the correlation structure of (W, B1, B2).

    The 3x3 matrix [[1, rho1, rho2], [rho1, 1, rho12], [rho2, rho12, 1]] is
    positive semidefinite exactly when its determinant is nonnegative, given
    the bounds on the off-diagonal entries.
    """
    d = 1.0 + 2.0 * rho1 * rho2 * rho12 - rho1**2 - rho2**2 - rho12**2
    ok = d >= -1e-14 and abs(rho12) <= 1.0 and abs(rho1) < 1.0 and abs(rho2) < 1.0
    return CorrelationVerdict(bool(ok), float(d))


@dataclass(frozen=True)
class CorrelationScheme:
    """Base correlation rho and its linear perturbation in eps."""

    rho: float
    rho1_slope: float = 0.0
    rho2_slope: float = -0.5
    rho12_slope: float = -1.0
    eps: float = 0.0

    def __post_init__(self):
        vals = (self.rho, self.rho1_slope, self.rho2_slope, self.rho12_slope, self.eps)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidCorrelation("correlation scheme fields must be finite")
        if abs(self.rho) >= 1.0:
            raise InvalidCorrelation(f"|rho| must be < 1, got {self.rho}")
        if self.eps < 0:
            raise InvalidCorrelation(f"eps must be >= 0, got {self.eps}")
        if self.eps > 0 and self.rho12_slope >= 0:
            raise InvalidCorrelation("rho12_slope must be negative when eps > 0")

    def with_eps(self, eps):
        return CorrelationScheme(self.rho, self.rho1_slope, self.rho2_slope,
                                 self.rho12_slope, eps)

    @property
    def slopes(self):
        return (self.rho1_slope, self.rho2_slope, self.rho12_slope)

    def correlations(self):
        return perturbed_correlations(self)


def perturbed_correlations(scheme: CorrelationScheme):
    e = scheme.eps
    r1 = scheme.rho + scheme.rho1_slope * e
    r2 = scheme.rho + scheme.rho2_slope * e
    r12 = 1.0 + scheme.rho12_slope * e
    verdict = validate_correlations(r1, r2, r12)
    if not verdict.valid:
        raise InvalidCorrelation(
            f"perturbed correlations ({r1:g}, {r2:g}, {r12:g}) are not a valid "
            f"correlation structure (determinant {verdict.determinant:.6g}); eps too large?")
    return r1, r2, r12


@dataclass(frozen=True)
class DistortionConstants:
    p: float
    gamma: float
    q: float


def check_exponent(p):
    if not math.isfinite(p) or p == 0 or p >= 1:
        raise InvalidExponent(f"risk-aversion exponent must satisfy p < 1, p != 0; got {p}")


def distortion_constants(p, rho):
    """Gamma = p/(1-p) and the exponent q = 1/(1 + Gamma rho^2)."""
    check_exponent(p)
    if abs(rho) >= 1:
        raise InvalidCorrelation(f"|rho| must be < 1, got {rho}")
    gamma = p / (1.0 - p)
    q = 1.0 / (1.0 + gamma * rho * rho)
    return DistortionConstants(p=float(p), gamma=gamma, q=q)


@dataclass(frozen=True)
class WealthState:
    t: float
    x: float
    z1: float
    z2: float

    def __post_init__(self):
        if not self.x > 0:
            raise DomainError(f"wealth must be positive, got {self.x}")
        if self.z1 < 0 or self.z2 < 0:
            raise DomainError("factor levels must be nonnegative")


class CVCoefficients(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    lam: np.ndarray


@dataclass(frozen=True)
class ChackoViceira:
    """Square-root two-factor volatility model.

    mu = mu_bar, sigma = sigma_bar / sqrt(z1 + z2), alpha_i = m - z_i,
    beta_i = beta_bar sqrt(2 z_i).
    """

    mu_bar: float = 0.05
    sigma_bar: float = 0.2
    m: float = 26.0
    beta_bar: float = 5.0
    T: float = 1.0

    def __post_init__(self):
        if not self.sigma_bar > 0:
            raise DomainError("sigma_bar must be positive")
        if self.m < 0 or self.beta_bar < 0:
            raise DomainError("m and beta_bar must be nonnegative")
        if not self.T > 0:
            raise DomainError("horizon T must be positive")
        if not self.feller:
            warnings.warn(f"Feller condition m >= beta_bar^2 fails ({self.m} < {self.beta_bar**2}); "
                          "factors may hit zero", stacklevel=2)

    @property
    def lambda_bar(self):
        return self.mu_bar / self.sigma_bar

    @property
    def feller(self):
        return self.m >= self.beta_bar**2

    def mu(self, z1, z2):
        return self.mu_bar + 0.0 * (np.asarray(z1) + np.asarray(z2))

    def sigma(self, z1, z2):
        return self.sigma_bar / np.sqrt(np.asarray(z1) + np.asarray(z2))

    def lam(self, z1, z2):
        return self.lambda_bar * np.sqrt(np.asarray(z1) + np.asarray(z2))

    def alpha(self, z):
        return self.m - np.asarray(z)

    def beta(self, z):
        return self.beta_bar * np.sqrt(2.0 * np.maximum(np.asarray(z), 0.0))


@dataclass(frozen=True)
class GeneralCoefficients:
    """Arbitrary coefficient functions (vectorised callables)."""

    mu_fn: Callable
    sigma_fn: Callable
    alpha1_fn: Callable
    alpha2_fn: Callable
    beta1_fn: Callable
    beta2_fn: Callable
    T: float = 1.0

    def mu(self, z1, z2):
        return self.mu_fn(z1, z2)

    def sigma(self, z1, z2):
        return self.sigma_fn(z1, z2)

    def lam(self, z1, z2):
        return self.mu_fn(z1, z2) / self.sigma_fn(z1, z2)

    def alpha(self, z, i=1):
        return (self.alpha1_fn if i == 1 else self.alpha2_fn)(z)

    def beta(self, z, i=1):
        return (self.beta1_fn if i == 1 else self.beta2_fn)(z)


def factor_coefficients(model, z1, z2):
    """(alpha1, alpha2, beta1, beta2) for either model flavour."""
    if isinstance(model, GeneralCoefficients):
        return (model.alpha(z1, 1), model.alpha(z2, 2), model.beta(z1, 1), model.beta(z2, 2))
    return model.alpha(z1), model.alpha(z2), model.beta(z1), model.beta(z2)


def cv_coefficients(model: ChackoViceira, z1, z2):
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if np.any(z1 + z2 <= 0):
        raise DomainError("coefficients need z1 + z2 > 0")
    sigma = model.sigma(z1, z2)
    mu = np.broadcast_to(model.mu_bar, sigma.shape) * 1.0
    out = CVCoefficients(mu, sigma, model.alpha(z1), model.alpha(z2),
                         model.beta(z1), model.beta(z2), mu / sigma)
    if out.sigma.ndim == 0:
        return CVCoefficients(*(float(v) for v in out))
    return out
