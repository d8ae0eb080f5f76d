"""Gamma special functions and expectation kernels.

Dependency-free numpy implementations of log-gamma, digamma and trigamma
(upward recurrence into the asymptotic range, then a Bernoulli-series tail),
plus the gamma-distribution expectations every bound and gradient in the
model needs: E[a], E[log a], differential entropy, and the log of
E[exp(-u a)], which is finite only for u > -rate and +inf otherwise.

All kernels broadcast over array-valued parameters; scalar inputs give
scalar outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "GammaParams",
    "ln_gamma",
    "digamma",
    "trigamma",
    "gamma_entropy",
    "gamma_expect_a",
    "gamma_expect_log_a",
    "log_gamma_mgf",
]

# Bernoulli numbers B_2, B_4, ..., B_14.
_BERNOULLI = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)
# Stirling-series coefficients B_2k / (2k (2k-1)) for log-gamma.
_LNG_COEF = tuple(b / ((2 * k) * (2 * k - 1)) for k, b in enumerate(_BERNOULLI, 1))
# B_2k / (2k) for digamma.
_PSI_COEF = tuple(b / (2 * k) for k, b in enumerate(_BERNOULLI, 1))

_HALF_LOG_TWO_PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GammaParams:
    """A (shape, rate) gamma parameter pair; both entries strictly positive.

    Either field may be a scalar or an array; the expectation kernels
    broadcast over them elementwise.
    """

    shape: float | np.ndarray
    rate: float | np.ndarray

    def __post_init__(self):
        for name in ("shape", "rate"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.size == 0 or not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise ValidationError(f"GammaParams.{name} must be positive and finite")


def _checked(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.size == 0 or not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValidationError(f"{name} must be positive and finite")
    return arr


def _maybe_scalar(out: np.ndarray, like) -> float | np.ndarray:
    if np.isscalar(like) or getattr(like, "ndim", 1) == 0:
        return float(out)
    return out


def _horner(coeffs, y: np.ndarray) -> np.ndarray:
    acc = coeffs[-1]
    for c in coeffs[-2::-1]:
        acc = acc * y + c
    return acc


def _lng_series(z: np.ndarray) -> np.ndarray:
    """Stirling series, valid for z >= 8."""
    inv_sq = 1.0 / (z * z)
    return (z - 0.5) * np.log(z) - z + _HALF_LOG_TWO_PI + _horner(_LNG_COEF, inv_sq) / z


def _ln_gamma(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = x < 8.0
    if not small.any():
        out = _lng_series(x)
    else:
        # unconditional 8-step shift: lnG(x) = lnG(x+8) - log(x (x+1) ... (x+7));
        # the product overflows only on the large branch, which where() discards
        with np.errstate(over="ignore"):
            prod = x.copy()
            for k in range(1, 8):
                prod = prod * (x + k)
            out = np.where(
                small, _lng_series(x + 8.0) - np.log(prod), _lng_series(np.maximum(x, 8.0))
            )
    return np.where((x == 1.0) | (x == 2.0), 0.0, out)


def _psi_series(z: np.ndarray) -> np.ndarray:
    inv_sq = 1.0 / (z * z)
    return np.log(z) - 0.5 / z - _horner(_PSI_COEF, inv_sq) * inv_sq


def _digamma(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = x < 6.0
    if not small.any():
        return _psi_series(x)
    rec = 1.0 / x
    for k in range(1, 8):
        rec = rec + 1.0 / (x + k)
    return np.where(small, _psi_series(x + 8.0) - rec, _psi_series(np.maximum(x, 6.0)))


def _psi1_series(z: np.ndarray) -> np.ndarray:
    inv_sq = 1.0 / (z * z)
    return 1.0 / z + 0.5 * inv_sq + _horner(_BERNOULLI, inv_sq) * inv_sq / z


def _trigamma(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = x < 6.0
    if not small.any():
        return _psi1_series(x)
    with np.errstate(over="ignore"):
        rec = 1.0 / (x * x)
        for k in range(1, 8):
            rec = rec + 1.0 / ((x + k) * (x + k))
    return np.where(small, _psi1_series(x + 8.0) + rec, _psi1_series(np.maximum(x, 6.0)))


def ln_gamma(x):
    """log Gamma(x) for x > 0."""
    return _maybe_scalar(_ln_gamma(_checked(x, "x")), x)


def digamma(x):
    """psi(x) = d/dx log Gamma(x) for x > 0."""
    return _maybe_scalar(_digamma(_checked(x, "x")), x)


def trigamma(x):
    """psi_1(x) = d/dx psi(x) for x > 0."""
    return _maybe_scalar(_trigamma(_checked(x, "x")), x)


def gamma_entropy(q: GammaParams):
    """Differential entropy of Gamma(shape, rate).

    shape - log(rate) + log Gamma(shape) + (1 - shape) psi(shape).
    """
    nu = np.asarray(q.shape, dtype=float)
    rho = np.asarray(q.rate, dtype=float)
    out = nu - np.log(rho) + _ln_gamma(nu) + (1.0 - nu) * _digamma(nu)
    return _maybe_scalar(out, q.shape if np.ndim(q.shape) else q.rate)


def gamma_expect_a(q: GammaParams):
    """E[a] = shape / rate."""
    out = np.asarray(q.shape, dtype=float) / np.asarray(q.rate, dtype=float)
    return _maybe_scalar(out, q.shape if np.ndim(q.shape) else q.rate)


def gamma_expect_log_a(q: GammaParams):
    """E[log a] = psi(shape) - log(rate)."""
    nu = np.asarray(q.shape, dtype=float)
    out = _digamma(nu) - np.log(np.asarray(q.rate, dtype=float))
    return _maybe_scalar(out, q.shape if np.ndim(q.shape) else q.rate)


def log_gamma_mgf(u, q: GammaParams):
    """log E[exp(-u a)] under a ~ Gamma(shape, rate).

    Equals -shape * log1p(u / rate) when u > -rate. For u <= -rate the
    expectation diverges and the result is +inf; callers treat that
    sentinel as an infinite barrier, so line searches back off infeasible
    steps without special-casing.
    """
    ua = np.asarray(u, dtype=float)
    nu = np.asarray(q.shape, dtype=float)
    rho = np.asarray(q.rate, dtype=float)
    ratio = ua / rho
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -nu * np.log1p(ratio)
    out = np.where(ratio > -1.0, val, np.inf)
    if np.ndim(u) == 0 and np.ndim(q.shape) == 0 and np.ndim(q.rate) == 0:
        return float(out)
    return out
