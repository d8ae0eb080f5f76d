"""M-step objective, analytic gradients, and the variational EM driver.

The M-step maximizes Q(U, alpha, gamma) = sum_t E_q[log p(w_t, a_t | .)]
using the expected sufficient statistics from the E-step. There are no
closed-form updates, so each block runs L-BFGS:

  * U row by row (rows are independent; the barrier U_fl > -min_t rho_lt
    keeps every stored posterior feasible, which is what makes the next
    E-step's warm start safe),
  * alpha and gamma jointly in log-space (their blocks are separable).

Block order is U, alpha, gamma; each block only ever improves Q, so the
whole M-step is monotone and fit()'s ELBO trace is non-decreasing.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .estep import FrameResult, floor_observations, infer_frames
from .model import FramePosterior, ModelMeta, PoFModel, Spectrogram
from .optim import LbfgsConfig, minimize
from .specfn import _digamma, _ln_gamma

__all__ = ["SufficientStats", "EmConfig", "q_objective", "grad_u_row",
           "grad_alpha", "grad_gamma", "mstep", "fit"]

logger = logging.getLogger(__name__)

_STREAM_UINIT = 0xF0


@dataclass
class SufficientStats:
    """Expected sufficient statistics of the activations for all frames."""

    expect_a: np.ndarray          # (L, T)
    expect_log_a: np.ndarray      # (L, T)
    posteriors: list[FramePosterior]

    @classmethod
    def from_posteriors(cls, posteriors: list[FramePosterior]) -> "SufficientStats":
        if not posteriors:
            raise ValidationError("need at least one posterior")
        nu = np.stack([p.nu for p in posteriors], axis=1)
        rho = np.stack([p.rho for p in posteriors], axis=1)
        return cls(
            expect_a=nu / rho,
            expect_log_a=_digamma(nu) - np.log(rho),
            posteriors=list(posteriors),
        )


@dataclass(frozen=True)
class EmConfig:
    L: int = 50
    rel_tol: float = 1e-4          # stop when the bound grows by < 0.01%
    max_em_iters: int = 200
    seed: int = 0
    inner: LbfgsConfig = field(default_factory=LbfgsConfig)

    def __post_init__(self):
        if self.rel_tol <= 0:
            raise ValidationError("rel_tol must be positive")
        if self.L < 1 or self.max_em_iters < 1:
            raise ValidationError("L and max_em_iters must be >= 1")


def _as_data(W) -> np.ndarray:
    data = np.asarray(getattr(W, "data", W), dtype=float)
    if data.ndim != 2:
        raise ValidationError("W must be 2-D (bins x frames)")
    return data


def _nu_rho(stats: SufficientStats) -> tuple[np.ndarray, np.ndarray]:
    nu = np.stack([p.nu for p in stats.posteriors], axis=1)
    rho = np.stack([p.rho for p in stats.posteriors], axis=1)
    return nu, rho


def _check_shapes(W: np.ndarray, model: PoFModel, stats: SufficientStats) -> None:
    F, T = W.shape
    L = model.n_filters
    if F != model.n_bins:
        raise ValidationError(f"W has {F} bins, model expects {model.n_bins}")
    if stats.expect_a.shape != (L, T) or stats.expect_log_a.shape != (L, T):
        raise ValidationError("sufficient statistics do not match model/data dims")


def _log_mgf_sums(U: np.ndarray, nu: np.ndarray, rho: np.ndarray) -> np.ndarray | None:
    """S[f, t] = sum_l -nu_lt log1p(U_fl / rho_lt), or None if infeasible."""
    F = U.shape[0]
    T = nu.shape[1]
    S = np.empty((F, T))
    for t in range(T):
        ratio = U / rho[:, t]
        if np.any(ratio <= -1.0):
            return None
        S[:, t] = -(np.log1p(ratio) @ nu[:, t])
    return S


def q_objective(W, model: PoFModel, stats: SufficientStats) -> float:
    """Q(U, alpha, gamma): the E-step bound minus the posterior entropy."""
    W = _as_data(W)
    _check_shapes(W, model, stats)
    if np.any(W <= 0):
        raise ValidationError("W entries must be positive (apply floor_observations)")
    nu, rho = _nu_rho(stats)
    S = _log_mgf_sums(model.U, nu, rho)
    if S is None:
        return -math.inf
    T = W.shape[1]
    gamma, alpha = model.gamma, model.alpha
    with np.errstate(over="ignore"):
        recon = np.exp(S)
    lik = (
        T * float(np.sum(gamma * np.log(gamma) - _ln_gamma(gamma)))
        + float((gamma - 1.0) @ np.log(W).sum(axis=1))
        - float(gamma @ (model.U @ stats.expect_a).sum(axis=1))
        - float(gamma @ (W * recon).sum(axis=1))
    )
    prior = (
        T * float(np.sum(alpha * np.log(alpha) - _ln_gamma(alpha)))
        + float((alpha - 1.0) @ stats.expect_log_a.sum(axis=1))
        - float(alpha @ stats.expect_a.sum(axis=1))
    )
    total = lik + prior
    return total if math.isfinite(total) else -math.inf


def grad_u_row(f: int, W, model: PoFModel, stats: SufficientStats) -> np.ndarray:
    """dQ/dU_f: gradient of Q restricted to row f of U.

    Row gradients are independent across f; perturbing any other row leaves
    this one unchanged.
    """
    W = _as_data(W)
    _check_shapes(W, model, stats)
    nu, rho = _nu_rho(stats)
    u = model.U[f]
    ratio = u[:, None] / rho                    # (L, T)
    if np.any(ratio <= -1.0):
        raise NumericalError(f"U row {f} is infeasible for the stored posteriors")
    S = -np.sum(nu * np.log1p(ratio), axis=0)   # (T,)
    ea = stats.expect_a
    w_recon = W[f] * np.exp(S)                  # (T,)
    return model.gamma[f] * (-ea.sum(axis=1) + (ea * (w_recon / (1.0 + ratio))).sum(axis=1))


def grad_alpha(W, model: PoFModel, stats: SufficientStats) -> np.ndarray:
    """dQ/d alpha_l = sum_t (log a_l + 1 - psi(a_l) + E[log a_lt] - E[a_lt])."""
    W = _as_data(W)
    _check_shapes(W, model, stats)
    T = W.shape[1]
    alpha = model.alpha
    return (
        T * (np.log(alpha) + 1.0 - _digamma(alpha))
        + stats.expect_log_a.sum(axis=1)
        - stats.expect_a.sum(axis=1)
    )


def grad_gamma(W, model: PoFModel, stats: SufficientStats) -> np.ndarray:
    """dQ/d gamma_f, summed over frames."""
    W = _as_data(W)
    _check_shapes(W, model, stats)
    nu, rho = _nu_rho(stats)
    S = _log_mgf_sums(model.U, nu, rho)
    if S is None:
        raise NumericalError("gradient requested at an infeasible point")
    T = W.shape[1]
    gamma = model.gamma
    return (
        T * (np.log(gamma) + 1.0 - _digamma(gamma))
        + np.log(W).sum(axis=1)
        - (model.U @ stats.expect_a).sum(axis=1)
        - (W * np.exp(S)).sum(axis=1)
    )


def _optimize_u_row(f, W, gamma_f, nu, rho, ea, sum_ea, u0, cfg) -> np.ndarray:
    """Maximize the row-f block of Q over u; returns the new row."""
    w_f = W[f]
    L = u0.shape[0]

    def f_and_grad(u):
        ratio = u[:, None] / rho
        if np.any(ratio <= -1.0):
            return math.inf, np.zeros(L)
        S = -np.sum(nu * np.log1p(ratio), axis=0)
        with np.errstate(over="ignore"):
            w_recon = w_f * np.exp(S)
        q = gamma_f * (-(u @ sum_ea) - float(w_recon.sum()))
        if not math.isfinite(q):
            return math.inf, np.zeros(L)
        grad = gamma_f * (-sum_ea + (ea * (w_recon / (1.0 + ratio))).sum(axis=1))
        return -q, -grad

    try:
        res = minimize(f_and_grad, u0, cfg)
    except NumericalError as exc:
        logger.warning("U row %d update failed (%s); keeping previous values", f, exc)
        return u0
    return res.x


def _optimize_alpha(alpha0, sum_ea, sum_ela, T, cfg) -> np.ndarray:
    def f_and_grad(x):
        with np.errstate(over="ignore"):
            al = np.exp(x)
        if not np.all(np.isfinite(al)) or np.any(al == 0.0):
            return math.inf, np.zeros_like(x)
        q = float(
            np.sum(T * (al * np.log(al) - _ln_gamma(al)) + (al - 1.0) * sum_ela - al * sum_ea)
        )
        if not math.isfinite(q):
            return math.inf, np.zeros_like(x)
        d = T * (np.log(al) + 1.0 - _digamma(al)) + sum_ela - sum_ea
        return -q, -(d * al)

    try:
        res = minimize(f_and_grad, np.log(alpha0), cfg)
    except NumericalError as exc:
        logger.warning("alpha update failed (%s); keeping previous values", exc)
        return alpha0
    return np.exp(res.x)


def _optimize_gamma(gamma0, sum_b, sum_c, sum_logw, T, cfg) -> np.ndarray:
    def f_and_grad(x):
        with np.errstate(over="ignore"):
            gm = np.exp(x)
        if not np.all(np.isfinite(gm)) or np.any(gm == 0.0):
            return math.inf, np.zeros_like(x)
        q = float(
            np.sum(T * (gm * np.log(gm) - _ln_gamma(gm)) + (gm - 1.0) * sum_logw
                   - gm * (sum_b + sum_c))
        )
        if not math.isfinite(q):
            return math.inf, np.zeros_like(x)
        d = T * (np.log(gm) + 1.0 - _digamma(gm)) + sum_logw - sum_b - sum_c
        return -q, -(d * gm)

    try:
        res = minimize(f_and_grad, np.log(gamma0), cfg)
    except NumericalError as exc:
        logger.warning("gamma update failed (%s); keeping previous values", exc)
        return gamma0
    return np.exp(res.x)


def mstep(
    W,
    model: PoFModel,
    stats: SufficientStats,
    cfg: LbfgsConfig = LbfgsConfig(),
    *,
    threads: int = 1,
    frozen_rows: frozenset[int] = frozenset(),
) -> PoFModel:
    """One full M-step; never decreases Q. Rows in frozen_rows keep their
    U and gamma values (used for all-silent frequency bins)."""
    W = _as_data(W)
    _check_shapes(W, model, stats)
    if np.any(W <= 0):
        raise ValidationError("W entries must be positive (apply floor_observations)")
    nu, rho = _nu_rho(stats)
    ea, ela = stats.expect_a, stats.expect_log_a
    sum_ea = ea.sum(axis=1)
    sum_ela = ela.sum(axis=1)
    F, T = W.shape

    rows = [f for f in range(F) if f not in frozen_rows]
    U_new = model.U.copy()

    def row_task(f: int) -> np.ndarray:
        return _optimize_u_row(f, W, model.gamma[f], nu, rho, ea, sum_ea, model.U[f], cfg)

    if threads > 1 and len(rows) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for f, row in zip(rows, pool.map(row_task, rows)):
                U_new[f] = row
    else:
        for f in rows:
            U_new[f] = row_task(f)

    alpha_new = _optimize_alpha(model.alpha, sum_ea, sum_ela, T, cfg)

    S = _log_mgf_sums(U_new, nu, rho)
    if S is None:  # cannot happen when rows came back feasible; keep old gamma
        logger.warning("gamma update skipped: infeasible reconstruction")
        gamma_new = model.gamma.copy()
    else:
        sum_b = (U_new @ ea).sum(axis=1)
        sum_c = (W * np.exp(S)).sum(axis=1)
        sum_logw = np.log(W).sum(axis=1)
        gamma_new = _optimize_gamma(model.gamma, sum_b, sum_c, sum_logw, T, cfg)
        for f in frozen_rows:
            gamma_new[f] = model.gamma[f]

    return PoFModel(U_new, alpha_new, gamma_new, model.meta)


def fit(
    W,
    cfg: EmConfig = EmConfig(),
    *,
    threads: int = 1,
    log_sink=None,
) -> tuple[PoFModel, list[float]]:
    """Variational EM: alternate per-frame inference and M-steps.

    Stops when the total bound grows by less than cfg.rel_tol (relative) or
    after cfg.max_em_iters iterations. Returns the fitted model and the
    per-iteration total-ELBO trace (non-decreasing up to float noise).

    log_sink, when given, receives one formatted line per EM iteration.
    """
    raw = _as_data(W)
    if raw.shape[1] < 2:
        raise ValidationError("need at least 2 frames to fit")
    if raw.max() == raw.min():
        warnings.warn("input spectrogram is constant; fit will proceed but the "
                      "decomposition is degenerate", stacklevel=2)
    data = floor_observations(raw)
    F, T = data.shape
    zero_rows = frozenset(int(f) for f in np.flatnonzero(raw.max(axis=1) <= 0))
    if zero_rows:
        warnings.warn(f"{len(zero_rows)} all-zero frequency rows are frozen at "
                      "U=0, gamma=1", stacklevel=2)

    if isinstance(W, Spectrogram):
        meta = ModelMeta(sample_rate=W.sample_rate, n_fft=W.n_fft, created_by="pof.fit")
    else:
        meta = ModelMeta(created_by="pof.fit")

    rng = np.random.default_rng([int(cfg.seed), _STREAM_UINIT])
    U = rng.normal(0.0, 0.01, size=(F, cfg.L))
    for f in zero_rows:
        U[f] = 0.0
    model = PoFModel(U, np.ones(cfg.L), np.ones(F), meta)

    trace: list[float] = []
    warm: list[FramePosterior] | None = None
    prev = None
    for it in range(1, cfg.max_em_iters + 1):
        t0 = time.perf_counter()
        results = infer_frames(
            data, model, cfg.inner, seed=cfg.seed, init=warm, threads=threads
        )
        total = float(sum(r.elbo for r in results))
        trace.append(total)
        delta = total - prev if prev is not None else math.nan
        if log_sink is not None:
            log_sink(
                f"iter={it} elbo={total:.10e} delta={delta:.6e} "
                f"secs={time.perf_counter() - t0:.3f}"
            )
        if prev is not None and total - prev <= cfg.rel_tol * abs(prev):
            break
        prev = total
        warm = [r.posterior for r in results]
        stats = SufficientStats.from_posteriors(warm)
        model = mstep(data, model, stats, cfg.inner, threads=threads,
                      frozen_rows=zero_rows)
    return model, trace
