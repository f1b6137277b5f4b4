"""Post-selection and naive confidence intervals.

Post-selection intervals invert the region-conditional limiting law: draws
of the truncated standard normal W are mapped through the selected model's
information geometry and the symmetric critical value is the empirical
(1 - alpha) quantile of the absolute transformed draws.  Naive intervals
use the unconditional normal quantile with either the marginal-information
standard error (fixed parameters) or a first-/second-order MSE estimate
(mixed parameters).

Every post-selection interval carries Monte Carlo metadata including a
batch-split standard error of its critical value, so downstream tests can
set principled tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .lmm import (
    FittedLMM,
    MixedTarget,
    build_k_matrix,
    mse_first_order,
    mse_second_order,
    predict_mixed,
    sym_inv_sqrt,
    sym_sqrt,
)
from .regions import ConstraintSet
from .sampler import SampleBatch, SamplerConfig, choose_method, sample_truncated

__all__ = [
    "IntervalResult",
    "McMeta",
    "empirical_quantile",
    "symmetric_critical_value",
    "posi_ci_beta",
    "posi_ci_linear_combo",
    "posi_ci_mixed",
    "naive_ci_beta",
    "naive_ci_mixed",
    "draw_region_batch",
]


@dataclass(frozen=True)
class McMeta:
    """Monte Carlo provenance of a post-selection critical value."""

    B: int
    seed: Optional[int]
    acceptance: Optional[float]
    c_se: float
    method: str


@dataclass(frozen=True)
class IntervalResult:
    """A two-sided interval for one target."""

    point_estimate: float
    lower: float
    upper: float
    alpha: float
    method: str  # "post-caic" | "naive-1" | "naive-2"
    target: str = ""
    mc_meta: Optional[McMeta] = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.lower <= self.point_estimate <= self.upper:
            raise ValueError("interval must contain its point estimate")
        if not self.upper - self.lower > 0:
            raise ValueError("interval must have positive width")

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def empirical_quantile(samples: np.ndarray, p: float) -> float:
    """The ceil(p * B)-th order statistic of the samples."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("samples must be nonempty")
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    k = max(int(math.ceil(p * samples.size)), 1)
    return float(np.partition(samples, k - 1)[k - 1])


def symmetric_critical_value(draws: np.ndarray, alpha: float) -> tuple[float, float]:
    """(c, se): half-width from |draws| and its 10-fold batch-split SE."""
    absd = np.abs(np.asarray(draws, dtype=float))
    c = empirical_quantile(absd, 1.0 - alpha)
    n_split = 10
    if absd.size >= n_split * 20:
        parts = np.array_split(absd, n_split)
        cs = [empirical_quantile(part, 1.0 - alpha) for part in parts]
        se = float(np.std(cs, ddof=1) / math.sqrt(n_split))
    else:
        se = float("nan")
    return c, se


def draw_region_batch(region: ConstraintSet, cfg: SamplerConfig) -> SampleBatch:
    """Sample the region with the rejection/chain auto-switch applied."""
    method = choose_method(region, cfg)
    if method != cfg.method:
        cfg = replace(cfg, method=method)
    return sample_truncated(region, cfg)


def _meta(batch: SampleBatch, c_se: float) -> McMeta:
    return McMeta(
        B=batch.B,
        seed=batch.seed,
        acceptance=batch.acceptance_rate,
        c_se=c_se,
        method=batch.method,
    )


def _selected_coords(region: ConstraintSet, fit: FittedLMM) -> np.ndarray:
    coords = region.meta.get("selected_coords")
    if coords is None:
        coords = fit.spec.indices
    return np.asarray(coords, dtype=int)


def _fisher_submatrix(fit: FittedLMM, full_fit: Optional[FittedLMM]) -> np.ndarray:
    """X'V^-1X on the selected covariates, from the full fit when given."""
    if full_fit is None:
        return fit.fisher_beta
    idx = fit.spec.indices
    return full_fit.fisher_beta[np.ix_(idx, idx)]


def posi_ci_beta(
    fit_M: FittedLMM,
    region: ConstraintSet,
    j: int,
    alpha: float,
    cfg: SamplerConfig,
    full_fit: Optional[FittedLMM] = None,
    batch: Optional[SampleBatch] = None,
) -> IntervalResult:
    """Post-selection interval for one coefficient of the selected model.

    Draws W restricted to the selection region, maps the selected-model
    subvector through the inverse square root of its marginal information
    (which carries the 1/sqrt(n) scale), and takes the symmetric empirical
    critical value of the j-th marginal.

    Args:
        fit_M: selected-model fit (provides the centre beta_hat_j).
        region: selection region whose metadata names the model coordinates.
        j: coordinate in the full a+K indexing; must be in the model.
        alpha: two-sided miscoverage level.
        cfg: sampler controls (B, seed, method).
        full_fit: when given, information matrices come from the full-model
            fit with submatrices extracted for the selected model.
        batch: reuse an existing batch instead of sampling.
    """
    if j not in fit_M.spec.indices:
        raise ValueError(f"coordinate {j} is not in the selected model")
    if batch is None:
        batch = draw_region_batch(region, cfg)
    coords = _selected_coords(region, fit_M)
    Ws = batch.draws[:, coords]
    T = Ws @ sym_inv_sqrt(_fisher_submatrix(fit_M, full_fit))
    local_j = int(np.flatnonzero(fit_M.spec.indices == j)[0])
    c, c_se = symmetric_critical_value(T[:, local_j], alpha)
    est = float(fit_M.beta_hat[j])
    return IntervalResult(
        point_estimate=est,
        lower=est - c,
        upper=est + c,
        alpha=alpha,
        method="post-caic",
        target=f"beta[{j}]",
        mc_meta=_meta(batch, c_se),
    )


def posi_ci_linear_combo(
    fit_M: FittedLMM,
    region: ConstraintSet,
    k: np.ndarray,
    alpha: float,
    cfg: SamplerConfig,
    full_fit: Optional[FittedLMM] = None,
    batch: Optional[SampleBatch] = None,
) -> IntervalResult:
    """Post-selection interval for k'beta restricted to the selected model."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    idx = fit_M.spec.indices
    if k.shape[0] == fit_M.data.p_total:
        k_s = k[idx]
    elif k.shape[0] == idx.shape[0]:
        k_s = k
    else:
        raise ValueError("k length matches neither the full nor the model covariate count")
    if not np.any(k_s != 0.0):
        raise ValueError("k restricted to the selected model is zero")
    if batch is None:
        batch = draw_region_batch(region, cfg)
    coords = _selected_coords(region, fit_M)
    Ws = batch.draws[:, coords]
    T = Ws @ (sym_inv_sqrt(_fisher_submatrix(fit_M, full_fit)) @ k_s)
    c, c_se = symmetric_critical_value(T, alpha)
    est = float(k_s @ fit_M.beta_hat_sub)
    return IntervalResult(
        point_estimate=est,
        lower=est - c,
        upper=est + c,
        alpha=alpha,
        method="post-caic",
        target="combo",
        mc_meta=_meta(batch, c_se),
    )


def posi_ci_mixed(
    fit_M: FittedLMM,
    region_mu: ConstraintSet,
    target: MixedTarget,
    alpha: float,
    cfg: SamplerConfig,
    full_fit: Optional[FittedLMM] = None,
    batch: Optional[SampleBatch] = None,
) -> IntervalResult:
    """Post-selection interval for a mixed parameter k'beta + m'u_i.

    The joint draws stack the constrained model block with the free
    random-effect block; the statistic contracts them against the square
    root of the selected model's joint coefficient covariance, whose
    unconstrained quantile reproduces the first-order MSE normal interval.
    """
    if region_mu.r != fit_M.data.r:
        raise ValueError("mixed-parameter region must carry one free coordinate per random effect")
    target.validate_against(fit_M.data)
    if batch is None:
        batch = draw_region_batch(region_mu, cfg)
    coords = _selected_coords(region_mu, fit_M)
    head_dim = region_mu.head_dim
    Ws = np.hstack([batch.draws[:, coords], batch.draws[:, head_dim:]])
    params = (full_fit or fit_M).theta_hat
    km = build_k_matrix(fit_M.data, fit_M.spec, params)
    k_inv_root = sym_sqrt(km.inverse)
    q = fit_M.data.q
    c_vec = np.zeros(fit_M.spec.size + fit_M.data.r)
    c_vec[: fit_M.spec.size] = target.k[fit_M.spec.indices]
    off = fit_M.spec.size + target.cluster_index * q
    c_vec[off : off + q] = target.m
    T = Ws @ (k_inv_root @ c_vec)
    c, c_se = symmetric_critical_value(T, alpha)
    est = predict_mixed(fit_M, target)
    return IntervalResult(
        point_estimate=est,
        lower=est - c,
        upper=est + c,
        alpha=alpha,
        method="post-caic",
        target=f"mu[{target.cluster_index}]",
        mc_meta=_meta(batch, c_se),
    )


def naive_ci_beta(fit_M: FittedLMM, j: int, alpha: float) -> IntervalResult:
    """Unconditional normal interval from the marginal information."""
    if j not in fit_M.spec.indices:
        raise ValueError(f"coordinate {j} is not in the selected model")
    z = float(ndtri(1.0 - alpha / 2.0))
    cov = np.linalg.inv(fit_M.fisher_beta)
    local_j = int(np.flatnonzero(fit_M.spec.indices == j)[0])
    se = math.sqrt(cov[local_j, local_j])
    est = float(fit_M.beta_hat[j])
    return IntervalResult(
        point_estimate=est,
        lower=est - z * se,
        upper=est + z * se,
        alpha=alpha,
        method="naive-1",
        target=f"beta[{j}]",
    )


def naive_ci_combo(fit_M: FittedLMM, k: np.ndarray, alpha: float) -> IntervalResult:
    """Unconditional normal interval for k'beta on the selected model."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    idx = fit_M.spec.indices
    k_s = k[idx] if k.shape[0] == fit_M.data.p_total else k
    z = float(ndtri(1.0 - alpha / 2.0))
    cov = np.linalg.inv(fit_M.fisher_beta)
    se = math.sqrt(float(k_s @ cov @ k_s))
    est = float(k_s @ fit_M.beta_hat_sub)
    return IntervalResult(
        point_estimate=est,
        lower=est - z * se,
        upper=est + z * se,
        alpha=alpha,
        method="naive-1",
        target="combo",
    )


def naive_ci_mixed(fit_M: FittedLMM, target: MixedTarget, alpha: float, order: int = 2) -> IntervalResult:
    """Normal interval for a mixed parameter with first- or second-order MSE."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    z = float(ndtri(1.0 - alpha / 2.0))
    if order == 1:
        g1, g2 = mse_first_order(fit_M, target)
        se = math.sqrt(g1 + g2)
    else:
        se = math.sqrt(mse_second_order(fit_M, target))
    est = predict_mixed(fit_M, target)
    return IntervalResult(
        point_estimate=est,
        lower=est - z * se,
        upper=est + z * se,
        alpha=alpha,
        method=f"naive-{order}",
        target=f"mu[{target.cluster_index}]",
    )
