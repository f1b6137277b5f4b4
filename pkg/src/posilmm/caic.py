"""Conditional AIC with variance-estimation penalty, and model selection.

The criterion for a candidate model is

    cAIC = -2 l^c(beta_hat_m, u_tilde) + 2 rho(theta_hat) + 2 b(theta_hat),

where rho is the effective degrees of freedom of the fitted smoother and b
accounts for the estimation of the variance parameters.  b is a sum of
trace functionals of V, R and their theta-slopes against three moments of
the estimator expansion theta_hat - theta = t* + t** + higher order:

    E(grad_y grad_y' t*_i),  E(t**_i),  E(t*_i t*_j).

The first and third moments follow exactly from the first-order score
representation t* = I^-1 (S - E S): the score statistic is quadratic in y,
so its y-Hessian P V_(j) P and its covariance are available in closed form.
Only the bias term E(t**) needs Monte Carlo; it is estimated from seeded
parametric-bootstrap refits with t* subtracted as a control variate, which
removes the O(n^-1/2) noise component.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg as sla

from .lmm import (
    ClusteredDataset,
    ConvergenceError,
    FitOptions,
    FittedLMM,
    LmmNumericalError,
    ModelSpec,
    NermProfile,
    VarianceParams,
    _fit_general,
    _inv_sym,
    _ModelMatrices,
    _nerm_applicable,
    fit_model,
    nerm_structure,
)

__all__ = [
    "CandidateSet",
    "SelectionResult",
    "SelectOptions",
    "bias_correction_b",
    "caic",
    "select_model",
    "underselection_rate",
]


@dataclass(frozen=True)
class CandidateSet:
    """Ordered candidate models over a shared a+K covariate pool."""

    specs: Sequence[ModelSpec]
    structure_tag: str = "general"  # "nested" | "general"
    a: int = 1

    def __post_init__(self):
        if len(self.specs) == 0:
            raise ValueError("candidate set must be nonempty")
        labels = [s.label for s in self.specs]
        if len(set(labels)) != len(labels):
            raise ValueError("candidate labels must be unique")
        for s in self.specs:
            if not s.included[: self.a].all():
                raise ValueError(f"model {s.label!r} drops a forced covariate")
        if self.structure_tag == "nested":
            for prev, cur in zip(self.specs, self.specs[1:]):
                gain = cur.included & ~prev.included
                if (prev.included & ~cur.included).any() or gain.sum() != 1:
                    raise ValueError("nested candidates must each add exactly one covariate")

    def __len__(self) -> int:
        return len(self.specs)


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of cAIC selection over a candidate set."""

    selected_index: int
    caic_values: np.ndarray
    rho_values: np.ndarray
    b_values: np.ndarray
    fits: Sequence[FittedLMM] = field(repr=False, default=())

    def __post_init__(self):
        vals = np.asarray(self.caic_values, dtype=float)
        if self.selected_index != int(np.argmin(vals)):
            raise ValueError("selected index must be the first cAIC minimiser")

    @property
    def pairwise_differences(self) -> np.ndarray:
        """Trace matrix D[i, j] = cAIC_i - cAIC_j."""
        v = np.asarray(self.caic_values)
        return v[:, None] - v[None, :]


@dataclass(frozen=True)
class SelectOptions:
    method: str = "reml"
    b_method: str = "monte-carlo"  # "monte-carlo" | "zero"
    b_reps: int = 200
    seed: Optional[int] = None
    fit_opts: FitOptions = field(default_factory=FitOptions)


def caic(data: ClusteredDataset, spec: ModelSpec, fit: FittedLMM) -> float:
    """Conditional AIC of a fitted model: -2 l^c + 2 rho_hat + 2 b_hat."""
    if fit.spec is not spec and not np.array_equal(fit.spec.included, spec.included):
        raise ValueError("fit does not correspond to the given model spec")
    return fit.caic


# ---------------------------------------------------------------------------
# Variance-estimation penalty b(theta)
# ---------------------------------------------------------------------------


class _PenaltyWork:
    """Cluster-blockwise trace accumulators at a fixed (model, theta).

    The REML projection P = V^-1 - U A^-1 U' (U = V^-1 X) couples clusters
    only through the p x p matrix A, so every trace reduces to per-cluster
    pieces plus small corrections.
    """

    def __init__(self, data: ClusteredDataset, spec: ModelSpec, params: VarianceParams):
        self.data = data
        self.spec = spec
        self.params = params
        self.mm = _ModelMatrices(data, spec, params)
        st = params.structure
        h = st.h
        cols = spec.indices
        p = cols.shape[0]
        self.h = h

        self.a_inv = _inv_sym(self.mm.xtvx, "X'V^-1X")
        s1 = np.zeros((h, h))  # tr(M_i Vinv V_j Vinv)
        D = np.zeros((h, h, p, p))  # U' M_i Vinv V_j U
        B = np.zeros((h, p, p))  # U' V_j U
        C = np.zeros((h, p, p))  # U' M_i U
        t3 = np.zeros((h, h))  # tr(R_i (Vinv V_j Vinv - Rinv R_j Rinv))
        t2 = np.zeros(h)  # tr(R_i (Rinv - Vinv))
        tr_pv = np.zeros(h)  # tr(P V_j)
        cross = np.zeros((h, h))  # tr(Vinv V_j Vinv V_k) for Cov(S)
        Wc = np.zeros((h, h, p, p))  # U' V_j Vinv V_k U

        for ci, c in enumerate(data.clusters):
            m_i = c.y.shape[0]
            Vinv = self.mm.Vinv[ci]
            R = self.mm.R[ci]
            Rinv = _inv_sym(R, "R(theta)", ci)
            U = Vinv @ c.X[:, cols]
            Vs = [st.r_slope(j, m_i) + c.Z @ st.g_slope(j) @ c.Z.T for j in range(h)]
            Rs = [st.r_slope(j, m_i) for j in range(h)]
            VinvR = Vinv @ R
            Ms = [Rs[i] - Vs[i] @ VinvR - VinvR.T @ Vs[i] for i in range(h)]
            VinvVs = [Vinv @ Vs[j] for j in range(h)]
            for j in range(h):
                B[j] += U.T @ Vs[j] @ U
                tr_pv[j] += float(np.trace(VinvVs[j]))
                t2[j] += float(np.einsum("ab,ba->", Rs[j], Rinv - Vinv))
                for k in range(h):
                    cross[j, k] += float(np.einsum("ab,ba->", VinvVs[j], VinvVs[k]))
                    Wc[j, k] += U.T @ Vs[j] @ VinvVs[k] @ U
            for i in range(h):
                C[i] += U.T @ Ms[i] @ U
                for j in range(h):
                    s1[i, j] += float(np.einsum("ab,ba->", Ms[i] @ Vinv, VinvVs[j].T))
                    D[i, j] += U.T @ Ms[i] @ VinvVs[j] @ U
                    t3[i, j] += float(
                        np.einsum("ab,ba->", Rs[i], VinvVs[j] @ Vinv - Rinv @ Rs[j] @ Rinv)
                    )

        # correct tr(P V_j) for the projection part
        for j in range(h):
            tr_pv[j] -= float(np.trace(self.a_inv @ B[j]))

        self.tr_m_pvp = np.zeros((h, h))  # tr(M_i P V_j P)
        for i in range(h):
            for j in range(h):
                val = s1[i, j]
                val -= float(np.trace(self.a_inv @ (D[i, j] + D[i, j].T)))
                val += float(np.trace(self.a_inv @ B[j] @ self.a_inv @ C[i]))
                self.tr_m_pvp[i, j] = val

        # Cov(S)_jk = tr(P V_j P V_k) / 2
        self.cov_score = np.zeros((h, h))
        for j in range(h):
            for k in range(h):
                val = cross[j, k]
                val -= float(np.trace(self.a_inv @ (Wc[j, k] + Wc[k, j])))
                val += float(np.trace(self.a_inv @ B[j] @ self.a_inv @ B[k]))
                self.cov_score[j, k] = 0.5 * val

        self.t3_traces = t3
        self.t2_coefs = t2
        self.tr_pv = tr_pv

    def score_stats(self, y_batch: np.ndarray, method: str) -> np.ndarray:
        """Scores S_j(y) = (y'P V_j P y - centering_j) / 2 for response columns.

        The centering makes E S = 0 under the model at this theta: tr(P V_j)
        for REML and tr(V^-1 V_j) shifted by the projection bias for ML.
        """
        data, cols, st = self.data, self.spec.indices, self.params.structure
        R = y_batch.shape[1]
        # w = P y computed blockwise with the rank-p correction
        uty = np.zeros((cols.shape[0], R))
        viy_parts = []
        for ci, c in enumerate(data.clusters):
            Vinv = self.mm.Vinv[ci]
            yc = y_batch[self._slice(ci)]
            viy = Vinv @ yc
            viy_parts.append(viy)
            uty += c.X[:, cols].T @ viy
        corr = self.a_inv @ uty
        quads = np.zeros((self.h, R))
        for ci, c in enumerate(data.clusters):
            Vinv = self.mm.Vinv[ci]
            U = Vinv @ c.X[:, cols]
            w = viy_parts[ci] - U @ corr
            m_i = c.y.shape[0]
            for j in range(self.h):
                Vj = st.r_slope(j, m_i) + c.Z @ st.g_slope(j) @ c.Z.T
                quads[j] += np.einsum("mr,mk,kr->r", w, Vj, w)
        center = self.tr_pv  # E[y'PVjPy] = tr(PVjPV) = tr(PVj) regardless of method
        return 0.5 * (quads - center[:, None])

    def _slice(self, ci: int):
        sizes = self.data.cluster_sizes
        start = int(sizes[:ci].sum())
        return slice(start, start + int(sizes[ci]))


@dataclass(frozen=True)
class BiasCorrectionDetail:
    """Decomposition of the penalty b for diagnostics."""

    value: float
    hessian_term: float
    bias_term: float
    covariance_term: float
    n_failed: int
    reps: int


def bias_correction_b(
    data: ClusteredDataset,
    spec: ModelSpec,
    theta_hat: VarianceParams,
    method: str = "monte-carlo",
    reps: int = 200,
    seed: Optional[int] = None,
    estimator: str = "reml",
    info_theta: Optional[np.ndarray] = None,
) -> float:
    """Penalty b(theta_hat) for estimating the variance parameters.

    method "zero" returns 0 (the known-variance criterion); "monte-carlo"
    evaluates the trace functionals exactly and estimates the remaining
    estimator-bias moment from `reps` parametric-bootstrap refits.

    Raises:
        RuntimeError: if more than 5% of the bootstrap refits fail.
    """
    if method == "zero":
        return 0.0
    if method != "monte-carlo":
        raise ValueError("method must be 'monte-carlo' or 'zero'")
    return bias_correction_detail(data, spec, theta_hat, reps, seed, estimator, info_theta).value


def bias_correction_detail(
    data: ClusteredDataset,
    spec: ModelSpec,
    theta_hat: VarianceParams,
    reps: int = 200,
    seed: Optional[int] = None,
    estimator: str = "reml",
    info_theta: Optional[np.ndarray] = None,
) -> BiasCorrectionDetail:
    work = _PenaltyWork(data, spec, theta_hat)
    h = work.h
    info = info_theta if info_theta is not None else _theta_info_for(data, spec, theta_hat, estimator)
    info_inv = _inv_sym(info, "theta information")

    # E(grad grad' t*_i) couples through I^-1; contract against M_i traces
    t1 = -0.5 * float(np.einsum("ij,ij->", info_inv, work.tr_m_pvp))
    # E(t* t*') = I^-1 Cov(S) I^-1
    cov_tstar = info_inv @ work.cov_score @ info_inv
    t3 = -float(np.einsum("ij,ij->", cov_tstar, work.t3_traces))

    bias2, n_failed = _bootstrap_theta_bias(data, spec, theta_hat, reps, seed, estimator, work, info_inv)
    if n_failed > 0.05 * reps:
        raise RuntimeError(
            f"{n_failed}/{reps} bootstrap refits failed while estimating the cAIC penalty"
        )
    t2 = -float(work.t2_coefs @ bias2)

    return BiasCorrectionDetail(
        value=t1 + t2 + t3,
        hessian_term=t1,
        bias_term=t2,
        covariance_term=t3,
        n_failed=n_failed,
        reps=reps,
    )


def _theta_info_for(data, spec, params, estimator):
    from .lmm import theta_information

    return theta_information(data, spec, params, method=estimator)


def _bootstrap_theta_bias(data, spec, theta_hat, reps, seed, estimator, work, info_inv):
    """E(t**) estimated as mean of refit deltas with the score term removed."""
    rng = np.random.default_rng(seed)
    y_batch = _draw_model_responses(data, work, rng, reps)
    theta_star = _refit_batch(data, spec, theta_hat, estimator, y_batch)
    ok = np.all(np.isfinite(theta_star), axis=1)
    n_failed = int((~ok).sum())
    deltas = theta_star[ok] - theta_hat.theta[None, :]
    scores = work.score_stats(y_batch[:, ok], estimator)  # (h, R_ok)
    first_order = (info_inv @ scores).T
    resid = deltas - first_order
    return resid.mean(axis=0), n_failed


def _draw_model_responses(data, work, rng, reps) -> np.ndarray:
    """Draws from N(0, V(theta)); the estimator is mean-shift invariant."""
    out = np.empty((data.m, reps))
    for ci in range(data.n):
        V_c = work.mm.V[ci]
        L = np.linalg.cholesky(V_c)
        out[work._slice(ci)] = L @ rng.standard_normal((V_c.shape[0], reps))
    return out


def _refit_batch(data, spec, theta_hat, estimator, y_batch) -> np.ndarray:
    """theta_hat(y*) for each column of y_batch (vectorised for NERM)."""
    reps = y_batch.shape[1]
    if _nerm_applicable(data, theta_hat.structure):
        prof = NermProfile(data, spec.indices)
        xty, t, yty = prof.y_stats(y_batch)
        psi, se2 = prof.fit_psi(xty, t, yty, reml=(estimator == "reml"))
        theta = np.column_stack([psi * se2, se2])
        theta[se2 <= 0] = np.nan
        return theta
    from .lmm import Cluster

    out = np.full((reps, theta_hat.structure.h), np.nan)
    for b in range(reps):
        clusters = []
        start = 0
        for c in data.clusters:
            m_i = c.y.shape[0]
            clusters.append(Cluster(y=y_batch[start : start + m_i, b], X=c.X, Z=c.Z))
            start += m_i
        data_b = ClusteredDataset(clusters, a=data.a, intercept=data.intercept)
        try:
            theta_b, *_ = _fit_general(
                data_b, spec, estimator, FitOptions(theta_init=theta_hat.theta), theta_hat.structure
            )
            out[b] = theta_b
        except (LmmNumericalError, ConvergenceError, ValueError):
            pass
    return out


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------


def select_model(
    data: ClusteredDataset,
    candidates: CandidateSet,
    opts: Optional[SelectOptions] = None,
) -> SelectionResult:
    """Fit every candidate, attach its penalty, and take the cAIC argmin.

    Exact ties go to the smaller model order (first index among minimisers).
    Fit failures are re-raised with the offending candidate's label.
    """
    opts = opts or SelectOptions()
    seeds = _spawn_seeds(opts.seed, len(candidates))
    fits = []
    for spec, s in zip(candidates.specs, seeds):
        try:
            fit = fit_model(data, spec, method=opts.method, opts=opts.fit_opts)
            if opts.b_method != "zero":
                b_hat = bias_correction_b(
                    data,
                    spec,
                    fit.theta_hat,
                    method=opts.b_method,
                    reps=opts.b_reps,
                    seed=s,
                    estimator=opts.method,
                    info_theta=fit.info_theta,
                )
                fit = fit.with_bias_correction(b_hat)
        except Exception as exc:
            raise RuntimeError(f"candidate {spec.label!r} failed: {exc}") from exc
        fits.append(fit)
    caic_values = np.array([f.caic for f in fits])
    selected = int(np.argmin(caic_values))
    return SelectionResult(
        selected_index=selected,
        caic_values=caic_values,
        rho_values=np.array([f.rho_hat for f in fits]),
        b_values=np.array([f.b_hat for f in fits]),
        fits=tuple(fits),
    )


def _spawn_seeds(seed, count):
    if seed is None:
        return [None] * count
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def underselection_rate(scenario, candidates: CandidateSet, reps: int, seed: int) -> float:
    """Empirical frequency of selecting a model missing a true covariate."""
    from .simulation import generate_nerm  # local import; simulation uses select_model

    truth_mask = np.asarray(scenario.beta_true) != 0.0
    seeds = np.random.SeedSequence(seed).spawn(reps)
    under = 0
    for s in seeds:
        data_seed, b_seed = (int(c.generate_state(1)[0]) for c in s.spawn(2))
        data = generate_nerm(scenario, data_seed)
        result = select_model(
            data,
            candidates,
            SelectOptions(
                b_method=scenario.b_method,
                b_reps=scenario.b_reps,
                seed=b_seed,
            ),
        )
        mask = candidates.specs[result.selected_index].included
        if (truth_mask & ~mask).any():
            under += 1
    return under / reps
