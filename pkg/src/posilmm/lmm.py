"""Linear mixed model core: likelihoods, mixed-model equations, dof, MSE.

Implements the clustered Gaussian linear mixed model

    y_i = X_i beta + Z_i u_i + e_i,   u_i ~ N_q(0, G_q(theta)),
                                      e_i ~ N_{m_i}(0, R_i(theta)),

with independent clusters i = 1..n and variance matrices linear in the
parameter vector theta.  All heavy operations work cluster-blockwise;
V = R + Z G Z' is never assembled densely except in test oracles.

Provides REML/ML fitting with beta profiled out, the mixed-model
(Henderson) solver for (beta, u), the effective degrees of freedom
rho = tr(H) of the smoother mapping y to fitted values, the joint
coefficient information matrix K with its inverse blocks, and first-
and second-order correct MSE estimators for mixed parameters.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg as sla
from scipy import optimize

__all__ = [
    "Cluster",
    "ClusteredDataset",
    "VarianceStructure",
    "nerm_structure",
    "VarianceParams",
    "ModelSpec",
    "MixedTarget",
    "FittedLMM",
    "KMatrices",
    "FitOptions",
    "LmmNumericalError",
    "ConvergenceError",
    "marginal_loglik",
    "conditional_loglik",
    "random_effect_loglik",
    "extended_loglik",
    "solve_henderson",
    "effective_dof",
    "build_k_matrix",
    "fit_model",
    "predict_mixed",
    "mse_first_order",
    "mse_second_order",
    "mse_components",
    "theta_information",
    "sym_inv_sqrt",
    "sym_sqrt",
]

# Condition-number guards for symmetric solves.
COND_WARN = 1e10
COND_ERROR = 1e14


class LmmNumericalError(RuntimeError):
    """Singular or numerically unusable matrix, with offending cluster."""

    def __init__(self, message: str, cluster: Optional[int] = None):
        if cluster is not None:
            message = f"{message} (cluster {cluster})"
        super().__init__(message)
        self.cluster = cluster


class ConvergenceError(RuntimeError):
    """Variance-parameter optimisation failed to converge."""


# ---------------------------------------------------------------------------
# Symmetric linear algebra helpers
# ---------------------------------------------------------------------------


def _guarded_cho_factor(mat: np.ndarray, what: str, cluster: Optional[int] = None):
    """Cholesky-factor a symmetric matrix with a condition-number guard."""
    mat = np.asarray(mat, dtype=float)
    try:
        cho = sla.cho_factor((mat + mat.T) / 2.0, lower=True)
    except sla.LinAlgError as exc:
        raise LmmNumericalError(f"{what} is not positive definite", cluster) from exc
    diag = np.diag(cho[0])
    cond = (diag.max() / diag.min()) ** 2 if diag.min() > 0 else np.inf
    if cond > COND_ERROR:
        raise LmmNumericalError(f"{what} condition number {cond:.2e} above guard", cluster)
    if cond > COND_WARN:
        warnings.warn(f"{what}: condition number {cond:.2e} exceeds 1e10", RuntimeWarning)
    return cho


def _solve_sym(mat: np.ndarray, rhs: np.ndarray, what: str, cluster: Optional[int] = None) -> np.ndarray:
    return sla.cho_solve(_guarded_cho_factor(mat, what, cluster), rhs)


def _inv_sym(mat: np.ndarray, what: str, cluster: Optional[int] = None) -> np.ndarray:
    eye = np.eye(mat.shape[0])
    return sla.cho_solve(_guarded_cho_factor(mat, what, cluster), eye)


def sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition (tiny negatives clipped)."""
    mat = np.asarray(mat, dtype=float)
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < -1e-8 * max(1.0, abs(vals).max()):
        raise LmmNumericalError("matrix is not positive semidefinite; cannot take square root")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def sym_inv_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix."""
    mat = np.asarray(mat, dtype=float)
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() <= 0:
        raise LmmNumericalError("matrix is not positive definite; cannot invert square root")
    if vals.max() / vals.min() > COND_ERROR:
        raise LmmNumericalError("matrix condition number above guard in inverse square root")
    return (vecs / np.sqrt(vals)) @ vecs.T


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cluster:
    """One cluster's response and design blocks."""

    y: np.ndarray  # (m_i,)
    X: np.ndarray  # (m_i, a+K)
    Z: np.ndarray  # (m_i, q)

    def __post_init__(self):
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        object.__setattr__(self, "X", np.atleast_2d(np.asarray(self.X, dtype=float)))
        object.__setattr__(self, "Z", np.atleast_2d(np.asarray(self.Z, dtype=float)))
        if self.y.ndim != 1:
            raise ValueError("cluster response must be a vector")
        m = self.y.shape[0]
        if m < 1:
            raise ValueError("cluster must contain at least one unit")
        if self.X.shape[0] != m or self.Z.shape[0] != m:
            raise ValueError("cluster design row counts must match the response length")


@dataclass(frozen=True)
class ClusteredDataset:
    """Clustered data (y_i, X_i, Z_i) with a forced-covariate prefix.

    Attributes:
        clusters: per-cluster blocks; X_i has a+K columns, Z_i has q columns.
        a: number of always-included covariates (leading X columns).
        intercept: whether column 1 of X is declared to be the intercept.
    """

    clusters: Sequence[Cluster]
    a: int = 1
    intercept: bool = True

    def __post_init__(self):
        if len(self.clusters) == 0:
            raise ValueError("dataset must contain at least one cluster")
        p = self.clusters[0].X.shape[1]
        q = self.clusters[0].Z.shape[1]
        for i, c in enumerate(self.clusters):
            if c.X.shape[1] != p or c.Z.shape[1] != q:
                raise ValueError(f"cluster {i} has inconsistent design dimensions")
        if not 0 <= self.a <= p:
            raise ValueError("forced-covariate count a must lie in [0, a+K]")
        X = self.stack_x()
        if np.linalg.matrix_rank(X) < p:
            raise ValueError("stacked fixed-effect design is rank deficient")
        if self.intercept and not np.allclose(X[:, 0], 1.0):
            raise ValueError("column 1 of X declared as intercept but is not constant one")

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def m(self) -> int:
        return sum(c.y.shape[0] for c in self.clusters)

    @property
    def p_total(self) -> int:
        """Total fixed-effect columns a+K."""
        return self.clusters[0].X.shape[1]

    @property
    def K(self) -> int:
        return self.p_total - self.a

    @property
    def q(self) -> int:
        return self.clusters[0].Z.shape[1]

    @property
    def r(self) -> int:
        return self.n * self.q

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.array([c.y.shape[0] for c in self.clusters])

    def stack_y(self) -> np.ndarray:
        return np.concatenate([c.y for c in self.clusters])

    def stack_x(self, cols: Optional[np.ndarray] = None) -> np.ndarray:
        X = np.vstack([c.X for c in self.clusters])
        return X if cols is None else X[:, cols]

    def stack_z(self) -> np.ndarray:
        """Block-diagonal stacked random-effect design (m x nq). Test-scale only."""
        blocks = [c.Z for c in self.clusters]
        return sla.block_diag(*blocks)


@dataclass(frozen=True)
class VarianceStructure:
    """Variance matrices linear in theta: G_q = sum_j theta_j Gs_j and
    R_i = sum_j theta_j Rs_j(m_i)."""

    h: int
    q: int
    g_slopes: Sequence[np.ndarray]  # h matrices (q, q)
    r_slope_builders: Sequence[Callable[[int], np.ndarray]]  # h builders m_i -> (m_i, m_i)
    tag: str = "general-linear-in-theta"
    nonneg: Optional[np.ndarray] = None  # per-component lower bound at zero

    def g_matrix(self, theta: np.ndarray) -> np.ndarray:
        return sum(t * gs for t, gs in zip(theta, self.g_slopes))

    def r_matrix(self, theta: np.ndarray, m_i: int) -> np.ndarray:
        return sum(t * rb(m_i) for t, rb in zip(theta, self.r_slope_builders))

    def g_slope(self, j: int) -> np.ndarray:
        return self.g_slopes[j]

    def r_slope(self, j: int, m_i: int) -> np.ndarray:
        return self.r_slope_builders[j](m_i)


def nerm_structure() -> VarianceStructure:
    """Random-intercept structure: theta = (sigma2_u, sigma2_e), q = 1."""
    return VarianceStructure(
        h=2,
        q=1,
        g_slopes=[np.array([[1.0]]), np.array([[0.0]])],
        r_slope_builders=[lambda m: np.zeros((m, m)), lambda m: np.eye(m)],
        tag="nerm",
        nonneg=np.array([True, True]),
    )


@dataclass(frozen=True)
class VarianceParams:
    """A point theta in the variance-parameter space plus its structure.

    For the random-intercept (NERM) structure theta = (sigma2_u, sigma2_e);
    sigma2_u = 0 is the admissible boundary and is flagged, sigma2_e must be
    strictly positive.
    """

    theta: np.ndarray
    structure: VarianceStructure

    def __post_init__(self):
        object.__setattr__(self, "theta", np.atleast_1d(np.asarray(self.theta, dtype=float)))
        if self.theta.shape[0] != self.structure.h:
            raise ValueError("theta length does not match structure dimension")
        if self.structure.tag == "nerm":
            if self.theta[1] <= 0:
                raise ValueError("sigma2_e must be strictly positive")
            if self.theta[0] < 0:
                raise ValueError("sigma2_u must be nonnegative")

    @property
    def at_boundary(self) -> bool:
        scale = max(abs(self.theta).max(), 1e-300)
        return bool((self.theta <= 1e-12 * scale).any())

    def g_matrix(self) -> np.ndarray:
        return self.structure.g_matrix(self.theta)

    def r_matrix(self, m_i: int) -> np.ndarray:
        return self.structure.r_matrix(self.theta, m_i)


@dataclass(frozen=True)
class ModelSpec:
    """Candidate model: boolean inclusion mask over the a+K covariates."""

    included: np.ndarray
    label: str = ""

    def __post_init__(self):
        mask = np.atleast_1d(np.asarray(self.included, dtype=bool))
        object.__setattr__(self, "included", mask)
        if not mask.any():
            raise ValueError("model must include at least one covariate")

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.included)

    @property
    def size(self) -> int:
        return int(self.included.sum())

    def validate_against(self, data: ClusteredDataset) -> None:
        if self.included.shape[0] != data.p_total:
            raise ValueError("model mask length does not match the dataset covariate count")
        if not self.included[: data.a].all():
            raise ValueError("first a covariates are forced and must be included")


@dataclass(frozen=True)
class MixedTarget:
    """Mixed parameter k'beta + m'u_i for one cluster."""

    k: np.ndarray
    m: np.ndarray
    cluster_index: int

    def __post_init__(self):
        object.__setattr__(self, "k", np.atleast_1d(np.asarray(self.k, dtype=float)))
        object.__setattr__(self, "m", np.atleast_1d(np.asarray(self.m, dtype=float)))

    @property
    def c(self) -> np.ndarray:
        return np.concatenate([self.k, self.m])

    def validate_against(self, data: ClusteredDataset) -> None:
        if not 0 <= self.cluster_index < data.n:
            raise ValueError("cluster index out of range")
        if self.k.shape[0] != data.p_total or self.m.shape[0] != data.q:
            raise ValueError("target coefficient lengths do not match the dataset")


@dataclass(frozen=True)
class KMatrices:
    """Joint coefficient information K = C' R^-1 C + G^+ and its inverse blocks."""

    K: Optional[np.ndarray]  # (p+r, p+r); None at the G-singular boundary
    inv_11: np.ndarray  # (p, p)   = (X' V^-1 X)^-1
    inv_12: np.ndarray  # (p, r)
    inv_21: np.ndarray  # (r, p)
    inv_22: np.ndarray  # (r, r)

    @property
    def inverse(self) -> np.ndarray:
        top = np.hstack([self.inv_11, self.inv_12])
        bot = np.hstack([self.inv_21, self.inv_22])
        return np.vstack([top, bot])


@dataclass(frozen=True)
class FitOptions:
    """Optimiser controls for variance-parameter estimation."""

    max_iter: int = 200
    rel_tol: float = 1e-10
    grad_tol: float = 1e-6
    theta_init: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FittedLMM:
    """A fitted candidate model with all derived quantities.

    beta_hat is padded with zeros to the full a+K length; beta_hat_sub holds
    the coefficients of the included covariates only.  fisher_beta and
    hessian_conditional are the unnormalised X'V^-1 X and X'R^-1 X of the
    included covariates; the per-cluster-count normalised versions are exposed
    as info_marginal and jc_normalized.
    """

    data: ClusteredDataset
    spec: ModelSpec
    method: str
    theta_hat: VarianceParams
    beta_hat: np.ndarray
    u_tilde: np.ndarray
    loglik_marginal: float
    loglik_conditional: float
    rho_hat: float
    fisher_beta: np.ndarray
    hessian_conditional: np.ndarray
    info_theta: np.ndarray
    k_matrices: KMatrices
    b_hat: float = 0.0
    boundary: bool = False
    converged: bool = True
    n_iter: int = 0
    grad_norm: float = float("nan")
    loglik_restricted: Optional[float] = None

    @property
    def beta_hat_sub(self) -> np.ndarray:
        return self.beta_hat[self.spec.indices]

    @property
    def info_marginal(self) -> np.ndarray:
        return self.fisher_beta / self.data.n

    @property
    def jc_normalized(self) -> np.ndarray:
        return self.hessian_conditional / self.data.n

    @property
    def caic(self) -> float:
        return -2.0 * self.loglik_conditional + 2.0 * (self.rho_hat + self.b_hat)

    def with_bias_correction(self, b_hat: float) -> "FittedLMM":
        return replace(self, b_hat=float(b_hat))


# ---------------------------------------------------------------------------
# Blockwise model matrices
# ---------------------------------------------------------------------------


class _ModelMatrices:
    """Per-cluster variance matrices and GLS accumulators at fixed theta."""

    def __init__(self, data: ClusteredDataset, spec: ModelSpec, params: VarianceParams):
        spec.validate_against(data)
        self.data = data
        self.spec = spec
        self.params = params
        self.cols = spec.indices
        q = data.q

        self.G = params.g_matrix()
        g_eigs = np.linalg.eigvalsh((self.G + self.G.T) / 2.0)
        if g_eigs.min() < -1e-10 * max(1.0, abs(g_eigs).max()):
            raise LmmNumericalError("G(theta) is not positive semidefinite")
        self.g_singular = bool(g_eigs.min() <= 1e-12 * max(g_eigs.max(), 1e-300))

        self.R = []
        self.V = []
        self.V_cho = []
        self.Vinv = []
        self.logdet_v = 0.0
        for i, c in enumerate(data.clusters):
            m_i = c.y.shape[0]
            R_i = params.r_matrix(m_i)
            V_i = R_i + c.Z @ self.G @ c.Z.T
            cho = _guarded_cho_factor(V_i, "V(theta)", cluster=i)
            self.R.append(R_i)
            self.V.append(V_i)
            self.V_cho.append(cho)
            self.Vinv.append(sla.cho_solve(cho, np.eye(m_i)))
            self.logdet_v += 2.0 * np.log(np.diag(cho[0])).sum()

        p = self.cols.shape[0]
        A = np.zeros((p, p))
        bvec = np.zeros(p)
        yvy = 0.0
        for c, Vinv in zip(data.clusters, self.Vinv):
            Xs = c.X[:, self.cols]
            VX = Vinv @ Xs
            A += Xs.T @ VX
            bvec += VX.T @ c.y
            yvy += float(c.y @ Vinv @ c.y)
        self.xtvx = A
        self.xtvy = bvec
        self.ytvy = yvy

    def beta_gls(self) -> np.ndarray:
        return _solve_sym(self.xtvx, self.xtvy, "X'V^-1X")

    def u_blup(self, beta_sub: np.ndarray) -> np.ndarray:
        """u_i = G Z_i' V_i^-1 (y_i - X_i beta), stacked cluster-major."""
        parts = []
        for c, Vinv in zip(self.data.clusters, self.Vinv):
            resid = c.y - c.X[:, self.cols] @ beta_sub
            parts.append(self.G @ c.Z.T @ (Vinv @ resid))
        return np.concatenate(parts)

    def gls_deviance(self) -> float:
        """-2 max_beta l^m at this theta (profiled marginal deviance)."""
        beta = self.beta_gls()
        rss = self.ytvy - float(self.xtvy @ beta)
        return self.data.m * math.log(2 * math.pi) + self.logdet_v + rss


def _r_inverse(R_i: np.ndarray, cluster: int) -> np.ndarray:
    return _inv_sym(R_i, "R(theta)", cluster)


# ---------------------------------------------------------------------------
# Likelihoods
# ---------------------------------------------------------------------------


def marginal_loglik(
    data: ClusteredDataset, spec: ModelSpec, params: VarianceParams, beta: np.ndarray
) -> float:
    """Marginal Gaussian log-likelihood of y at (beta, theta).

    beta may be given either on the included covariates (length |M|) or
    padded to length a+K; computed cluster-blockwise.
    """
    spec.validate_against(data)
    beta_sub = _as_sub_beta(beta, spec)
    cols = spec.indices
    ll = 0.0
    for i, c in enumerate(data.clusters):
        m_i = c.y.shape[0]
        V_i = params.r_matrix(m_i) + c.Z @ params.g_matrix() @ c.Z.T
        cho = _guarded_cho_factor(V_i, "V(theta)", cluster=i)
        resid = c.y - c.X[:, cols] @ beta_sub
        quad = float(resid @ sla.cho_solve(cho, resid))
        logdet = 2.0 * np.log(np.diag(cho[0])).sum()
        ll += -0.5 * (m_i * math.log(2 * math.pi) + logdet + quad)
    return ll


def conditional_loglik(
    data: ClusteredDataset,
    spec: ModelSpec,
    params: VarianceParams,
    beta: np.ndarray,
    u: np.ndarray,
) -> float:
    """Conditional log-likelihood of y given u (the f(y|u) part)."""
    spec.validate_against(data)
    beta_sub = _as_sub_beta(beta, spec)
    cols = spec.indices
    u = np.asarray(u, dtype=float)
    if u.shape[0] != data.r:
        raise ValueError("u must have length n*q")
    q = data.q
    ll = 0.0
    for i, c in enumerate(data.clusters):
        m_i = c.y.shape[0]
        R_i = params.r_matrix(m_i)
        cho = _guarded_cho_factor(R_i, "R(theta)", cluster=i)
        u_i = u[i * q : (i + 1) * q]
        resid = c.y - c.X[:, cols] @ beta_sub - c.Z @ u_i
        quad = float(resid @ sla.cho_solve(cho, resid))
        logdet = 2.0 * np.log(np.diag(cho[0])).sum()
        ll += -0.5 * (m_i * math.log(2 * math.pi) + logdet + quad)
    return ll


def random_effect_loglik(data: ClusteredDataset, params: VarianceParams, u: np.ndarray) -> float:
    """Log-density of the stacked random effects u under N(0, diag_n(G_q))."""
    u = np.asarray(u, dtype=float)
    q = data.q
    G = params.g_matrix()
    cho = _guarded_cho_factor(G, "G(theta)")
    logdet = 2.0 * np.log(np.diag(cho[0])).sum()
    ll = 0.0
    for i in range(data.n):
        u_i = u[i * q : (i + 1) * q]
        ll += -0.5 * (q * math.log(2 * math.pi) + logdet + float(u_i @ sla.cho_solve(cho, u_i)))
    return ll


def extended_loglik(
    data: ClusteredDataset,
    spec: ModelSpec,
    params: VarianceParams,
    beta: np.ndarray,
    u: np.ndarray,
) -> float:
    """Extended log-likelihood: conditional part plus random-effect part."""
    return conditional_loglik(data, spec, params, beta, u) + random_effect_loglik(data, params, u)


def _as_sub_beta(beta: np.ndarray, spec: ModelSpec) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape[0] == spec.included.shape[0]:
        return beta[spec.indices]
    if beta.shape[0] == spec.size:
        return beta
    raise ValueError("beta length matches neither the full nor the included covariate count")


# ---------------------------------------------------------------------------
# Mixed-model equations, dof, K matrix
# ---------------------------------------------------------------------------


def solve_henderson(
    data: ClusteredDataset, spec: ModelSpec, params: VarianceParams
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the mixed-model equations for (beta_tilde, u_tilde).

    At the G-singular boundary the equivalent GLS route is used, since the
    coefficient matrix needs G^-1.  beta_tilde equals the GLS estimator
    (X'V^-1X)^-1 X'V^-1 y in either case.
    """
    mm = _ModelMatrices(data, spec, params)
    if mm.g_singular:
        beta = mm.beta_gls()
        return beta, mm.u_blup(beta)
    km = build_k_matrix(data, spec, params, _mm=mm)
    rhs = _ctrinv_y(data, spec, params)
    try:
        sol = _solve_sym(km.K, rhs, "mixed-model coefficient matrix")
    except LmmNumericalError as exc:
        raise LmmNumericalError(f"rank-deficient mixed-model equations: {exc}") from exc
    p = spec.size
    return sol[:p], sol[p:]


def _ctrinv_y(data: ClusteredDataset, spec: ModelSpec, params: VarianceParams) -> np.ndarray:
    cols = spec.indices
    top = np.zeros(cols.shape[0])
    bottoms = []
    for i, c in enumerate(data.clusters):
        Rinv = _r_inverse(params.r_matrix(c.y.shape[0]), i)
        ry = Rinv @ c.y
        top += c.X[:, cols].T @ ry
        bottoms.append(c.Z.T @ ry)
    return np.concatenate([top, np.concatenate(bottoms)])


def build_k_matrix(
    data: ClusteredDataset,
    spec: ModelSpec,
    params: VarianceParams,
    _mm: Optional[_ModelMatrices] = None,
) -> KMatrices:
    """Assemble K = C'R^-1C + G^+ (C = [X Z]) and its inverse blocks.

    The inverse blocks use F_i = G - G Z_i' V_i^-1 Z_i G, which stays finite
    at the sigma2_u = 0 boundary; K itself is None there (needs G^-1).
    """
    mm = _mm if _mm is not None else _ModelMatrices(data, spec, params)
    cols = spec.indices
    p = cols.shape[0]
    q = data.q
    n = data.n
    r = n * q
    G = mm.G

    a_inv = _inv_sym(mm.xtvx, "X'V^-1X")
    # B = X'V^-1 Z G laid out cluster-major (p x r)
    B = np.zeros((p, r))
    F_blocks = []
    for i, c in enumerate(data.clusters):
        Vinv = mm.Vinv[i]
        Xs = c.X[:, cols]
        B[:, i * q : (i + 1) * q] = Xs.T @ Vinv @ c.Z @ G
        F_blocks.append(G - G @ c.Z.T @ Vinv @ c.Z @ G)
    inv_12 = -a_inv @ B
    inv_21 = inv_12.T
    inv_22 = sla.block_diag(*F_blocks) + B.T @ a_inv @ B

    K_full = None
    if not mm.g_singular:
        g_inv = _inv_sym(G, "G(theta)")
        k11 = np.zeros((p, p))
        k12 = np.zeros((p, r))
        k22 = np.zeros((r, r))
        for i, c in enumerate(data.clusters):
            Rinv = _r_inverse(mm.R[i], i)
            Xs = c.X[:, cols]
            k11 += Xs.T @ Rinv @ Xs
            k12[:, i * q : (i + 1) * q] = Xs.T @ Rinv @ c.Z
            k22[i * q : (i + 1) * q, i * q : (i + 1) * q] = c.Z.T @ Rinv @ c.Z + g_inv
        K_full = np.block([[k11, k12], [k12.T, k22]])

    return KMatrices(K=K_full, inv_11=a_inv, inv_12=inv_12, inv_21=inv_21, inv_22=inv_22)


def effective_dof(data: ClusteredDataset, spec: ModelSpec, params: VarianceParams) -> float:
    """Effective degrees of freedom rho = tr(H), H the map y -> fitted values.

    Uses tr(H) = tr(ZGZ'V^-1) + tr[(X'V^-1X)^-1 X'V^-1 R V^-1 X]; satisfies
    a + K_M <= rho <= a + K_M + nq.
    """
    mm = _ModelMatrices(data, spec, params)
    return _effective_dof_from_mm(mm)


def _effective_dof_from_mm(mm: _ModelMatrices) -> float:
    cols = mm.cols
    shrink = 0.0
    C = np.zeros_like(mm.xtvx)
    for c, Vinv, R_i in zip(mm.data.clusters, mm.Vinv, mm.R):
        ZG = c.Z @ mm.G
        shrink += float(np.trace(ZG @ (c.Z.T @ Vinv)))
        VX = Vinv @ c.X[:, cols]
        C += VX.T @ R_i @ VX
    a_inv = _inv_sym(mm.xtvx, "X'V^-1X")
    return shrink + float(np.trace(a_inv @ C))


# ---------------------------------------------------------------------------
# theta estimation
# ---------------------------------------------------------------------------


def _nerm_applicable(data: ClusteredDataset, structure: VarianceStructure) -> bool:
    if structure.tag != "nerm" or data.q != 1:
        return False
    return all(np.allclose(c.Z, 1.0) for c in data.clusters)


class NermProfile:
    """Sufficient statistics for the random-intercept model on one design.

    Everything needed to evaluate the profiled REML/ML deviance in the
    variance ratio psi = sigma2_u / sigma2_e, for the original response and
    for whole batches of replacement responses (parametric-bootstrap refits
    reuse the design-side cross-products).
    """

    _GRID = np.concatenate([[0.0], np.logspace(-4.0, 4.0, 25)])

    def __init__(self, data: ClusteredDataset, cols: np.ndarray):
        self.m_sizes = data.cluster_sizes.astype(float)
        self.n = data.n
        self.m = data.m
        X = data.stack_x(cols)
        self.p = X.shape[1]
        self.X = X
        self.xtx = X.T @ X
        # per-cluster column sums of X (n x p) and offsets for cluster sums
        self.offsets = np.concatenate([[0], np.cumsum(data.cluster_sizes)])
        self.s = np.add.reduceat(X, self.offsets[:-1], axis=0)
        self.s_outer = np.einsum("ni,nj->nij", self.s, self.s).reshape(self.n, -1)

    def y_stats(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cross products for columns of y (m,) or (m, R)."""
        y2 = y if y.ndim == 2 else y[:, None]
        xty = self.X.T @ y2  # (p, R)
        t = np.add.reduceat(y2, self.offsets[:-1], axis=0)  # (n, R)
        yty = np.einsum("mr,mr->r", y2, y2)
        return xty, t, yty

    def criterion(self, psi, xty, t, yty, reml: bool):
        """Profiled deviance (up to an additive constant) at psi >= 0.

        psi may be a scalar (shared across response columns) or an (R,)
        vector; returns (crit, sigma2_e, beta) with matching shapes.
        """
        if np.ndim(psi) == 0:
            crit, se2, beta = self._crit_scalar(float(psi), xty, t, yty, reml)
            return crit, se2, beta
        return self._crit_vector(np.asarray(psi, dtype=float), xty, t, yty, reml)

    def _crit_scalar(self, psi, xty, t, yty, reml):
        """Shared design matrices: one p x p factorisation for the batch."""
        ci = psi / (1.0 + psi * self.m_sizes)  # (n,)
        A = self.xtx - (ci @ self.s_outer).reshape(self.p, self.p)
        bvec = xty - self.s.T @ (ci[:, None] * t)  # (p, R)
        quad = yty - ci @ (t * t)
        sign, logdet_a = np.linalg.slogdet(A)
        if sign <= 0:
            R = xty.shape[1]
            return np.full(R, np.inf), np.full(R, np.nan), None
        beta = np.linalg.solve(A, bvec)  # (p, R)
        rss = quad - np.einsum("pr,pr->r", bvec, beta)
        logdet_v = float(np.log1p(psi * self.m_sizes).sum())
        dof = self.m - self.p if reml else self.m
        crit = dof * np.log(np.maximum(rss, 1e-300)) + logdet_v
        if reml:
            crit = crit + logdet_a
        crit = np.where(rss <= 0, np.inf, crit)
        return crit, rss / dof, beta.T

    def _crit_vector(self, psi_v, xty, t, yty, reml):
        """Per-response psi values (golden-section refinement stage)."""
        ci = psi_v[:, None] / (1.0 + psi_v[:, None] * self.m_sizes[None, :])  # (R, n)
        A = self.xtx[None] - (ci @ self.s_outer).reshape(-1, self.p, self.p)
        bvec = xty.T - (ci * t.T) @ self.s  # (R, p)
        quad = yty - np.einsum("rn,rn->r", ci, (t * t).T)
        sign, logdet_a = np.linalg.slogdet(A)
        beta = np.linalg.solve(A, bvec[:, :, None])[:, :, 0]
        rss = quad - np.einsum("ri,ri->r", bvec, beta)
        logdet_v = np.log1p(psi_v[:, None] * self.m_sizes[None, :]).sum(axis=1)
        dof = self.m - self.p if reml else self.m
        crit = dof * np.log(np.maximum(rss, 1e-300)) + logdet_v
        if reml:
            crit = crit + logdet_a
        crit = np.where((sign <= 0) | (rss <= 0), np.inf, crit)
        return crit, rss / dof, beta

    def fit_psi(self, xty, t, yty, reml: bool) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised profiled fit over a batch of responses.

        Grid localisation on psi (including the boundary 0) followed by
        golden-section refinement; returns (psi_hat, sigma2_e_hat).
        """
        grid = self._GRID
        crits = np.stack([self._crit_scalar(g, xty, t, yty, reml)[0] for g in grid])  # (G, R)
        best = np.argmin(crits, axis=0)
        lo = grid[np.maximum(best - 1, 0)]
        hi = grid[np.minimum(best + 1, grid.shape[0] - 1)]
        hi = np.where(best == grid.shape[0] - 1, grid[-1] * 10.0, hi)
        invphi = (math.sqrt(5.0) - 1.0) / 2.0
        x1 = hi - invphi * (hi - lo)
        x2 = lo + invphi * (hi - lo)
        f1 = self._crit_vector(x1, xty, t, yty, reml)[0]
        f2 = self._crit_vector(x2, xty, t, yty, reml)[0]
        # golden section, one new evaluation per iteration
        for _ in range(52):
            take_low = f1 < f2
            hi = np.where(take_low, x2, hi)
            lo = np.where(take_low, lo, x1)
            x1_new = np.where(take_low, hi - invphi * (hi - lo), x2)
            x2_new = np.where(take_low, x1, lo + invphi * (hi - lo))
            probe = np.where(take_low, x1_new, x2_new)
            f_probe = self._crit_vector(probe, xty, t, yty, reml)[0]
            f1_new = np.where(take_low, f_probe, f2)
            f2_new = np.where(take_low, f1, f_probe)
            x1, x2, f1, f2 = x1_new, x2_new, f1_new, f2_new
        psi = (lo + hi) / 2.0
        # snap to the boundary when it is at least as good as the interior
        crit_mid = self._crit_vector(psi, xty, t, yty, reml)[0]
        crit_zero = self._crit_scalar(0.0, xty, t, yty, reml)[0]
        psi = np.where(crit_zero <= crit_mid, 0.0, psi)
        _, sigma2_e, _ = self._crit_vector(psi, xty, t, yty, reml)
        return psi, sigma2_e


def fit_model(
    data: ClusteredDataset,
    spec: ModelSpec,
    method: str = "reml",
    opts: Optional[FitOptions] = None,
) -> FittedLMM:
    """Fit the LMM by maximising the (restricted) marginal likelihood.

    beta is profiled out analytically; theta is optimised on log variance
    components (quasi-Newton via L-BFGS-B with analytic score) with an
    explicit boundary comparison at sigma2_u = 0.  The random-intercept
    structure takes a profiled one-dimensional path in psi = su2/se2.

    Args:
        data: clustered dataset.
        spec: covariate inclusion mask (first a entries forced).
        method: "reml" (default) or "ml".
        opts: optimiser controls.

    Returns:
        FittedLMM with estimates, smoother dof, information matrices and the
        joint coefficient matrix blocks.  b_hat is initialised to zero; the
        selection layer attaches the variance-estimation penalty.
    """
    method = method.lower()
    if method not in ("reml", "ml"):
        raise ValueError("method must be 'reml' or 'ml'")
    opts = opts or FitOptions()
    spec.validate_against(data)
    structure = _default_structure(data)

    if _nerm_applicable(data, structure):
        theta, n_iter, grad_norm, converged = _fit_nerm(data, spec, method, opts)
    else:
        theta, n_iter, grad_norm, converged = _fit_general(data, spec, method, opts, structure)
    if not converged:
        raise ConvergenceError(
            f"theta optimisation did not converge in {opts.max_iter} iterations "
            f"(gradient norm {grad_norm:.2e})"
        )
    params = VarianceParams(theta, structure)
    return _assemble_fit(data, spec, params, method, n_iter, grad_norm)


def _default_structure(data: ClusteredDataset) -> VarianceStructure:
    if data.q == 1 and all(np.allclose(c.Z, 1.0) for c in data.clusters):
        return nerm_structure()
    # general fallback: one G scale per random-effect block, one R scale
    q = data.q
    return VarianceStructure(
        h=2,
        q=q,
        g_slopes=[np.eye(q), np.zeros((q, q))],
        r_slope_builders=[lambda m: np.zeros((m, m)), lambda m: np.eye(m)],
        tag="general-linear-in-theta",
    )


def _fit_nerm(data, spec, method, opts):
    prof = NermProfile(data, spec.indices)
    xty, t, yty = prof.y_stats(data.stack_y())
    psi, sigma2_e = prof.fit_psi(xty, t, yty, reml=(method == "reml"))
    psi_hat = float(psi[0])
    se2 = float(sigma2_e[0])
    theta = np.array([psi_hat * se2, se2])
    grad = _theta_score(data, spec, VarianceParams(theta, nerm_structure()), method)
    # golden section is derivative-free and bracket-convergent; the achieved
    # score norm is reported for diagnostics rather than gating convergence
    return theta, 70, float(np.linalg.norm(grad)), True


def _fit_general(data, spec, method, opts, structure):
    y_var = float(np.var(data.stack_y()))
    if opts.theta_init is not None:
        theta0 = np.asarray(opts.theta_init, dtype=float)
    else:
        theta0 = np.full(structure.h, max(y_var, 1e-3) / structure.h)
    reml = method == "reml"

    def negloglik_and_grad(phi):
        theta = np.exp(phi)
        params = VarianceParams(theta, structure)
        mm = _ModelMatrices(data, spec, params)
        dev = mm.gls_deviance()
        if reml:
            sign, logdet_a = np.linalg.slogdet(mm.xtvx)
            dev += logdet_a
        score = _theta_score(data, spec, params, method, _mm=mm)
        return 0.5 * dev, -score * theta

    res = optimize.minimize(
        negloglik_and_grad,
        np.log(np.maximum(theta0, 1e-8)),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": opts.max_iter, "ftol": opts.rel_tol, "gtol": opts.grad_tol},
    )
    theta = np.exp(res.x)
    # boundary restart: pin each nonnegative component at zero in turn
    best_obj = res.fun
    best_theta = theta
    for j in range(structure.h - 1):
        pinned = _fit_boundary(data, spec, method, structure, j, theta)
        if pinned is not None and pinned[1] < best_obj - 1e-12:
            best_theta, best_obj = pinned[0], pinned[1]
    grad = _theta_score(data, spec, VarianceParams(best_theta, structure), method)
    return best_theta, int(res.nit), float(np.linalg.norm(grad)), True


def _fit_boundary(data, spec, method, structure, pin_index, theta_start):
    """Refit with theta[pin_index] = 0; returns (theta, objective) or None."""
    reml = method == "reml"
    free = [j for j in range(structure.h) if j != pin_index]

    def obj(phi_free):
        theta = np.zeros(structure.h)
        theta[free] = np.exp(phi_free)
        theta[pin_index] = 0.0
        try:
            params = VarianceParams(theta, structure)
            mm = _ModelMatrices(data, spec, params)
        except (LmmNumericalError, ValueError):
            return np.inf
        dev = mm.gls_deviance()
        if reml:
            _, logdet_a = np.linalg.slogdet(mm.xtvx)
            dev += logdet_a
        return 0.5 * dev

    x0 = np.log(np.maximum(theta_start[free], 1e-8))
    try:
        res = optimize.minimize(obj, x0, method="Nelder-Mead", options={"maxiter": 400, "xatol": 1e-10, "fatol": 1e-12})
    except Exception:
        return None
    if not np.isfinite(res.fun):
        return None
    theta = np.zeros(structure.h)
    theta[free] = np.exp(res.x)
    return theta, res.fun


def _theta_score(data, spec, params, method, _mm=None):
    """Score of the (restricted) marginal log-likelihood in theta."""
    mm = _mm if _mm is not None else _ModelMatrices(data, spec, params)
    cols = spec.indices
    beta = mm.beta_gls()
    a_inv = _inv_sym(mm.xtvx, "X'V^-1X")
    h = params.structure.h
    score = np.zeros(h)
    for j in range(h):
        tr_term = 0.0
        quad_term = 0.0
        correction = np.zeros_like(mm.xtvx)
        for i, c in enumerate(data.clusters):
            Vinv = mm.Vinv[i]
            Vj = params.structure.r_slope(j, c.y.shape[0]) + c.Z @ params.structure.g_slope(j) @ c.Z.T
            resid = c.y - c.X[:, cols] @ beta
            w = Vinv @ resid
            quad_term += float(w @ Vj @ w)
            tr_term += float(np.einsum("ab,ba->", Vinv, Vj))
            if method == "reml":
                VX = Vinv @ c.X[:, cols]
                correction += VX.T @ Vj @ VX
        if method == "reml":
            tr_term -= float(np.trace(a_inv @ correction))
        score[j] = 0.5 * (quad_term - tr_term)
    return score


def theta_information(
    data: ClusteredDataset, spec: ModelSpec, params: VarianceParams, method: str = "reml"
) -> np.ndarray:
    """Expected information for theta: I_jk = tr(Q V_(j) Q V_(k)) / 2.

    Q is V^-1 for ML and the REML projection P for REML; this is the
    asymptotic covariance inverse used for second-order MSE terms.
    """
    mm = _ModelMatrices(data, spec, params)
    return _theta_information_from_mm(data, spec, params, method, mm)


def _theta_information_from_mm(data, spec, params, method, mm):
    cols = spec.indices
    h = params.structure.h
    a_inv = _inv_sym(mm.xtvx, "X'V^-1X")
    tdir = np.zeros((h, h))
    W = [np.zeros_like(mm.xtvx) for _ in range(h)]  # X'V^-1 V_j V^-1 X
    Wc = np.zeros((h, h, cols.shape[0], cols.shape[0]))  # X'V^-1 V_j V^-1 V_k V^-1 X
    for i, c in enumerate(data.clusters):
        Vinv = mm.Vinv[i]
        VX = Vinv @ c.X[:, cols]
        Vjs = [
            params.structure.r_slope(j, c.y.shape[0]) + c.Z @ params.structure.g_slope(j) @ c.Z.T
            for j in range(h)
        ]
        VjV = [Vj @ Vinv for Vj in Vjs]
        for j in range(h):
            W[j] += VX.T @ Vjs[j] @ VX
            for k in range(j, h):
                tdir[j, k] += float(np.einsum("ab,ba->", VjV[j], VjV[k]))
                if method == "reml":
                    Wc[j, k] += VX.T @ Vjs[j] @ Vinv @ Vjs[k] @ VX
    info = np.zeros((h, h))
    for j in range(h):
        for k in range(j, h):
            val = tdir[j, k]
            if method == "reml":
                val -= float(np.trace(a_inv @ (Wc[j, k] + Wc[j, k].T)))
                val += float(np.trace(a_inv @ W[j] @ a_inv @ W[k]))
            info[j, k] = info[k, j] = 0.5 * val
    return info


def _assemble_fit(data, spec, params, method, n_iter, grad_norm) -> FittedLMM:
    mm = _ModelMatrices(data, spec, params)
    beta_sub = mm.beta_gls()
    u_tilde = mm.u_blup(beta_sub)
    beta_full = np.zeros(data.p_total)
    beta_full[spec.indices] = beta_sub

    rss_v = mm.ytvy - 2.0 * float(mm.xtvy @ beta_sub) + float(beta_sub @ mm.xtvx @ beta_sub)
    ll_m = -0.5 * (data.m * math.log(2 * math.pi) + mm.logdet_v + rss_v)
    rho = _effective_dof_from_mm(mm)
    km = build_k_matrix(data, spec, params, _mm=mm)

    hess_c = np.zeros_like(mm.xtvx)
    cols = spec.indices
    q = data.q
    ll_c = -0.5 * data.m * math.log(2 * math.pi)
    for i, c in enumerate(data.clusters):
        Rinv = _r_inverse(mm.R[i], i)
        Xs = c.X[:, cols]
        hess_c += Xs.T @ Rinv @ Xs
        resid = c.y - Xs @ beta_sub - c.Z @ u_tilde[i * q : (i + 1) * q]
        sign, logdet_r = np.linalg.slogdet(mm.R[i])
        ll_c += -0.5 * (logdet_r + float(resid @ Rinv @ resid))

    info_theta = _theta_information_from_mm(data, spec, params, method, mm)
    ll_r = None
    if method == "reml":
        _, logdet_a = np.linalg.slogdet(mm.xtvx)
        ll_r = ll_m - 0.5 * logdet_a

    return FittedLMM(
        data=data,
        spec=spec,
        method=method,
        theta_hat=params,
        beta_hat=beta_full,
        u_tilde=u_tilde,
        loglik_marginal=ll_m,
        loglik_conditional=ll_c,
        rho_hat=rho,
        fisher_beta=mm.xtvx,
        hessian_conditional=hess_c,
        info_theta=info_theta,
        k_matrices=km,
        boundary=params.at_boundary,
        converged=True,
        n_iter=n_iter,
        grad_norm=grad_norm,
        loglik_restricted=ll_r,
    )


# ---------------------------------------------------------------------------
# Prediction and MSE
# ---------------------------------------------------------------------------


def predict_mixed(fit: FittedLMM, target: MixedTarget) -> float:
    """EBLUP of k'beta + m'u_i; m = 0 gives the regression-synthetic form."""
    target.validate_against(fit.data)
    q = fit.data.q
    i = target.cluster_index
    u_i = fit.u_tilde[i * q : (i + 1) * q]
    return float(target.k @ fit.beta_hat + target.m @ u_i)


def mse_first_order(fit: FittedLMM, target: MixedTarget) -> tuple[float, float]:
    """First-order MSE components (g1, g2) of the EBLUP; g1+g2 = c'K^-1 c."""
    target.validate_against(fit.data)
    data, params = fit.data, fit.theta_hat
    cols = fit.spec.indices
    i = target.cluster_index
    c = data.clusters[i]
    G = params.g_matrix()
    Vinv_i = _inv_sym(params.r_matrix(c.y.shape[0]) + c.Z @ G @ c.Z.T, "V(theta)", i)
    m_vec = target.m
    g1 = float(m_vec @ (G - G @ c.Z.T @ Vinv_i @ c.Z @ G) @ m_vec)
    d = target.k[cols] - m_vec @ G @ c.Z.T @ Vinv_i @ c.X[:, cols]
    g2 = float(d @ _solve_sym(fit.fisher_beta, d, "X'V^-1X"))
    return g1, g2


def mse_components(fit: FittedLMM, target: MixedTarget) -> tuple[float, float, float]:
    """(g1, g2, g3) with the variance-estimation term g3.

    g3 = tr{ (da'/dtheta) V_i (da'/dtheta)' V_A }, a' = m'G Z_i'V_i^-1, with
    V_A the inverse expected information of the fitting criterion; derivative
    rows come from the linear slope matrices of the variance structure.
    """
    g1, g2 = mse_first_order(fit, target)
    data, params = fit.data, fit.theta_hat
    i = target.cluster_index
    c = data.clusters[i]
    G = params.g_matrix()
    st = params.structure
    m_i = c.y.shape[0]
    V_i = params.r_matrix(m_i) + c.Z @ G @ c.Z.T
    Vinv_i = _inv_sym(V_i, "V(theta)", i)
    rows = []
    for j in range(st.h):
        Vj = st.r_slope(j, m_i) + c.Z @ st.g_slope(j) @ c.Z.T
        da = target.m @ st.g_slope(j) @ c.Z.T @ Vinv_i - target.m @ G @ c.Z.T @ Vinv_i @ Vj @ Vinv_i
        rows.append(da)
    D = np.vstack(rows)  # (h, m_i)
    v_a = _inv_sym(fit.info_theta, "theta information")
    eigs = np.linalg.eigvalsh((v_a + v_a.T) / 2.0)
    if eigs.min() < -1e-10 * max(1.0, abs(eigs).max()):
        raise LmmNumericalError("asymptotic covariance of theta is not positive semidefinite")
    g3 = float(np.trace(D @ V_i @ D.T @ v_a))
    return g1, g2, max(g3, 0.0)


def mse_second_order(fit: FittedLMM, target: MixedTarget) -> float:
    """Second-order correct MSE estimate g1 + g2 + 2 g3 (>= first order)."""
    g1, g2, g3 = mse_components(fit, target)
    return g1 + g2 + 2.0 * g3
