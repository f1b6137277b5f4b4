"""Selection regions: quadratic-inequality geometry of the selected model.

Conditioning on the selected model restricts the limiting Gaussian vector W
to a conjunction of quadratic inequalities.  Each comparison of the selected
model against a competitor contributes one constraint whose quadratic form
is the difference of two submatrix forms of the information ratio matrix
Sigma, with threshold twice the penalty difference.  Four builders cover the
nested-chain case, a general candidate set under the orthogonality
assumption, the non-orthogonal stacked-coordinate form, and the
misspecified-models form; all of them emit the same canonical constraint
container so one membership kernel serves every family.

Random-effect coordinates are never constrained: a region carries a free
tail of r coordinates beyond its constrained block.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .lmm import FittedLMM, LmmNumericalError, sym_inv_sqrt, sym_sqrt

__all__ = [
    "QuadraticConstraint",
    "ConstraintSet",
    "ExtendedSelectionMatrix",
    "SigmaEstimate",
    "sigma_matrix",
    "nested_region",
    "general_region_orthogonal",
    "general_region_nonorthogonal",
    "nonorthogonal_region_from_blocks",
    "misspecified_region",
    "matrix_a_pairwise",
    "region_contains",
    "contains_batch",
    "membership_counts",
    "with_free_tail",
    "region_to_dict",
    "region_from_dict",
    "region_to_json",
    "region_from_json",
    "render_region_text",
    "regions_equal",
    "check_orthogonality",
]


@dataclass(frozen=True)
class QuadraticConstraint:
    """One inequality w'Qw + lin'w {<, >=} rhs on the constrained block."""

    Q: np.ndarray
    rhs: float
    sense: str  # "lt" (strict less) | "ge" (weak greater-equal)
    lin: Optional[np.ndarray] = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if Q.shape[0] != Q.shape[1]:
            raise ValueError("constraint matrix must be square")
        if not np.allclose(Q, Q.T, atol=1e-10):
            raise ValueError("constraint matrix must be symmetric")
        object.__setattr__(self, "Q", (Q + Q.T) / 2.0)
        if self.sense not in ("lt", "ge"):
            raise ValueError("sense must be 'lt' or 'ge'")
        if self.lin is not None:
            lin = np.atleast_1d(np.asarray(self.lin, dtype=float))
            if lin.shape[0] != Q.shape[0]:
                raise ValueError("linear coefficient length must match Q")
            object.__setattr__(self, "lin", lin)

    def value(self, w_head: np.ndarray) -> np.ndarray:
        """Constraint value(s); w_head is (d,) or (N, d)."""
        W = np.atleast_2d(w_head)
        vals = np.einsum("ni,ij,nj->n", W, self.Q, W)
        if self.lin is not None:
            vals = vals + W @ self.lin
        return vals if w_head.ndim == 2 else vals[0]

    def satisfied(self, w_head: np.ndarray) -> np.ndarray:
        vals = self.value(w_head)
        return vals < self.rhs if self.sense == "lt" else vals >= self.rhs


@dataclass(frozen=True)
class ConstraintSet:
    """Conjunction of quadratic constraints on the first dim - r coordinates."""

    dim: int
    constraints: Sequence[QuadraticConstraint]
    r: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("dimension must be positive")
        if not 0 <= self.r < self.dim:
            raise ValueError("free tail must satisfy 0 <= r < dim")
        head = self.dim - self.r
        for c in self.constraints:
            if c.Q.shape[0] != head:
                raise ValueError("constraint dimension must equal dim - r")

    @property
    def head_dim(self) -> int:
        return self.dim - self.r


def with_free_tail(region: ConstraintSet, r: int) -> ConstraintSet:
    """Append r unconstrained coordinates (the mixed-parameter variant)."""
    if r < 0:
        raise ValueError("free tail must be nonnegative")
    return ConstraintSet(
        dim=region.head_dim + r, constraints=region.constraints, r=r, meta=dict(region.meta)
    )


def region_contains(w: np.ndarray, region: ConstraintSet) -> bool:
    """True iff every constraint holds (strict for 'lt', weak for 'ge')."""
    w = np.asarray(w, dtype=float)
    if w.shape[0] != region.dim:
        raise ValueError("point dimension does not match region")
    head = w[: region.head_dim]
    return all(bool(c.satisfied(head)) for c in region.constraints)


def contains_batch(W: np.ndarray, region: ConstraintSet) -> np.ndarray:
    """Vectorised membership for rows of W (N, dim) -> bool (N,)."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.shape[1] != region.dim:
        raise ValueError("point dimension does not match region")
    head = W[:, : region.head_dim]
    ok = np.ones(W.shape[0], dtype=bool)
    for c in region.constraints:
        ok &= c.satisfied(head)
    return ok


def membership_counts(regions: Sequence[ConstraintSet], W: np.ndarray) -> np.ndarray:
    """Number of regions containing each row of W."""
    counts = np.zeros(np.atleast_2d(W).shape[0], dtype=int)
    for reg in regions:
        counts += contains_batch(W, reg).astype(int)
    return counts


# ---------------------------------------------------------------------------
# Sigma and the extended selection matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SigmaEstimate:
    """Information ratio Sigma = (I^m)^-1/2 J^c (I^m)^-1/2 of the full model."""

    Sigma: np.ndarray
    I_m: np.ndarray
    J_c: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.Sigma, dtype=float)
        eigs = np.linalg.eigvalsh((S + S.T) / 2.0)
        if eigs.min() < -1e-8 * max(1.0, eigs.max()):
            raise LmmNumericalError("Sigma estimate is not positive semidefinite")

    @property
    def dim(self) -> int:
        return self.Sigma.shape[0]


def sigma_matrix(full_fit: FittedLMM) -> SigmaEstimate:
    """Estimate Sigma from a full-model fit via the symmetric root of I^m."""
    if full_fit.spec.size != full_fit.data.p_total:
        raise ValueError("Sigma must be estimated on the full model")
    i_m = full_fit.info_marginal
    j_c = full_fit.jc_normalized
    root = sym_inv_sqrt(i_m)
    sigma = root @ j_c @ root
    return SigmaEstimate(Sigma=(sigma + sigma.T) / 2.0, I_m=i_m, J_c=j_c)


@dataclass(frozen=True)
class ExtendedSelectionMatrix:
    """0/1 indicator of the Sigma entries each candidate model activates.

    Columns: a+K diagonal slots followed by the C(a+K, 2) off-diagonal pairs
    in lexicographic order; row m has ones exactly at the slots touched by
    model m's covariates and covariate pairs.
    """

    masks: Sequence[np.ndarray]
    p_total: int

    def __post_init__(self):
        for mask in self.masks:
            if mask.shape[0] != self.p_total:
                raise ValueError("mask length does not match covariate count")

    @property
    def pairs(self) -> list[tuple[int, int]]:
        p = self.p_total
        return [(i, j) for i in range(p) for j in range(i + 1, p)]

    @property
    def matrix(self) -> np.ndarray:
        p = self.p_total
        pairs = self.pairs
        rows = []
        for mask in self.masks:
            diag = mask.astype(int)
            off = np.array([int(mask[i] and mask[j]) for i, j in pairs])
            rows.append(np.concatenate([diag, off]))
        return np.array(rows)

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.masks), self.p_total + len(self.pairs))

    @classmethod
    def from_masks(cls, masks: Sequence[np.ndarray]) -> "ExtendedSelectionMatrix":
        masks = [np.atleast_1d(np.asarray(m, dtype=bool)) for m in masks]
        return cls(masks=masks, p_total=masks[0].shape[0])


# ---------------------------------------------------------------------------
# Region builders
# ---------------------------------------------------------------------------


def _embedded_quadratic(sigma: np.ndarray, coords: np.ndarray, dim: int) -> np.ndarray:
    Q = np.zeros((dim, dim))
    Q[np.ix_(coords, coords)] = sigma[np.ix_(coords, coords)]
    return Q


def _sigma_array(sigma) -> np.ndarray:
    return sigma.Sigma if isinstance(sigma, SigmaEstimate) else np.asarray(sigma, dtype=float)


def nested_region(
    sigma,
    rho_b: Sequence[float],
    a: int,
    K: int,
    p: int,
    p0_unknown: bool = True,
) -> ConstraintSet:
    """Region for selecting model p from the nested chain M_0 ... M_K.

    Model j occupies coordinates 0..a+j-1.  Comparisons against larger
    models give strict-less constraints, comparisons against smaller models
    weak greater-equal ones.  With p0_unknown the smaller-model comparisons
    run all the way down the chain; otherwise the selected model is treated
    as the minimal true one and they are dropped.

    Args:
        sigma: SigmaEstimate (or raw matrix) of the full model, (a+K)x(a+K).
        rho_b: per-model penalties rho_j + b_j for j = 0..K.
        a, K: forced and selectable covariate counts.
        p: selected model order in 0..K.
        p0_unknown: include comparisons against every smaller model.

    Returns:
        ConstraintSet over R^{a+K} (append a free tail for mixed parameters).
    """
    S = _sigma_array(sigma)
    dim = a + K
    if S.shape[0] != dim:
        raise ValueError("Sigma dimension must equal a+K")
    rho_b = np.asarray(rho_b, dtype=float)
    if rho_b.shape[0] != K + 1:
        raise ValueError("need one rho+b value per model in the chain")
    if not 0 <= p <= K:
        raise ValueError("selected order out of range")
    if (np.diff(rho_b) <= 0).any():
        warnings.warn(
            "per-model penalties rho+b are not strictly increasing along the chain; "
            "the region may be empty",
            RuntimeWarning,
        )

    def coords(j):
        return np.arange(a + j)

    constraints = []
    lower_start = 0 if p0_unknown else p
    for j in range(lower_start, p):
        Q = _embedded_quadratic(S, coords(p), dim) - _embedded_quadratic(S, coords(j), dim)
        constraints.append(
            QuadraticConstraint(Q=Q, rhs=2.0 * (rho_b[p] - rho_b[j]), sense="ge")
        )
    for j in range(p + 1, K + 1):
        Q = _embedded_quadratic(S, coords(j), dim) - _embedded_quadratic(S, coords(p), dim)
        constraints.append(
            QuadraticConstraint(Q=Q, rhs=2.0 * (rho_b[j] - rho_b[p]), sense="lt")
        )
    return ConstraintSet(
        dim=dim,
        constraints=constraints,
        r=0,
        meta={"builder": "nested", "selected": int(p), "selected_coords": coords(p).tolist()},
    )


def general_region_orthogonal(
    sigma,
    upsilon: ExtendedSelectionMatrix,
    rho_b: Sequence[float],
    selected: int,
) -> ConstraintSet:
    """Region for a general candidate set under model orthogonality.

    One weak constraint per competitor: the selected model's Sigma-submatrix
    quadratic minus the competitor's must exceed twice the penalty gap.
    """
    S = _sigma_array(sigma)
    dim = S.shape[0]
    if upsilon.p_total != dim:
        raise ValueError("selection matrix and Sigma dimensions differ")
    rho_b = np.asarray(rho_b, dtype=float)
    if rho_b.shape[0] != len(upsilon.masks):
        raise ValueError("need one rho+b value per candidate model")
    if not 0 <= selected < len(upsilon.masks):
        raise ValueError("selected index out of range")
    sel_coords = np.flatnonzero(upsilon.masks[selected])
    Q_sel = _embedded_quadratic(S, sel_coords, dim)
    constraints = []
    for i, mask in enumerate(upsilon.masks):
        if i == selected:
            continue
        Q = Q_sel - _embedded_quadratic(S, np.flatnonzero(mask), dim)
        constraints.append(
            QuadraticConstraint(Q=Q, rhs=2.0 * (rho_b[selected] - rho_b[i]), sense="ge")
        )
    return ConstraintSet(
        dim=dim,
        constraints=constraints,
        r=0,
        meta={
            "builder": "general-orthogonal",
            "selected": int(selected),
            "selected_coords": sel_coords.tolist(),
        },
    )


def matrix_a_pairwise(
    jc_blocks: Sequence[np.ndarray], im_blocks: Sequence[np.ndarray], first: int, second: int, r: int
) -> np.ndarray:
    """Whitened pairwise-comparison matrix with identity lower-right block.

    Block-diagonal over the stacked model coordinates: the comparison matrix
    carries +J^c of `first` and -J^c of `second` whitened by the stacked
    marginal information, extended by I_r on the random-effect block.
    """
    sizes = [b.shape[0] for b in jc_blocks]
    e = int(np.sum(sizes))
    offs = np.concatenate([[0], np.cumsum(sizes)])
    head = np.zeros((e, e))
    roots = [sym_inv_sqrt(b) for b in im_blocks]
    s1 = slice(offs[first], offs[first + 1])
    s2 = slice(offs[second], offs[second + 1])
    head[s1, s1] = roots[first] @ jc_blocks[first] @ roots[first]
    head[s2, s2] -= roots[second] @ jc_blocks[second] @ roots[second]
    out = np.zeros((e + r, e + r))
    out[:e, :e] = head
    out[e:, e:] = np.eye(r)
    return out


def nonorthogonal_region_from_blocks(
    jc_blocks: Sequence[np.ndarray],
    im_blocks: Sequence[np.ndarray],
    ic_cross: Sequence[Sequence[np.ndarray]],
    rho_b: Sequence[float],
    selected: int,
    r: int = 0,
    mixed: bool = False,
) -> ConstraintSet:
    """Stacked-coordinate region without the orthogonality assumption.

    The fixed-parameter variant lives on the e = sum |M| stacked coordinates;
    the mixed variant wraps the same comparisons in the square root of the
    stacked estimator covariance E and appends the free random-effect tail.
    The pairwise comparison matrices cancel on the tail, so the free block
    stays structurally unconstrained.
    """
    n_models = len(jc_blocks)
    sizes = [b.shape[0] for b in jc_blocks]
    e = int(np.sum(sizes))
    offs = np.concatenate([[0], np.cumsum(sizes)])
    rho_b = np.asarray(rho_b, dtype=float)
    if rho_b.shape[0] != n_models:
        raise ValueError("need one rho+b value per model")

    roots = [sym_inv_sqrt(b) for b in im_blocks]

    e_root = None
    if mixed:
        E1 = np.zeros((e, e))
        for i in range(n_models):
            inv_i = np.linalg.inv(im_blocks[i])
            for j in range(n_models):
                inv_j = np.linalg.inv(im_blocks[j])
                E1[offs[i] : offs[i + 1], offs[j] : offs[j + 1]] = inv_i @ ic_cross[i][j] @ inv_j
        e_root = sym_sqrt((E1 + E1.T) / 2.0)

    constraints = []
    for i in range(n_models):
        if i == selected:
            continue
        head = np.zeros((e, e))
        ssel = slice(offs[selected], offs[selected + 1])
        si = slice(offs[i], offs[i + 1])
        head[ssel, ssel] = roots[selected] @ jc_blocks[selected] @ roots[selected]
        head[si, si] -= roots[i] @ jc_blocks[i] @ roots[i]
        if mixed:
            head = e_root @ head @ e_root
        constraints.append(
            QuadraticConstraint(Q=head, rhs=2.0 * (rho_b[selected] - rho_b[i]), sense="ge")
        )
    tail = r if mixed else 0
    return ConstraintSet(
        dim=e + tail,
        constraints=constraints,
        r=tail,
        meta={
            "builder": "general-nonorthogonal",
            "selected": int(selected),
            "selected_coords": list(range(offs[selected], offs[selected + 1])),
            "block_sizes": sizes,
        },
    )


def general_region_nonorthogonal(
    fits: Sequence[FittedLMM],
    selected: int,
    mixed: bool = False,
    theta_source: Optional[int] = None,
) -> ConstraintSet:
    """Non-orthogonal region from fitted candidate models.

    Cross-information blocks are evaluated at a single plug-in theta: the
    full model's when present, otherwise the selected model's (override with
    theta_source).
    """
    if theta_source is None:
        theta_source = _full_model_index(fits, default=selected)
    ref = fits[theta_source]
    jc_blocks, im_blocks, ic_cross = _information_blocks(fits, ref)
    rho_b = [f.rho_hat + f.b_hat for f in fits]
    return nonorthogonal_region_from_blocks(
        jc_blocks, im_blocks, ic_cross, rho_b, selected, r=ref.data.r, mixed=mixed
    )


def misspecified_region(
    fits: Sequence[FittedLMM],
    smallest_model: int,
    selected: int,
    mixed: bool = True,
    theta_source: Optional[int] = None,
) -> ConstraintSet:
    """Region built by comparing every model against a common smallest one.

    Each constraint matrix is the difference of two whitened pairwise
    matrices against the smallest model; the identity tail blocks cancel, so
    random-effect coordinates stay free.  Requires the smallest model to be
    nested in every other candidate.
    """
    small_mask = fits[smallest_model].spec.included
    for f in fits:
        if (small_mask & ~f.spec.included).any():
            raise ValueError("no common smallest model: candidate drops one of its covariates")
    if theta_source is None:
        theta_source = _full_model_index(fits, default=selected)
    ref = fits[theta_source]
    jc_blocks, im_blocks, ic_cross = _information_blocks(fits, ref)
    sizes = [b.shape[0] for b in jc_blocks]
    e = int(np.sum(sizes))
    offs = np.concatenate([[0], np.cumsum(sizes)])
    r = ref.data.r if mixed else 0

    E1 = np.zeros((e, e))
    for i in range(len(fits)):
        inv_i = np.linalg.inv(im_blocks[i])
        for j in range(len(fits)):
            inv_j = np.linalg.inv(im_blocks[j])
            E1[offs[i] : offs[i + 1], offs[j] : offs[j + 1]] = inv_i @ ic_cross[i][j] @ inv_j
    e_root = sym_sqrt((E1 + E1.T) / 2.0) if mixed else None

    rho_b = np.array([f.rho_hat + f.b_hat for f in fits])
    constraints = []
    for i in range(len(fits)):
        if i == selected:
            continue
        a_sel = matrix_a_pairwise(jc_blocks, im_blocks, selected, smallest_model, r=0)
        a_i = matrix_a_pairwise(jc_blocks, im_blocks, i, smallest_model, r=0)
        head = a_sel - a_i
        if mixed:
            head = e_root @ head @ e_root
        constraints.append(
            QuadraticConstraint(Q=head, rhs=2.0 * (rho_b[selected] - rho_b[i]), sense="ge")
        )
    return ConstraintSet(
        dim=e + r,
        constraints=constraints,
        r=r,
        meta={
            "builder": "misspecified",
            "selected": int(selected),
            "smallest": int(smallest_model),
            "selected_coords": list(range(offs[selected], offs[selected + 1])),
            "block_sizes": sizes,
        },
    )


def _full_model_index(fits: Sequence[FittedLMM], default: int) -> int:
    for i, f in enumerate(fits):
        if f.spec.size == f.data.p_total:
            return i
    return default


def _information_blocks(fits: Sequence[FittedLMM], ref: FittedLMM):
    """Per-model J^c, I^m and cross-information at the reference theta."""
    data = ref.data
    n = data.n
    params = ref.theta_hat
    jc_blocks = []
    im_blocks = []
    col_sets = [f.spec.indices for f in fits]
    # blockwise accumulation of X' R^-1 X and X' V^-1 X on the union design
    p = data.p_total
    xtrx = np.zeros((p, p))
    xtvx = np.zeros((p, p))
    for i, c in enumerate(data.clusters):
        m_i = c.y.shape[0]
        R_i = params.r_matrix(m_i)
        V_i = R_i + c.Z @ params.g_matrix() @ c.Z.T
        rinv_x = np.linalg.solve(R_i, c.X)
        vinv_x = np.linalg.solve(V_i, c.X)
        xtrx += c.X.T @ rinv_x
        xtvx += c.X.T @ vinv_x
    for cols in col_sets:
        jc_blocks.append(xtrx[np.ix_(cols, cols)] / n)
        im_blocks.append(xtvx[np.ix_(cols, cols)] / n)
    ic_cross = [
        [xtrx[np.ix_(ci, cj)] / n for cj in col_sets]
        for ci in col_sets
    ]
    return jc_blocks, im_blocks, ic_cross


def check_orthogonality(full_fit: FittedLMM, model_pair: tuple) -> tuple[float, bool]:
    """Max normalised cross-information entry between two models' covariates.

    Passes when every |I^c_ij| entry is below 0.1 of the geometric mean of
    the matching diagonal entries.  Models sharing a covariate always fail.
    """
    mask_i, mask_j = model_pair
    ci = np.flatnonzero(np.asarray(mask_i, dtype=bool))
    cj = np.flatnonzero(np.asarray(mask_j, dtype=bool))
    hess = full_fit.hessian_conditional
    if hess.shape[0] != full_fit.data.p_total:
        raise ValueError("orthogonality check needs a full-model fit")
    cross = hess[np.ix_(ci, cj)]
    diag = np.diag(hess)
    norm = np.sqrt(np.outer(diag[ci], diag[cj]))
    stat = float(np.abs(cross / norm).max()) if cross.size else 0.0
    return stat, stat < 0.1


# ---------------------------------------------------------------------------
# Serialisation and comparison
# ---------------------------------------------------------------------------


def region_to_dict(region: ConstraintSet) -> dict:
    return {
        "dim": region.dim,
        "r": region.r,
        "constraints": [
            {
                "Q": c.Q.tolist(),
                "lin": None if c.lin is None else c.lin.tolist(),
                "rhs": c.rhs,
                "sense": c.sense,
            }
            for c in region.constraints
        ],
        "meta": region.meta,
    }


def region_from_dict(payload: dict) -> ConstraintSet:
    constraints = [
        QuadraticConstraint(
            Q=np.array(c["Q"], dtype=float),
            rhs=float(c["rhs"]),
            sense=c["sense"],
            lin=None if c.get("lin") is None else np.array(c["lin"], dtype=float),
        )
        for c in payload["constraints"]
    ]
    return ConstraintSet(
        dim=int(payload["dim"]),
        constraints=constraints,
        r=int(payload["r"]),
        meta=dict(payload.get("meta", {})),
    )


def region_to_json(region: ConstraintSet) -> str:
    return json.dumps(region_to_dict(region), indent=2)


def region_from_json(text: str) -> ConstraintSet:
    return region_from_dict(json.loads(text))


def render_region_text(region: ConstraintSet, digits: int = 4) -> str:
    """Human-readable constraint listing for demos and debugging."""
    lines = [f"dimension {region.dim} (free tail {region.r})"]
    rel = {"lt": "<", "ge": ">="}
    for idx, c in enumerate(region.constraints):
        terms = []
        d = c.Q.shape[0]
        for i in range(d):
            if abs(c.Q[i, i]) > 10 ** (-digits - 2):
                terms.append(f"{c.Q[i, i]:+.{digits}f} w{i + 1}^2")
            for j in range(i + 1, d):
                if abs(c.Q[i, j]) > 10 ** (-digits - 2):
                    terms.append(f"{2 * c.Q[i, j]:+.{digits}f} w{i + 1}w{j + 1}")
        if c.lin is not None:
            for i in range(d):
                if abs(c.lin[i]) > 10 ** (-digits - 2):
                    terms.append(f"{c.lin[i]:+.{digits}f} w{i + 1}")
        body = " ".join(terms) if terms else "0"
        lines.append(f"  [{idx}] {body} {rel[c.sense]} {c.rhs:.{digits}f}")
    return "\n".join(lines)


def _canonical_key(c: QuadraticConstraint, digits: int = 9):
    # fold strict-less into greater-equal by negation; boundary orientation
    # is measure zero and excluded from the comparison
    sign = -1.0 if c.sense == "lt" else 1.0
    Q = np.round(sign * c.Q, digits)
    lin = np.round(sign * (c.lin if c.lin is not None else np.zeros(c.Q.shape[0])), digits)
    rhs = round(sign * c.rhs, digits)
    return (Q.tobytes(), lin.tobytes(), rhs)


def regions_equal(a: ConstraintSet, b: ConstraintSet, digits: int = 9) -> bool:
    """Constraint-set equality after canonicalisation, ignoring order."""
    if a.dim != b.dim or a.r != b.r or len(a.constraints) != len(b.constraints):
        return False
    ka = sorted(_canonical_key(c, digits) for c in a.constraints)
    kb = sorted(_canonical_key(c, digits) for c in b.constraints)
    return ka == kb
