"""Nested-error-regression simulation harness and coverage tables.

Generates clustered data y_ij = x_ij'beta + u_i + e_ij with equicorrelated
covariates, runs the conditioned-replication protocol (repeat until the
target model has been selected I times), and aggregates empirical coverage
and average lengths of post-selection and naive intervals for fixed
parameters, cluster-mean linear combinations, and mixed parameters.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .caic import CandidateSet, SelectOptions, select_model
from .intervals import draw_region_batch, naive_ci_beta, symmetric_critical_value
from .lmm import (
    Cluster,
    ClusteredDataset,
    FittedLMM,
    MixedTarget,
    ModelSpec,
    build_k_matrix,
    mse_first_order,
    mse_second_order,
    predict_mixed,
    sym_inv_sqrt,
    sym_sqrt,
)
from .regions import (
    ExtendedSelectionMatrix,
    general_region_nonorthogonal,
    general_region_orthogonal,
    membership_counts,
    nested_region,
    render_region_text,
    sigma_matrix,
    with_free_tail,
)
from .sampler import SamplerConfig

__all__ = [
    "SimScenario",
    "scenario",
    "CoverageRow",
    "CoverageTable",
    "PipelineOptions",
    "TargetNeverSelectedError",
    "generate_nerm",
    "generate_nerm_with_effects",
    "candidate_set_for",
    "candidate_pool",
    "run_until_selected",
    "region_demo",
    "RegionDemo",
]

_PAPER_BETA = (2.25, -1.1, 2.43, 0.0, 0.0)
_SETTINGS = {"S1": (1.0, 1.0), "S2": (1.0, 0.5)}  # (sigma2_e, sigma2_u), declared order


class TargetNeverSelectedError(RuntimeError):
    """The target model was not selected within the attempt budget."""


@dataclass(frozen=True)
class SimScenario:
    """One cell of the simulation design.

    sigma2_e and sigma2_u are stored under their own names to avoid the
    transposition hazard of positional (sigma2_e, sigma2_u) pairs.
    """

    n: int = 30
    m_i: int = 5
    sigma2_e: float = 1.0
    sigma2_u: float = 1.0
    beta_true: tuple = _PAPER_BETA
    omega_offdiag: float = 0.25
    sel_matrix: str = "v2"  # "v2" | "v3" | "v4"
    target_mask: Optional[tuple] = None  # default: the full model
    I: int = 500
    alpha: float = 0.05
    B: int = 5000
    seed: int = 0
    setting: str = "S1"
    method: str = "reml"
    b_method: str = "monte-carlo"
    b_reps: int = 200

    def __post_init__(self):
        if self.n < 2 or self.m_i < 2:
            raise ValueError("need n >= 2 clusters and m_i >= 2 units per cluster")
        if self.I < 1:
            raise ValueError("need at least one conditioned replication")
        if self.sel_matrix not in ("v2", "v3", "v4"):
            raise ValueError("sel_matrix must be one of v2, v3, v4")

    @property
    def p_total(self) -> int:
        return len(self.beta_true)

    @property
    def forced(self) -> int:
        return int(self.sel_matrix[1])


def scenario(setting: str = "S1", **kwargs) -> SimScenario:
    """Build a scenario from a named variance setting (S1 or S2)."""
    if setting not in _SETTINGS:
        raise ValueError("setting must be 'S1' or 'S2'")
    se2, su2 = _SETTINGS[setting]
    return SimScenario(setting=setting, sigma2_e=se2, sigma2_u=su2, **kwargs)


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


def generate_nerm_with_effects(
    scn: SimScenario, rep_seed: int
) -> tuple[ClusteredDataset, np.ndarray]:
    """Dataset plus the realised random intercepts (needed for mu coverage)."""
    rng = np.random.default_rng(rep_seed)
    n, m_i, p = scn.n, scn.m_i, scn.p_total
    d = p - 1
    omega = np.full((d, d), scn.omega_offdiag)
    np.fill_diagonal(omega, 1.0)
    chol = np.linalg.cholesky(omega)
    beta = np.asarray(scn.beta_true, dtype=float)
    u = rng.normal(0.0, np.sqrt(scn.sigma2_u), size=n)
    clusters = []
    for i in range(n):
        x_tail = rng.standard_normal((m_i, d)) @ chol.T
        X = np.column_stack([np.ones(m_i), x_tail])
        e = rng.normal(0.0, np.sqrt(scn.sigma2_e), size=m_i)
        y = X @ beta + u[i] + e
        clusters.append(Cluster(y=y, X=X, Z=np.ones((m_i, 1))))
    data = ClusteredDataset(clusters, a=scn.forced, intercept=True)
    return data, u


def generate_nerm(scn: SimScenario, rep_seed: int) -> ClusteredDataset:
    """Deterministic dataset draw for one replication seed."""
    return generate_nerm_with_effects(scn, rep_seed)[0]


def candidate_set_for(tag: str, p_total: int = 5) -> tuple[CandidateSet, ExtendedSelectionMatrix]:
    """Candidate models forcing the first int(tag[1]) covariates.

    Remaining covariates enter through all subsets; candidates are ordered
    by model size then lexicographically, so the full model comes last.
    """
    if tag not in ("v2", "v3", "v4"):
        raise ValueError("tag must be one of v2, v3, v4")
    return candidate_pool(int(tag[1]), p_total)


def candidate_pool(forced: int, p_total: int) -> tuple[CandidateSet, ExtendedSelectionMatrix]:
    """All-subset candidates with a forced leading block of covariates."""
    if not 1 <= forced <= p_total:
        raise ValueError("forced count must lie in [1, p_total]")
    free = list(range(forced, p_total))
    subsets = []
    for size in range(len(free) + 1):
        subsets.extend(combinations(free, size))
    specs = []
    for sub in subsets:
        mask = np.zeros(p_total, dtype=bool)
        mask[:forced] = True
        mask[list(sub)] = True
        label = "M_" + "".join(str(i + 1) for i in np.flatnonzero(mask))
        specs.append(ModelSpec(included=mask, label=label))
    cands = CandidateSet(specs=tuple(specs), structure_tag="general", a=forced)
    upsilon = ExtendedSelectionMatrix.from_masks([s.included for s in specs])
    return cands, upsilon


# ---------------------------------------------------------------------------
# Coverage aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoverageRow:
    setting: str
    method: str
    target: str
    coverage: float  # percent
    avg_length: float
    mc_se: float  # percent
    reps: int


@dataclass(frozen=True)
class CoverageTable:
    rows: Sequence[CoverageRow]
    attempts: int = 0

    def get(self, method: str, target: str) -> CoverageRow:
        for row in self.rows:
            if row.method == method and row.target == target:
                return row
        raise KeyError(f"no row for ({method}, {target})")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["setting", "method", "target", "coverage", "length", "mc_se"])
            for row in self.rows:
                writer.writerow(
                    [
                        row.setting,
                        row.method,
                        row.target,
                        f"{row.coverage:.12g}",
                        f"{row.avg_length:.12g}",
                        f"{row.mc_se:.12g}",
                    ]
                )


@dataclass(frozen=True)
class PipelineOptions:
    """Knobs of the conditioned-replication pipeline."""

    region_form: str = "orthogonal"  # "orthogonal" | "nonorthogonal"
    workers: int = 1
    max_attempt_factor: int = 100

    def __post_init__(self):
        if self.region_form not in ("orthogonal", "nonorthogonal"):
            raise ValueError("region_form must be 'orthogonal' or 'nonorthogonal'")


class _Accumulator:
    """Order-independent coverage/length sums keyed by (method, target)."""

    def __init__(self):
        self.cover: dict = {}
        self.length: dict = {}
        self.count: dict = {}

    def add(self, method: str, target: str, covered: float, length: float) -> None:
        key = (method, target)
        self.cover[key] = self.cover.get(key, 0.0) + covered
        self.length[key] = self.length.get(key, 0.0) + length
        self.count[key] = self.count.get(key, 0) + 1

    def rows(self, setting: str) -> list[CoverageRow]:
        out = []
        for key in sorted(self.cover):
            method, target = key
            reps = self.count[key]
            p = self.cover[key] / reps
            out.append(
                CoverageRow(
                    setting=setting,
                    method=method,
                    target=target,
                    coverage=100.0 * p,
                    avg_length=self.length[key] / reps,
                    mc_se=100.0 * float(np.sqrt(max(p * (1 - p), 0.0) / reps)),
                    reps=reps,
                )
            )
        return out


def run_until_selected(
    scn: SimScenario, pipeline: Optional[PipelineOptions] = None
) -> CoverageTable:
    """Conditioned-replication study: repeat until the target is selected I times.

    Each attempt draws a fresh dataset, selects by cAIC over the candidate
    set, and contributes interval records only when the selected model equals
    the target.  Attempt seeds are pre-assigned from the scenario seed, so
    the result is identical for any worker count.

    Raises:
        TargetNeverSelectedError: after 100 * I unconditioned attempts.
    """
    pipeline = pipeline or PipelineOptions()
    candidates, upsilon = candidate_set_for(scn.sel_matrix, scn.p_total)
    target_index = _target_index(scn, candidates)
    acc = _Accumulator()
    conditioned = 0
    attempts = 0
    budget = pipeline.max_attempt_factor * scn.I

    def attempt_args():
        counter = 0
        while True:
            yield (scn, pipeline, candidates, upsilon, target_index, counter)
            counter += 1

    gen = attempt_args()
    if pipeline.workers > 1:
        with ProcessPoolExecutor(max_workers=pipeline.workers) as pool:
            block = pipeline.workers * 4
            while conditioned < scn.I:
                if attempts >= budget:
                    raise TargetNeverSelectedError(_budget_message(scn, attempts, conditioned))
                args = [next(gen) for _ in range(block)]
                for rec in pool.map(_attempt_star, args):
                    attempts += 1
                    if rec is not None and conditioned < scn.I:
                        _merge_record(acc, rec)
                        conditioned += 1
    else:
        while conditioned < scn.I:
            if attempts >= budget:
                raise TargetNeverSelectedError(_budget_message(scn, attempts, conditioned))
            rec = _attempt_star(next(gen))
            attempts += 1
            if rec is not None:
                _merge_record(acc, rec)
                conditioned += 1
    return CoverageTable(rows=tuple(acc.rows(scn.setting)), attempts=attempts)


def _budget_message(scn, attempts, conditioned):
    return (
        f"target model selected only {conditioned}/{scn.I} times in {attempts} attempts; "
        "aborting per the attempt budget"
    )


def _target_index(scn: SimScenario, candidates: CandidateSet) -> int:
    if scn.target_mask is None:
        mask = np.ones(scn.p_total, dtype=bool)
    else:
        mask = np.asarray(scn.target_mask, dtype=bool)
    for i, spec in enumerate(candidates.specs):
        if np.array_equal(spec.included, mask):
            return i
    raise ValueError("target model is not in the candidate set")


def _merge_record(acc: _Accumulator, rec: list) -> None:
    for method, target, covered, length in rec:
        acc.add(method, target, covered, length)


def _attempt_star(args):
    return _run_attempt(*args)


def _run_attempt(scn, pipeline, candidates, upsilon, target_index, counter):
    """One unconditioned attempt; list of records if the target was selected."""
    ss = np.random.SeedSequence([scn.seed, counter])
    data_seed, b_seed, mc_seed = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    data, u_true = generate_nerm_with_effects(scn, data_seed)
    sel = select_model(
        data,
        candidates,
        SelectOptions(method=scn.method, b_method=scn.b_method, b_reps=scn.b_reps, seed=b_seed),
    )
    if sel.selected_index != target_index:
        return None

    fit_m = sel.fits[sel.selected_index]
    full_idx = _full_index(sel.fits)
    full_fit = sel.fits[full_idx]
    rho_b = sel.rho_values + sel.b_values
    if pipeline.region_form == "orthogonal":
        sigma = sigma_matrix(full_fit)
        region = general_region_orthogonal(sigma, upsilon, rho_b, sel.selected_index)
        region_mu = with_free_tail(region, data.r)
    else:
        region_mu = general_region_nonorthogonal(sel.fits, sel.selected_index, mixed=True)
    batch = draw_region_batch(region_mu, SamplerConfig(B=scn.B, seed=mc_seed))

    beta_true = np.asarray(scn.beta_true, dtype=float)
    records = []

    # fixed parameters
    coords = np.asarray(region_mu.meta["selected_coords"], dtype=int)
    Ws = batch.draws[:, coords]
    fisher = full_fit.fisher_beta[np.ix_(fit_m.spec.indices, fit_m.spec.indices)]
    T_beta = Ws @ sym_inv_sqrt(fisher)
    for local_j, j in enumerate(fit_m.spec.indices):
        c_half, _ = symmetric_critical_value(T_beta[:, local_j], scn.alpha)
        est = fit_m.beta_hat[j]
        records.append(
            ("post-caic", f"beta{j + 1}", _cov(est, c_half, beta_true[j]), 2 * c_half)
        )
        naive = naive_ci_beta(fit_m, j, scn.alpha)
        records.append(
            ("naive-1", f"beta{j + 1}", float(naive.covers(beta_true[j])), naive.length)
        )

    # cluster-mean linear combinations and mixed parameters
    kbar = np.vstack([c.X.mean(axis=0) for c in data.clusters])  # (n, p)
    k_sub = kbar[:, fit_m.spec.indices]
    T_combo = T_beta @ k_sub.T  # (B, n)
    combo_truth = kbar @ beta_true
    combo_est = k_sub @ fit_m.beta_hat_sub
    cov_beta = np.linalg.inv(fit_m.fisher_beta)
    z = _z_value(scn.alpha)
    post_cov = post_len = naive_cov = naive_len = 0.0
    for i in range(data.n):
        c_half, _ = symmetric_critical_value(T_combo[:, i], scn.alpha)
        post_cov += _cov(combo_est[i], c_half, combo_truth[i])
        post_len += 2 * c_half
        se = float(np.sqrt(k_sub[i] @ cov_beta @ k_sub[i]))
        naive_cov += float(abs(combo_est[i] - combo_truth[i]) <= z * se)
        naive_len += 2 * z * se
    records.append(("post-caic", "combo_mean", post_cov / data.n, post_len / data.n))
    records.append(("naive-1", "combo_mean", naive_cov / data.n, naive_len / data.n))

    # mixed parameters: cluster covariate means with the cluster's intercept
    km = build_k_matrix(data, fit_m.spec, full_fit.theta_hat)
    k_inv_root = sym_sqrt(km.inverse)
    head_dim = region_mu.head_dim
    Ws_mu = np.hstack([Ws, batch.draws[:, head_dim:]])
    p_m = fit_m.spec.size
    C = np.zeros((p_m + data.r, data.n))
    C[:p_m, :] = k_sub.T
    for i in range(data.n):
        C[p_m + i, i] = 1.0
    T_mu = Ws_mu @ (k_inv_root @ C)  # (B, n)
    mu_truth = kbar @ beta_true + u_true
    post = np.zeros(2)
    naive1 = np.zeros(2)
    naive2 = np.zeros(2)
    for i in range(data.n):
        target = MixedTarget(k=kbar[i], m=np.ones(1), cluster_index=i)
        est = predict_mixed(fit_m, target)
        c_half, _ = symmetric_critical_value(T_mu[:, i], scn.alpha)
        post += (_cov(est, c_half, mu_truth[i]), 2 * c_half)
        g1, g2 = mse_first_order(fit_m, target)
        se1 = np.sqrt(g1 + g2)
        naive1 += (float(abs(est - mu_truth[i]) <= z * se1), 2 * z * se1)
        se2 = np.sqrt(mse_second_order(fit_m, target))
        naive2 += (float(abs(est - mu_truth[i]) <= z * se2), 2 * z * se2)
    records.append(("post-caic", "mu", post[0] / data.n, post[1] / data.n))
    records.append(("naive-1", "mu", naive1[0] / data.n, naive1[1] / data.n))
    records.append(("naive-2", "mu", naive2[0] / data.n, naive2[1] / data.n))
    return records


def _cov(est: float, half: float, truth: float) -> float:
    return float(abs(est - truth) <= half)


def _z_value(alpha: float) -> float:
    from scipy.special import ndtri

    return float(ndtri(1.0 - alpha / 2.0))


def _full_index(fits: Sequence[FittedLMM]) -> int:
    for i, f in enumerate(fits):
        if f.spec.size == f.data.p_total:
            return i
    return len(fits) - 1


# ---------------------------------------------------------------------------
# Region demonstration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionDemo:
    regions: dict
    partition_fraction: float
    text: str


def region_demo(
    data: ClusteredDataset,
    candidates: CandidateSet,
    opts: Optional[SelectOptions] = None,
    n_draws: int = 100_000,
    seed: int = 1,
) -> RegionDemo:
    """Constraint systems for every possible selected model plus partition MC.

    Fits all candidates, estimates Sigma from the full model, builds the
    region each candidate would produce if selected, and reports the
    fraction of standard-normal draws that fall in exactly one region.
    """
    opts = opts or SelectOptions()
    sel = select_model(data, candidates, opts)
    full_fit = sel.fits[_full_index(sel.fits)]
    sigma = sigma_matrix(full_fit)
    rho_b = sel.rho_values + sel.b_values
    nested = candidates.structure_tag == "nested"
    regions = {}
    for idx, spec in enumerate(candidates.specs):
        if nested:
            reg = nested_region(
                sigma, rho_b, a=candidates.a, K=len(candidates) - 1, p=idx, p0_unknown=True
            )
        else:
            upsilon = ExtendedSelectionMatrix.from_masks([s.included for s in candidates.specs])
            reg = general_region_orthogonal(sigma, upsilon, rho_b, idx)
        regions[spec.label] = reg
    dim = data.p_total
    draws = np.random.default_rng(seed).standard_normal((n_draws, dim))
    counts = membership_counts(list(regions.values()), draws)
    fraction = float((counts == 1).mean())
    lines = []
    for label, reg in regions.items():
        lines.append(f"== region when {label} is selected ==")
        lines.append(render_region_text(reg))
    lines.append(f"fraction of draws in exactly one region: {fraction:.5f}")
    return RegionDemo(regions=regions, partition_fraction=fraction, text="\n".join(lines))
