"""Batched random-intercept selection engine for the simulation harness.

With one random intercept per cluster and a common cluster size m, every
per-cluster matrix used by the criterion lives in span{I, J}: writing
c = psi / (1 + psi m), the GLS matrix is A(c) = (X'X - c S)/se2 with
S = sum_i s_i s_i', so after one generalized eigendecomposition of S
against X'X the profiled deviance, its model dof, and all penalty traces
become scalar functions of c.  That lets a whole block of simulation
attempts (and all their parametric-bootstrap refits) be fitted with a few
batched matrix operations instead of millions of small ones.

Outputs are validated against the reference per-dataset implementations in
lmm/caic by the test suite; this module is internal to the harness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = ["BatchOutcome", "BatchNermSelector"]


@dataclass(frozen=True)
class BatchOutcome:
    """Per-attempt selection summary for a block of attempts."""

    selected: np.ndarray  # (A,) candidate index
    caic: np.ndarray  # (A, n_models)
    rho: np.ndarray  # (A, n_models)
    b: np.ndarray  # (A, n_models)
    theta: np.ndarray  # (A, n_models, 2) = (sigma2_u, sigma2_e)
    n_bootstrap_failed: int


def _spawn(seed, count):
    """Per-model seeds matching the per-dataset selector's spawn discipline."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def _pair_mul(p1, p2, m):
    """(a1 I + b1 J)(a2 I + b2 J) coefficient algebra; J is the all-ones block."""
    a1, b1 = p1
    a2, b2 = p2
    return (a1 * a2, a1 * b2 + b1 * a2 + b1 * b2 * m)


def _pair_sub(p1, p2):
    return (p1[0] - p2[0], p1[1] - p2[1])


def _pair_trace(p, m, n):
    """Total trace over n clusters of size m."""
    return n * m * (p[0] + p[1])


class BatchNermSelector:
    """cAIC selection over candidate masks for stacked NERM attempts.

    All attempts must share the design shape: n clusters of a common size m.
    The bootstrap seed discipline mirrors the per-dataset selector: one seed
    per (attempt, model) spawned from the attempt's bias seed.
    """

    def __init__(self, masks: Sequence[np.ndarray], method: str = "reml", b_reps: int = 200):
        self.masks = [np.asarray(mk, dtype=bool) for mk in masks]
        self.method = method
        self.reml = method == "reml"
        self.b_reps = b_reps

    def run(
        self,
        X: np.ndarray,  # (A, m_tot, p) stacked unit-level designs
        y: np.ndarray,  # (A, m_tot)
        n_clusters: int,
        b_seeds: Sequence[int],  # per-attempt bias seeds
    ) -> BatchOutcome:
        A, m_tot, p_total = X.shape
        n = n_clusters
        if m_tot % n != 0:
            raise ValueError("attempts must have equal-size clusters")
        m = m_tot // n
        n_models = len(self.masks)
        caic = np.empty((A, n_models))
        rho = np.empty((A, n_models))
        b_vals = np.empty((A, n_models))
        theta = np.empty((A, n_models, 2))
        failed = 0
        model_seeds = [_spawn(bs, n_models) for bs in b_seeds]
        for k, mask in enumerate(self.masks):
            Xk = X[:, :, mask]
            res = self._one_model(Xk, y, n, m, [ms[k] for ms in model_seeds])
            caic[:, k] = res["caic"]
            rho[:, k] = res["rho"]
            b_vals[:, k] = res["b"]
            theta[:, k, 0] = res["su2"]
            theta[:, k, 1] = res["se2"]
            failed += res["n_failed"]
        selected = np.argmin(caic, axis=1)
        return BatchOutcome(
            selected=selected, caic=caic, rho=rho, b=b_vals, theta=theta, n_bootstrap_failed=failed
        )

    # -- fitting ------------------------------------------------------------

    def _design(self, Xk, n, m):
        """Shared design-side quantities for a block of attempts."""
        A, m_tot, p = Xk.shape
        xtx = np.einsum("amp,amq->apq", Xk, Xk)
        s = Xk.reshape(A, n, m, p).sum(axis=2)  # (A, n, p)
        S = np.einsum("anp,anq->apq", s, s)
        L = np.linalg.cholesky(xtx)
        Linv = np.linalg.inv(L)
        W = Linv @ S @ np.transpose(Linv, (0, 2, 1))
        lam, Q = np.linalg.eigh((W + np.transpose(W, (0, 2, 1))) / 2.0)
        logdet_xtx = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        # map from response stats to eigenbasis: g = Q' L^-1 v
        proj = np.transpose(Q, (0, 2, 1)) @ Linv  # (A, p, p)
        return {
            "xtx": xtx,
            "s": s,
            "S": S,
            "lam": lam,
            "proj": proj,
            "logdet_xtx": logdet_xtx,
            "p": p,
            "_X": Xk,
        }

    def _y_stats(self, Xk, y2, n, m):
        """b0 = X'y, b1 = sum_c s_c t_c, q0 = |y|^2, q1 = sum_c t_c^2, t."""
        A = Xk.shape[0]
        R = y2.shape[-1]
        t = y2.reshape(A, n, m, R).sum(axis=2)  # (A, n, R)
        b0 = np.einsum("amp,amr->apr", Xk, y2)
        q0 = np.einsum("amr,amr->ar", y2, y2)
        q1 = np.einsum("anr,anr->ar", t, t)
        return b0, t, q0, q1

    def _fit(self, design, b0, t, q0, q1, n, m):
        """Profiled fit over u = c*m in [0, 1); returns (psi, se2, crit)."""
        A = b0.shape[0]
        R = b0.shape[-1]
        lam = design["lam"]  # (A, p)
        proj = design["proj"]
        g0 = proj @ b0  # (A, p, R)
        b1 = np.einsum("anp,anr->apr", design["s"], t)
        g1 = proj @ b1
        m_tot = n * m
        dof = m_tot - design["p"] if self.reml else m_tot

        def crit(u):
            # u: (A, R) in [0, 1)
            c = u / m
            den = 1.0 - c[:, None, :] * lam[:, :, None]  # (A, p, R)
            num = g0 - c[:, None, :] * g1
            rss = q0 - c * q1 - (num * num / den).sum(axis=1)
            val = dof * np.log(np.maximum(rss, 1e-300)) - n * np.log1p(-u)
            if self.reml:
                val = val + design["logdet_xtx"][:, None] + np.log(den).sum(axis=1)
            return np.where(rss <= 0, np.inf, val), rss

        grid_psi = np.concatenate([[0.0], np.logspace(-4.0, 5.0, 30)])
        grid_u = grid_psi * m / (1.0 + grid_psi * m)
        crits = np.stack([crit(np.full((A, R), u))[0] for u in grid_u])  # (G, A, R)
        best = np.argmin(crits, axis=0)
        lo = grid_u[np.maximum(best - 1, 0)]
        hi_idx = np.minimum(best + 1, grid_u.shape[0] - 1)
        hi = grid_u[hi_idx]
        hi = np.where(best == grid_u.shape[0] - 1, 1.0 - 1e-12, hi)
        invphi = (np.sqrt(5.0) - 1.0) / 2.0
        x1 = hi - invphi * (hi - lo)
        x2 = lo + invphi * (hi - lo)
        f1 = crit(x1)[0]
        f2 = crit(x2)[0]
        for _ in range(60):
            take_low = f1 < f2
            hi = np.where(take_low, x2, hi)
            lo = np.where(take_low, lo, x1)
            x1_new = np.where(take_low, hi - invphi * (hi - lo), x2)
            x2_new = np.where(take_low, x1, lo + invphi * (hi - lo))
            probe = np.where(take_low, x1_new, x2_new)
            f_probe = crit(probe)[0]
            f1, f2 = np.where(take_low, f_probe, f2), np.where(take_low, f1, f_probe)
            x1, x2 = x1_new, x2_new
        u_hat = (lo + hi) / 2.0
        crit_mid, rss_mid = crit(u_hat)
        crit_zero, rss_zero = crit(np.zeros_like(u_hat))
        at_zero = crit_zero <= crit_mid
        u_hat = np.where(at_zero, 0.0, u_hat)
        rss = np.where(at_zero, rss_zero, rss_mid)
        psi = u_hat / (m * (1.0 - u_hat))
        se2 = rss / dof
        return psi, se2

    # -- closed-form criterion pieces ----------------------------------------

    def _one_model(self, Xk, y, n, m, seeds):
        A, m_tot, p = Xk.shape
        design = self._design(Xk, n, m)
        y2 = y[:, :, None]
        b0, t, q0, q1 = self._y_stats(Xk, y2, n, m)
        psi, se2 = self._fit(design, b0, t, q0, q1, n, m)
        psi = psi[:, 0]
        se2 = se2[:, 0]
        su2 = psi * se2

        c = psi / (1.0 + psi * m)  # (A,)
        shrink = 1.0 - c * m
        lam = design["lam"]
        # beta_hat at the optimum
        A_mat = (design["xtx"] - c[:, None, None] * design["S"]) / se2[:, None, None]
        bvec = (b0[:, :, 0] - c[:, None] * np.einsum("anp,an->ap", design["s"], t[:, :, 0])) / se2[
            :, None
        ]
        beta = np.linalg.solve(A_mat, bvec[:, :, None])[:, :, 0]

        # effective dof: sum of per-cluster shrinkages + X-part via eigenvalues
        d = 2.0 * c - c * c * m
        rho = n * (psi * m / (1.0 + psi * m)) + (
            (1.0 - d[:, None] * lam) / (1.0 - c[:, None] * lam)
        ).sum(axis=1)

        # conditional -2 loglik at (beta_hat, u_tilde)
        rsum = t[:, :, 0] - np.einsum("anp,ap->an", design["s"], beta)  # (A, n)
        res2 = (
            q0[:, 0]
            - 2.0 * np.einsum("ap,ap->a", b0[:, :, 0], beta)
            + np.einsum("ap,apq,aq->a", beta, design["xtx"], beta)
        )
        rss_c = res2 - d * (rsum * rsum).sum(axis=1)
        minus2_llc = m_tot * np.log(2.0 * np.pi * se2) + rss_c / se2

        pen = self._penalty_terms(design, n, m, psi, se2, A_mat)
        t2_bias, n_failed = self._bootstrap_bias(design, n, m, psi, se2, su2, pen, seeds)
        b_val = pen["t1"] + pen["t3"] - pen["t2_coef_e"] * t2_bias[:, 1]
        caic = minus2_llc + 2.0 * rho + 2.0 * b_val
        return {
            "caic": caic,
            "rho": rho,
            "b": b_val,
            "su2": su2,
            "se2": se2,
            "n_failed": n_failed,
        }

    def _penalty_terms(self, design, n, m, psi, se2, A_mat):
        """Deterministic penalty traces via the I/J coefficient algebra."""
        Amt = A_mat
        Ainv = np.linalg.inv(Amt)
        c = psi / (1.0 + psi * m)
        shrink = 1.0 - c * m
        zero = np.zeros_like(c)
        one = np.ones_like(c)

        vinv = (1.0 / se2, -c / se2)
        vinv_r = (one, -c)
        m_u = (zero, -2.0 * shrink)
        m_e = (-one, 2.0 * c)
        v_u = (zero, one)
        v_e = (one, zero)
        vinv_vu = (zero, shrink / se2)
        vinv_ve = vinv
        pairs_m = [m_u, m_e]
        pairs_v = [v_u, v_e]
        pairs_vinv_v = [vinv_vu, vinv_ve]

        xtx, S = design["xtx"], design["S"]

        def sandwich(pair):
            # U'(aI+bJ)U summed over clusters, U = Vinv X
            a, b = pair
            coef_s = a * (c * c * m - 2.0 * c) + b * shrink * shrink
            return (a[:, None, None] * xtx + coef_s[:, None, None] * S) / (se2 * se2)[
                :, None, None
            ]

        def tr_ainv(Mats):
            return np.einsum("aij,aji->a", Ainv, Mats)

        h = 2
        tr_m_pvp = np.empty((h, h, c.shape[0]))
        cov_score = np.empty((h, h, c.shape[0]))
        t3 = np.zeros((h, h, c.shape[0]))
        B = [sandwich(pv) for pv in pairs_v]
        C = [sandwich(pm) for pm in pairs_m]
        rinv = (1.0 / se2, zero)
        rinv_re_rinv = (1.0 / (se2 * se2), zero)
        for i in range(h):
            for j in range(h):
                mvv = _pair_mul(pairs_m[i], pairs_vinv_v[j], m)
                s1 = _pair_trace(_pair_mul(mvv, vinv, m), m, n)
                D = sandwich(mvv)
                tr_m_pvp[i, j] = (
                    s1 - tr_ainv(D + np.transpose(D, (0, 2, 1))) + np.einsum(
                        "aij,ajk,akl,ali->a", Ainv, B[j], Ainv, C[i]
                    )
                )
                cross = _pair_trace(_pair_mul(pairs_vinv_v[i], pairs_vinv_v[j], m), m, n)
                Wc_ij = sandwich(_pair_mul(pairs_v[i], pairs_vinv_v[j], m))
                Wc_ji = sandwich(_pair_mul(pairs_v[j], pairs_vinv_v[i], m))
                cov_score[i, j] = 0.5 * (
                    cross
                    - tr_ainv(Wc_ij + np.transpose(Wc_ij, (0, 2, 1)))
                    + np.einsum("aij,ajk,akl,ali->a", Ainv, B[i], Ainv, B[j])
                )
                # t3 trace: only the R_e slope contributes for i
                if i == 1:
                    sub = _pair_mul(pairs_vinv_v[j], vinv, m)
                    if j == 1:
                        sub = _pair_sub(sub, rinv_re_rinv)
                    t3[i, j] = _pair_trace(sub, m, n)
        if self.reml:
            info = cov_score
        else:
            info = np.empty_like(cov_score)
            for i in range(h):
                for j in range(h):
                    info[i, j] = 0.5 * _pair_trace(
                        _pair_mul(pairs_vinv_v[i], pairs_vinv_v[j], m), m, n
                    )
        info_mat = np.transpose(info, (2, 0, 1))
        info_inv = np.linalg.inv(info_mat)
        cov_mat = np.transpose(cov_score, (2, 0, 1))
        cov_tstar = info_inv @ cov_mat @ info_inv

        t1 = -0.5 * np.einsum("aij,ija->a", info_inv, tr_m_pvp)
        t3_val = -np.einsum("aij,ija->a", cov_tstar, t3)
        t2_coef_e = n * m * c / se2
        tr_pv = np.empty((h, c.shape[0]))
        for j in range(h):
            tr_pv[j] = _pair_trace(pairs_vinv_v[j], m, n) - tr_ainv(B[j])
        return {
            "t1": t1,
            "t3": t3_val,
            "t2_coef_e": t2_coef_e,
            "tr_pv": tr_pv,
            "info_inv": info_inv,
            "Ainv": Ainv,
            "B": B,
        }

    def _bootstrap_bias(self, design, n, m, psi, se2, su2, pen, seeds):
        """E(theta**) per attempt via refits with the score control variate."""
        A = psi.shape[0]
        R = self.b_reps
        m_tot = n * m
        y_star = np.empty((A, m_tot, R))
        for a in range(A):
            rng = np.random.default_rng(seeds[a])
            u_star = rng.normal(0.0, np.sqrt(max(su2[a], 0.0)), size=(n, R))
            e_star = rng.normal(0.0, np.sqrt(se2[a]), size=(m_tot, R))
            y_star[a] = np.repeat(u_star, m, axis=0) + e_star

        b0, t, q0, q1 = self._y_stats_from_design(design, y_star, n, m)
        psi_star, se2_star = self._fit(design, b0, t, q0, q1, n, m)
        theta_star = np.stack([psi_star * se2_star, se2_star], axis=-1)  # (A, R, 2)
        ok = np.isfinite(theta_star).all(axis=-1) & (se2_star > 0)
        n_failed = int((~ok).sum())
        if n_failed > 0.05 * A * R:
            raise RuntimeError(
                f"{n_failed}/{A * R} bootstrap refits failed while estimating the cAIC penalty"
            )

        deltas = theta_star - np.stack([su2, se2], axis=-1)[:, None, :]
        scores = self._score_stats(design, y_star, b0, t, q0, q1, n, m, psi, se2, pen)
        first_order = np.einsum("aij,ajr->air", pen["info_inv"], scores)  # (A, 2, R)
        resid = deltas - np.transpose(first_order, (0, 2, 1))
        resid = np.where(ok[:, :, None], resid, 0.0)
        counts = np.maximum(ok.sum(axis=1), 1)
        bias = resid.sum(axis=1) / counts[:, None]
        return bias, n_failed

    def _y_stats_from_design(self, design, y_star, n, m):
        A, m_tot, R = y_star.shape
        Xk = design["_X"]
        t = y_star.reshape(A, n, m, R).sum(axis=2)
        b0 = np.einsum("amp,amr->apr", Xk, y_star)
        q0 = np.einsum("amr,amr->ar", y_star, y_star)
        q1 = np.einsum("anr,anr->ar", t, t)
        return b0, t, q0, q1

    def _score_stats(self, design, y_star, b0, t, q0, q1, n, m, psi, se2, pen):
        """Scores of the fitting criterion at the data theta for each draw."""
        c = (psi / (1.0 + psi * m))[:, None]  # (A, 1)
        shrink = (1.0 - c * m)
        se2c = se2[:, None]
        s = design["s"]
        b1 = np.einsum("anp,anr->apr", s, t)  # (A, p, R)
        uty = (b0 - c[:, :, None] * b1) / se2c[:, :, None]
        corr = np.einsum("apq,aqr->apr", pen["Ainv"], uty)
        s_corr = np.einsum("anp,apr->anr", s, corr)
        wsum = (shrink / se2c)[:, :, None] * (t - s_corr)  # (A, n, R)
        d = 2.0 * c - c * c * m
        vinv_y_sq = (q0 - d * q1) / (se2c * se2c)
        u_vinv_y = (b0 - d[:, :, None] * b1) / (se2c * se2c)[:, :, None]
        ww = (
            vinv_y_sq
            - 2.0 * np.einsum("apr,apr->ar", corr, u_vinv_y)
            + np.einsum("apr,apq,aqr->ar", corr, pen["B"][1], corr)
        )
        s_u = 0.5 * ((wsum * wsum).sum(axis=1) - pen["tr_pv"][0][:, None])
        s_e = 0.5 * (ww - pen["tr_pv"][1][:, None])
        return np.stack([s_u, s_e], axis=1)  # (A, 2, R)
