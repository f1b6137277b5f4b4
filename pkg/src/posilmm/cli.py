"""Command-line entry points.

Subcommands: simulate, region-demo, fit, select, ci, transform.
Exit codes: 0 ok, 2 non-convergence, 3 target never selected.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import tomllib

import numpy as np

from . import dataio, simulation
from .caic import CandidateSet, SelectOptions, select_model
from .intervals import naive_ci_beta, naive_ci_combo, naive_ci_mixed, posi_ci_beta, posi_ci_linear_combo, posi_ci_mixed, draw_region_batch
from .lmm import ConvergenceError, MixedTarget, ModelSpec, fit_model
from .regions import ExtendedSelectionMatrix, general_region_orthogonal, sigma_matrix, with_free_tail
from .sampler import SamplerConfig
from .simulation import PipelineOptions, TargetNeverSelectedError, region_demo, run_until_selected, scenario

EXIT_OK = 0
EXIT_NONCONVERGENCE = 2
EXIT_TARGET_NEVER_SELECTED = 3


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except TargetNeverSelectedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TARGET_NEVER_SELECTED
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posilmm")
    sub = parser.add_subparsers(required=True)

    sim = sub.add_parser("simulate", help="conditioned-replication coverage study")
    sim.add_argument("--setting", default="S1", choices=["S1", "S2"])
    sim.add_argument("--n", type=int, default=30)
    sim.add_argument("--mi", type=int, default=5)
    sim.add_argument("--sel-matrix", default="v2", choices=["v2", "v3", "v4"])
    sim.add_argument("--I", type=int, default=500, dest="reps")
    sim.add_argument("--B", type=int, default=5000)
    sim.add_argument("--alpha", type=float, default=0.05)
    sim.add_argument("--seed", type=int, default=42)
    sim.add_argument("--b-reps", type=int, default=200)
    sim.add_argument("--method", default="reml", choices=["reml", "ml"])
    sim.add_argument("--region-form", default="orthogonal", choices=["orthogonal", "nonorthogonal"])
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--out", required=True)
    sim.set_defaults(handler=_cmd_simulate)

    demo = sub.add_parser("region-demo", help="worked selection-region geometry")
    demo.add_argument("--config", default=None, help="TOML file describing the demo")
    demo.add_argument("--out", required=True)
    demo.add_argument("--seed", type=int, default=1)
    demo.set_defaults(handler=_cmd_region_demo)

    fit_p = sub.add_parser("fit", help="fit the full model to a clustered CSV")
    _add_data_args(fit_p)
    fit_p.add_argument("--method", default="reml", choices=["reml", "ml"])
    fit_p.set_defaults(handler=_cmd_fit)

    sel_p = sub.add_parser("select", help="cAIC selection over all-subset candidates")
    _add_data_args(sel_p)
    sel_p.add_argument("--method", default="reml", choices=["reml", "ml"])
    sel_p.add_argument("--b-reps", type=int, default=200)
    sel_p.set_defaults(handler=_cmd_select)

    ci_p = sub.add_parser("ci", help="post-selection intervals on a clustered CSV")
    _add_data_args(ci_p)
    ci_p.add_argument("--targets", default="betas", choices=["betas", "combos", "mixed"])
    ci_p.add_argument("--alpha", type=float, default=0.05)
    ci_p.add_argument("--B", type=int, default=10000)
    ci_p.add_argument("--method", default="reml", choices=["reml", "ml"])
    ci_p.add_argument("--b-reps", type=int, default=200)
    ci_p.set_defaults(handler=_cmd_ci)

    tr_p = sub.add_parser("transform", help="log-shift transform of the response")
    _add_data_args(tr_p)
    tr_p.add_argument("--grid-points", type=int, default=200)
    tr_p.set_defaults(handler=_cmd_transform)

    return parser


def _add_data_args(p) -> None:
    p.add_argument("--data", required=True, help="clustered CSV path")
    p.add_argument("--cluster-col", default="cluster_id")
    p.add_argument("--y-col", default="y")
    p.add_argument("--weight-col", default="weight")
    p.add_argument("--forced", type=int, default=1, help="forced covariates incl. intercept")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _schema(args) -> dataio.CsvSchema:
    return dataio.CsvSchema(
        cluster_col=args.cluster_col,
        y_col=args.y_col,
        weight_col=args.weight_col,
        add_intercept=True,
        a=args.forced,
    )


def _cmd_simulate(args) -> int:
    scn = scenario(
        args.setting,
        n=args.n,
        m_i=args.mi,
        sel_matrix=args.sel_matrix,
        I=args.reps,
        B=args.B,
        alpha=args.alpha,
        seed=args.seed,
        b_reps=args.b_reps,
        method=args.method,
    )
    table = run_until_selected(
        scn, PipelineOptions(region_form=args.region_form, workers=args.workers)
    )
    table.to_csv(args.out)
    print(f"wrote {args.out} ({len(table.rows)} rows, {table.attempts} attempts)")
    return EXIT_OK


def _cmd_region_demo(args) -> int:
    cfg = {}
    if args.config:
        with open(args.config, "rb") as fh:
            cfg = tomllib.load(fh)
    kind = cfg.get("kind", "nested")
    n = int(cfg.get("n", 30))
    m_i = int(cfg.get("m_i", 5))
    sigma2_u = float(cfg.get("sigma2_u", 1.0))
    sigma2_e = float(cfg.get("sigma2_e", 0.5))
    beta = list(cfg.get("beta", [2.25, -1.1, 2.43]))
    seed = int(cfg.get("seed", args.seed))
    n_draws = int(cfg.get("n_draws", 100_000))
    b_reps = int(cfg.get("b_reps", 200))
    scn = simulation.SimScenario(
        n=n,
        m_i=m_i,
        sigma2_e=sigma2_e,
        sigma2_u=sigma2_u,
        beta_true=tuple(beta),
        sel_matrix="v2",
        seed=seed,
        setting="demo",
    )
    data = simulation.generate_nerm(scn, seed)
    data = simulation.ClusteredDataset(data.clusters, a=1, intercept=True)
    p = len(beta)
    masks = [[True] + [False] * (p - 1)]
    for j in range(1, p):
        masks.append(masks[-1][:j] + [True] + [False] * (p - j - 1))
    specs = [
        ModelSpec(included=np.array(m), label="M_" + "".join(str(i + 1) for i in np.flatnonzero(m)))
        for m in masks
    ]
    tag = "nested"
    if kind == "all" and p == 3:
        extra = np.array([True, False, True])
        specs.append(ModelSpec(included=extra, label="M_13"))
        tag = "general"
    candidates = CandidateSet(specs=tuple(specs), structure_tag=tag, a=1)
    demo = region_demo(
        data,
        candidates,
        SelectOptions(b_reps=b_reps, seed=seed),
        n_draws=n_draws,
        seed=seed,
    )
    with open(args.out, "w") as fh:
        fh.write(demo.text + "\n")
    print(f"wrote {args.out} (partition fraction {demo.partition_fraction:.5f})")
    return EXIT_OK


def _cmd_fit(args) -> int:
    data, _ = dataio.load_clustered_csv(args.data, _schema(args))
    spec = ModelSpec(included=np.ones(data.p_total, dtype=bool), label="full")
    fit = fit_model(data, spec, method=args.method)
    payload = {
        "beta_hat": fit.beta_hat.tolist(),
        "sigma2_u": fit.theta_hat.theta[0],
        "sigma2_e": fit.theta_hat.theta[1],
        "rho_hat": fit.rho_hat,
        "loglik_marginal": fit.loglik_marginal,
        "loglik_conditional": fit.loglik_conditional,
        "boundary": fit.boundary,
        "method": fit.method,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
    print(f"wrote {args.out}")
    return EXIT_OK


def _all_subset_candidates(data, forced):
    return simulation.candidate_pool(forced, data.p_total)


def _cmd_select(args) -> int:
    data, _ = dataio.load_clustered_csv(args.data, _schema(args))
    cands, _ = _all_subset_candidates(data, args.forced)
    result = select_model(
        data, cands, SelectOptions(method=args.method, b_reps=args.b_reps, seed=args.seed)
    )
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "caic", "rho_hat", "b_hat", "selected"])
        for i, spec in enumerate(cands.specs):
            writer.writerow(
                [
                    spec.label,
                    f"{result.caic_values[i]:.12g}",
                    f"{result.rho_values[i]:.12g}",
                    f"{result.b_values[i]:.12g}",
                    int(i == result.selected_index),
                ]
            )
    print(f"wrote {args.out} (selected {cands.specs[result.selected_index].label})")
    return EXIT_OK


def _cmd_ci(args) -> int:
    schema = _schema(args)
    data, weights = dataio.load_clustered_csv(args.data, schema)
    cands, upsilon = _all_subset_candidates(data, args.forced)
    result = select_model(
        data, cands, SelectOptions(method=args.method, b_reps=args.b_reps, seed=args.seed)
    )
    fits = result.fits
    fit_m = fits[result.selected_index]
    full_fit = fits[simulation._full_index(fits)]
    sigma = sigma_matrix(full_fit)
    rho_b = result.rho_values + result.b_values
    region = general_region_orthogonal(sigma, upsilon, rho_b, result.selected_index)
    region_mu = with_free_tail(region, data.r)
    cfg = SamplerConfig(B=args.B, seed=args.seed)
    batch = draw_region_batch(region_mu, cfg)

    intervals = []
    if args.targets == "betas":
        for j in fit_m.spec.indices:
            intervals.append(
                posi_ci_beta(fit_m, region_mu, int(j), args.alpha, cfg, full_fit=full_fit, batch=batch)
            )
            intervals.append(naive_ci_beta(fit_m, int(j), args.alpha))
    else:
        k_by_cluster = _weighted_means_matrix(args.data, schema, data)
        for i in range(data.n):
            if args.targets == "combos":
                intervals.append(
                    posi_ci_linear_combo(
                        fit_m, region_mu, k_by_cluster[i], args.alpha, cfg,
                        full_fit=full_fit, batch=batch,
                    )
                )
                intervals.append(naive_ci_combo(fit_m, k_by_cluster[i], args.alpha))
            else:
                target = MixedTarget(k=k_by_cluster[i], m=np.ones(data.q), cluster_index=i)
                intervals.append(
                    posi_ci_mixed(
                        fit_m, region_mu, target, args.alpha, cfg,
                        full_fit=full_fit, batch=batch,
                    )
                )
                intervals.append(naive_ci_mixed(fit_m, target, args.alpha, order=2))
    dataio.emit_report(intervals, args.out)
    print(f"wrote {args.out} ({len(intervals)} intervals)")
    return EXIT_OK


def _weighted_means_matrix(path, schema, data) -> np.ndarray:
    records = dataio._read_records(path, schema)
    means = dataio.weighted_covariate_means(records)
    rows = []
    for cid, mean in means.items():
        rows.append(np.concatenate([[1.0], mean]) if schema.add_intercept else mean)
    return np.vstack(rows)


def _cmd_transform(args) -> int:
    schema = _schema(args)
    data, _ = dataio.load_clustered_csv(args.data, schema)
    y = data.stack_y()
    grid = dataio.default_shift_grid(y, args.grid_points)
    residual_fn = dataio.reml_residual_fn(data)
    y_l, c_star = dataio.log_shift_transform(y, residual_fn, grid)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "y_log_shifted"])
        for orig, trans in zip(y, y_l):
            writer.writerow([f"{orig:.12g}", f"{trans:.12g}"])
        fh.write(f"# c_star={c_star:.12g}\n")
    print(f"wrote {args.out} (c* = {c_star:.6g})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
