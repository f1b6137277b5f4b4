"""Clustered survey CSV ingestion, log-shift transform, report emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .intervals import IntervalResult
from .lmm import Cluster, ClusteredDataset, ModelSpec, fit_model

__all__ = [
    "SurveyRecord",
    "CsvSchema",
    "load_clustered_csv",
    "weighted_covariate_means",
    "fisher_skewness",
    "log_shift_transform",
    "default_shift_grid",
    "reml_residual_fn",
    "emit_report",
    "read_report",
]


@dataclass(frozen=True)
class SurveyRecord:
    """One survey row: cluster id, response, covariates, sampling weight."""

    cluster_id: str
    y: float
    x: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        if not self.weight > 0:
            raise ValueError("weight must be positive")


@dataclass(frozen=True)
class CsvSchema:
    """Column layout of a clustered CSV file.

    x_cols None means every column besides cluster/y/weight is a covariate.
    An intercept column is prepended when add_intercept is set, and counts
    toward the forced-covariate prefix a.
    """

    cluster_col: str = "cluster_id"
    y_col: str = "y"
    x_cols: Optional[Sequence[str]] = None
    weight_col: Optional[str] = "weight"
    add_intercept: bool = True
    a: int = 1


def load_clustered_csv(path, schema: Optional[CsvSchema] = None) -> tuple[ClusteredDataset, np.ndarray]:
    """Read a clustered CSV into a dataset plus per-record weights.

    Clusters keep their order of first appearance; rows with missing or
    unparseable values are rejected with their line number.
    """
    schema = schema or CsvSchema()
    records = _read_records(path, schema)
    by_cluster: dict = {}
    order = []
    for rec in records:
        if rec.cluster_id not in by_cluster:
            by_cluster[rec.cluster_id] = []
            order.append(rec.cluster_id)
        by_cluster[rec.cluster_id].append(rec)
    clusters = []
    weights = []
    for cid in order:
        rows = by_cluster[cid]
        y = np.array([r.y for r in rows])
        X = np.vstack([r.x for r in rows])
        if schema.add_intercept:
            X = np.column_stack([np.ones(len(rows)), X])
        clusters.append(Cluster(y=y, X=X, Z=np.ones((len(rows), 1))))
        weights.extend(r.weight for r in rows)
    data = ClusteredDataset(clusters, a=schema.a, intercept=schema.add_intercept)
    return data, np.array(weights)


def _read_records(path, schema: CsvSchema) -> list[SurveyRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty CSV file") from None
        header = [h.strip() for h in header]
        for col in (schema.cluster_col, schema.y_col):
            if col not in header:
                raise ValueError(f"required column {col!r} missing from header")
        if schema.x_cols is None:
            skip = {schema.cluster_col, schema.y_col, schema.weight_col}
            x_cols = [h for h in header if h not in skip]
        else:
            x_cols = list(schema.x_cols)
            for col in x_cols:
                if col not in header:
                    raise ValueError(f"covariate column {col!r} missing from header")
        pos = {h: i for i, h in enumerate(header)}
        has_weight = schema.weight_col is not None and schema.weight_col in header
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                cid = row[pos[schema.cluster_col]].strip()
                y = _parse_float(row[pos[schema.y_col]], lineno, schema.y_col)
                x = np.array([_parse_float(row[pos[c]], lineno, c) for c in x_cols])
                w = _parse_float(row[pos[schema.weight_col]], lineno, schema.weight_col) if has_weight else 1.0
            except IndexError:
                raise ValueError(f"line {lineno}: too few fields") from None
            if not cid:
                raise ValueError(f"line {lineno}: empty cluster id")
            records.append(SurveyRecord(cluster_id=cid, y=y, x=x, weight=w))
    if not records:
        raise ValueError("CSV contains no data rows")
    return records


def _parse_float(cell: str, lineno: int, col: str) -> float:
    cell = cell.strip()
    if cell == "" or cell.lower() in ("na", "nan"):
        raise ValueError(f"line {lineno}: missing value in column {col!r}")
    try:
        return float(cell)
    except ValueError:
        raise ValueError(f"line {lineno}: cannot parse {cell!r} in column {col!r}") from None


def weighted_covariate_means(records: Sequence[SurveyRecord]) -> dict:
    """Per-cluster weighted covariate means sum(w x) / sum(w)."""
    sums: dict = {}
    wsum: dict = {}
    order = []
    for rec in records:
        if rec.cluster_id not in sums:
            sums[rec.cluster_id] = np.zeros_like(rec.x)
            wsum[rec.cluster_id] = 0.0
            order.append(rec.cluster_id)
        sums[rec.cluster_id] = sums[rec.cluster_id] + rec.weight * rec.x
        wsum[rec.cluster_id] += rec.weight
    out = {}
    for cid in order:
        if wsum[cid] <= 0:
            raise ValueError(f"cluster {cid!r} has zero total weight")
        out[cid] = sums[cid] / wsum[cid]
    return out


# ---------------------------------------------------------------------------
# Log-shift transform
# ---------------------------------------------------------------------------


def fisher_skewness(values: np.ndarray) -> float:
    """Third standardised moment; zero for (near-)constant input."""
    v = np.asarray(values, dtype=float)
    centered = v - v.mean()
    m2 = float(np.mean(centered**2))
    if m2 <= 1e-300 * max(1.0, float(np.mean(v * v))):
        return 0.0
    m3 = float(np.mean(centered**3))
    return m3 / m2**1.5


def default_shift_grid(y: np.ndarray, grid_points: int = 200) -> np.ndarray:
    """Equally spaced shift grid inside the response range, keeping y+c > 0."""
    y = np.asarray(y, dtype=float)
    rng = float(y.max() - y.min())
    eps = 1e-6 * max(rng, 1.0)
    lo = max(eps - float(y.min()), 0.0) + eps
    hi = float(y.max())
    if hi <= lo:
        hi = lo + max(eps, 1.0)
    return np.linspace(lo, hi, grid_points)


def log_shift_transform(
    y: np.ndarray,
    residual_fn: Callable[[np.ndarray], np.ndarray],
    grid: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, float]:
    """Shifted log transform minimising |skewness| of the model residuals.

    Evaluates log(y + c) over the grid, scores each candidate by the Fisher
    skewness of residual_fn applied to the transformed response, and returns
    the transform at the minimiser (ties to the smallest c).  Residuals are
    the marginal ones of a full-model fit in the intended workflow.
    """
    y = np.asarray(y, dtype=float)
    grid = default_shift_grid(y) if grid is None else np.asarray(grid, dtype=float)
    feasible = grid[y.min() + grid > 0]
    if feasible.size == 0:
        raise ValueError("no grid point keeps y + c positive")
    best_c = None
    best_skew = math.inf
    for c in np.sort(feasible):
        y_l = np.log(y + c)
        skew = abs(fisher_skewness(residual_fn(y_l)))
        if skew < best_skew - 1e-15:
            best_skew = skew
            best_c = float(c)
    return np.log(y + best_c), best_c


def reml_residual_fn(template: ClusteredDataset, method: str = "reml") -> Callable[[np.ndarray], np.ndarray]:
    """Marginal full-model residuals y - X beta_hat on the template design."""
    full = ModelSpec(included=np.ones(template.p_total, dtype=bool), label="full")
    sizes = template.cluster_sizes

    def residuals(y_new: np.ndarray) -> np.ndarray:
        clusters = []
        start = 0
        for c, m_i in zip(template.clusters, sizes):
            clusters.append(Cluster(y=y_new[start : start + m_i], X=c.X, Z=c.Z))
            start += m_i
        data = ClusteredDataset(clusters, a=template.a, intercept=template.intercept)
        fit = fit_model(data, full, method=method)
        return data.stack_y() - data.stack_x() @ fit.beta_hat

    return residuals


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def emit_report(intervals: Sequence[IntervalResult], path, format: str = "csv") -> None:
    """Write intervals as CSV plus a commented length-summary block."""
    if format != "csv":
        raise ValueError("only csv reports are supported")
    if len(intervals) == 0:
        raise ValueError("no intervals to report")
    lengths = np.array([iv.length for iv in intervals])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "method", "estimate", "lower", "upper", "alpha", "B", "seed"])
        for iv in intervals:
            meta = iv.mc_meta
            writer.writerow(
                [
                    iv.target,
                    iv.method,
                    f"{iv.point_estimate:.12g}",
                    f"{iv.lower:.12g}",
                    f"{iv.upper:.12g}",
                    f"{iv.alpha:.12g}",
                    meta.B if meta else "",
                    meta.seed if meta else "",
                ]
            )
        fh.write(f"# lengths min={lengths.min():.12g} max={lengths.max():.12g}\n")
        fh.write(
            f"# lengths median={np.median(lengths):.12g} mean={lengths.mean():.12g} "
            f"sd={lengths.std(ddof=1) if lengths.size > 1 else 0.0:.12g}\n"
        )


def read_report(path) -> list[dict]:
    """Parse an emitted report back into row dictionaries (summary skipped)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in reader:
            rows.append(
                {
                    "target": row["target"],
                    "method": row["method"],
                    "estimate": float(row["estimate"]),
                    "lower": float(row["lower"]),
                    "upper": float(row["upper"]),
                    "alpha": float(row["alpha"]),
                    "B": int(row["B"]) if row["B"] else None,
                    "seed": int(row["seed"]) if row["seed"] else None,
                }
            )
    return rows
