"""Seeded sampling from N(0, I) truncated to a quadratic-constraint region.

Two methods: exact rejection from standard-normal proposals (default), and a
hit-and-run chain with exact sampling of the one-dimensional conditional
along each random direction, used as the fallback when the acceptance mass
is too small for rejection.  Constraints never touch a region's free tail,
so tail coordinates are drawn directly and appended; the joint law equals
sampling the full region.

All draws are deterministic given the config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .regions import ConstraintSet, QuadraticConstraint, contains_batch, with_free_tail

__all__ = [
    "SamplerConfig",
    "SampleBatch",
    "AcceptanceTooLowError",
    "ChainStuckError",
    "sample_truncated",
    "sample_posi_joint",
    "acceptance_estimate",
    "choose_method",
]

_CHUNK = 8192
_INF = float("inf")


class AcceptanceTooLowError(RuntimeError):
    """Rejection sampling would exceed its proposal budget."""


class ChainStuckError(RuntimeError):
    """Hit-and-run failed to move for too many consecutive steps."""


@dataclass(frozen=True)
class SamplerConfig:
    """Controls for truncated-normal sampling.

    burn_in and thinning apply to the chain method only; max_proposals caps
    the rejection budget.
    """

    B: int = 10000
    seed: Optional[int] = None
    method: str = "rejection"  # "rejection" | "chain"
    burn_in: int = 1000
    thinning: int = 5
    max_proposals: int = 20_000_000

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if self.max_proposals < self.B:
            raise ValueError("max_proposals must be at least B")
        if self.method not in ("rejection", "chain"):
            raise ValueError("method must be 'rejection' or 'chain'")


@dataclass(frozen=True)
class SampleBatch:
    """A batch of truncated-normal draws with its generation metadata."""

    draws: np.ndarray  # (B, dim)
    seed: Optional[int]
    method: str
    acceptance_rate: Optional[float] = None
    chain_diagnostics: Optional[dict] = None

    @property
    def B(self) -> int:
        return self.draws.shape[0]

    @property
    def dim(self) -> int:
        return self.draws.shape[1]

    def to_csv(self, path) -> None:
        header = f"seed={self.seed} method={self.method} B={self.B} dim={self.dim}"
        np.savetxt(path, self.draws, delimiter=",", header=header, fmt="%.17g")


def acceptance_estimate(region: ConstraintSet, n_probe: int = 10000, seed: Optional[int] = None) -> float:
    """Fraction of standard-normal probes landing inside the region."""
    if n_probe < 100:
        raise ValueError("need at least 100 probes")
    if not region.constraints:
        return 1.0
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n_probe, region.head_dim))
    ok = np.ones(n_probe, dtype=bool)
    for c in region.constraints:
        ok &= c.satisfied(W)
    return float(ok.mean())


def choose_method(region: ConstraintSet, cfg: SamplerConfig, threshold: float = 1e-3) -> str:
    """Auto-select the sampler: rejection unless the acceptance mass is tiny."""
    if cfg.method == "chain":
        return "chain"
    est = acceptance_estimate(region, n_probe=10000, seed=cfg.seed)
    return "chain" if est < threshold else "rejection"


def sample_truncated(region: ConstraintSet, cfg: SamplerConfig) -> SampleBatch:
    """B draws from N(0, I_dim) restricted to the region.

    Free-tail coordinates are unconstrained by construction and are drawn
    from an independent substream, so the batch law matches sampling the
    full region directly.

    Raises:
        AcceptanceTooLowError: rejection exhausted max_proposals.
        ChainStuckError: the chain could not move for 1000 consecutive steps.
    """
    head_seed, tail_seed = _split_seed(cfg.seed)
    head_dim = region.head_dim
    if cfg.method == "rejection":
        head, acceptance = _rejection_head(region, cfg, head_seed)
        diagnostics = None
    else:
        head, diagnostics = _chain_head(region, cfg, head_seed)
        acceptance = None
    if region.r > 0:
        tail = np.random.default_rng(tail_seed).standard_normal((cfg.B, region.r))
        draws = np.hstack([head, tail])
    else:
        draws = head
    return SampleBatch(
        draws=draws,
        seed=cfg.seed,
        method=cfg.method,
        acceptance_rate=acceptance,
        chain_diagnostics=diagnostics,
    )


def sample_posi_joint(region_fixed: ConstraintSet, r: int, cfg: SamplerConfig) -> SampleBatch:
    """Truncated block for the first coordinates, free N(0, I_r) block after.

    Equivalent to sampling the fixed-parameter region with r appended free
    coordinates; with r = 0 it is exactly sample_truncated.
    """
    if region_fixed.r != 0:
        raise ValueError("fixed-parameter region must not already carry a free tail")
    return sample_truncated(with_free_tail(region_fixed, r), cfg)


def _split_seed(seed):
    if seed is None:
        ss = np.random.SeedSequence()
    else:
        ss = np.random.SeedSequence(seed)
    children = ss.spawn(2)
    return children[0], children[1]


def _rejection_head(region: ConstraintSet, cfg: SamplerConfig, seed) -> tuple[np.ndarray, float]:
    head_dim = region.head_dim
    rng = np.random.default_rng(seed)
    if not region.constraints:
        return rng.standard_normal((cfg.B, head_dim)), 1.0
    kept = []
    n_kept = 0
    proposed = 0
    while n_kept < cfg.B:
        if proposed >= cfg.max_proposals:
            raise AcceptanceTooLowError(
                f"accepted {n_kept}/{cfg.B} after {proposed} proposals; "
                "acceptance mass too small for rejection, use the chain method"
            )
        chunk = rng.standard_normal((_CHUNK, head_dim))
        proposed += _CHUNK
        ok = np.ones(_CHUNK, dtype=bool)
        for c in region.constraints:
            ok &= c.satisfied(chunk)
        sel = chunk[ok]
        if sel.shape[0]:
            kept.append(sel)
            n_kept += sel.shape[0]
    head = np.vstack(kept)[: cfg.B]
    return head, n_kept / proposed


# ---------------------------------------------------------------------------
# Hit-and-run chain
# ---------------------------------------------------------------------------


def _chain_head(region: ConstraintSet, cfg: SamplerConfig, seed) -> tuple[np.ndarray, dict]:
    rng = np.random.default_rng(seed)
    head_dim = region.head_dim
    if not region.constraints:
        return rng.standard_normal((cfg.B, head_dim)), {"stuck_steps": 0, "n_steps": cfg.B}

    x = _find_start(region, rng, budget=100_000)
    draws = np.empty((cfg.B, head_dim))
    total_steps = cfg.burn_in + cfg.B * cfg.thinning
    stuck = 0
    max_stuck = 0
    collected = 0
    for step in range(total_steps):
        direction = rng.standard_normal(head_dim)
        norm = np.linalg.norm(direction)
        if norm == 0.0:
            continue
        direction /= norm
        intervals = _feasible_intervals(region, x, direction)
        t = _sample_line(intervals, mean=-float(x @ direction), rng=rng)
        if t is None:
            stuck += 1
            max_stuck = max(max_stuck, stuck)
            if stuck >= 1000:
                raise ChainStuckError("no accepted move in 1000 consecutive steps")
        else:
            stuck = 0
            x = x + t * direction
        if step >= cfg.burn_in and (step - cfg.burn_in) % cfg.thinning == cfg.thinning - 1:
            draws[collected] = x
            collected += 1
            if collected == cfg.B:
                break
    if collected < cfg.B:
        draws[collected:] = x
    return draws, {
        "burn_in": cfg.burn_in,
        "thinning": cfg.thinning,
        "max_consecutive_stuck": max_stuck,
        "n_steps": total_steps,
    }


def _find_start(region: ConstraintSet, rng, budget: int) -> np.ndarray:
    """Probe with standard-normal draws until one lands inside."""
    head_dim = region.head_dim
    tried = 0
    while tried < budget:
        chunk = rng.standard_normal((min(_CHUNK, budget - tried), head_dim))
        tried += chunk.shape[0]
        ok = np.ones(chunk.shape[0], dtype=bool)
        for c in region.constraints:
            ok &= c.satisfied(chunk)
        idx = np.flatnonzero(ok)
        if idx.size:
            return chunk[idx[0]].copy()
    raise AcceptanceTooLowError(
        f"no feasible starting point found in {budget} standard-normal probes; "
        "the region may be empty"
    )


def _feasible_intervals(region: ConstraintSet, x: np.ndarray, u: np.ndarray):
    """Intersection over constraints of the feasible t-sets along x + t u."""
    intervals = [(-_INF, _INF)]
    for c in region.constraints:
        qu = c.Q @ u
        a = float(u @ qu)
        b = 2.0 * float(x @ qu)
        val = float(x @ c.Q @ x)
        if c.lin is not None:
            b += float(c.lin @ u)
            val += float(c.lin @ x)
        cc = val - c.rhs
        negate = c.sense == "lt"  # lt: a t^2 + b t + cc < 0  <=>  -(...) > 0
        if negate:
            a, b, cc = -a, -b, -cc
        intervals = _intersect(intervals, _ge_zero_set(a, b, cc))
        if not intervals:
            return []
    return intervals


def _ge_zero_set(a: float, b: float, c: float):
    """Solution intervals of a t^2 + b t + c >= 0 (boundaries immaterial)."""
    eps = 1e-13 * max(1.0, abs(a), abs(b), abs(c))
    if abs(a) <= eps:
        if abs(b) <= eps:
            return [(-_INF, _INF)] if c >= 0 else []
        root = -c / b
        return [(root, _INF)] if b > 0 else [(-_INF, root)]
    disc = b * b - 4.0 * a * c
    if disc <= 0:
        return [(-_INF, _INF)] if a > 0 else []
    sq = math.sqrt(disc)
    t1 = (-b - sq) / (2.0 * a)
    t2 = (-b + sq) / (2.0 * a)
    lo, hi = min(t1, t2), max(t1, t2)
    if a > 0:
        return [(-_INF, lo), (hi, _INF)]
    return [(lo, hi)]


def _intersect(first, second):
    out = []
    i = j = 0
    while i < len(first) and j < len(second):
        lo = max(first[i][0], second[j][0])
        hi = min(first[i][1], second[j][1])
        if lo < hi:
            out.append((lo, hi))
        if first[i][1] <= second[j][1]:
            i += 1
        else:
            j += 1
    return out


def _sample_line(intervals, mean: float, rng) -> Optional[float]:
    """Exact draw of t ~ N(mean, 1) restricted to a union of intervals."""
    if not intervals:
        return None
    lows = np.array([ndtr(lo - mean) if lo > -_INF else 0.0 for lo, _ in intervals])
    highs = np.array([ndtr(hi - mean) if hi < _INF else 1.0 for _, hi in intervals])
    masses = np.clip(highs - lows, 0.0, None)
    total = masses.sum()
    if total <= 1e-300:
        return None
    probs = masses / total
    k = int(rng.choice(len(intervals), p=probs))
    u = rng.uniform()
    target = lows[k] + u * masses[k]
    target = min(max(target, 1e-300), 1.0 - 1e-16)
    return float(mean + ndtri(target))
