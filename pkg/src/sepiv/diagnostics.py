"""Falsification diagnostics and quantile-effect inference.

Direct mode checks the observable implication

    {f(Y=y, A=0|Z=1, x) − f(Y=y, A=0|Z=0, x)}
    / {f(A=0|Z=1, x) − f(A=0|Z=0, x)}  ≥ 0  for all y,

on a grid at covariate probes.  KS mode runs a variance-weighted
Kolmogorov–Smirnov-type bootstrap test of E{g(Y, X) κ₀} ≥ 0 over a finite
class of indicator rectangles, with

    κ̂₀ = (1−A)/{f̂(A=0|Z=1,X) − f̂(A=0|Z=0,X)} · (Z − f̂_Z(X))/{f̂_Z(X)(1−f̂_Z(X))}
    T_N = −N^{-1/2} inf_g Σ_i g_i κ̂₀ᵢ / max(ξ, σ̂₀(g)) ,

bootstrapped with κ̂₀ held fixed and each replicate's sum recentered by the
full-sample sum.

QTT confidence intervals invert the adjusted p-value
p̄(τ_q) = sup{p(τ_q, τ₁q) : τ₁q ∈ Ĉ₁} + c₁, where p is the two-sided Wald
p-value for H₀: ρ* = E{1(Y⁰ ≤ τ₁q − τ_q) − q | A=1} = 0 and Ĉ₁ is a bootstrap
CI for the q-quantile of Y | A=1 at inner level 1 − c₁.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    ConfigError,
    Dataset,
    InsufficientData,
    OutcomeGrid,
    RunConfig,
    WeakInstrument,
    validate,
)
from .estimator import CrossfitContext, normal_sf
from .nuisance import (
    NuisanceTheta,
    _fit_logistic,
    _with_intercept,
    local_theta,
)
from .rng import stream

__all__ = [
    "FalsificationReport",
    "QttInterval",
    "falsify_direct",
    "falsify_ks",
    "qtt_ci",
    "default_g_class",
    "default_probes",
]


@dataclass(frozen=True)
class FalsificationReport:
    mode: str  # "direct" | "ks_bootstrap"
    rejected: bool
    violations: tuple = ()  # direct mode: (probe index, y, signed ratio)
    skipped_probes: tuple = ()
    t_stat: float = float("nan")
    crit_value: float = float("nan")
    p_value: float = float("nan")
    b_reps: int = 0
    level: float = float("nan")

    def to_json_dict(self) -> dict:
        out = {"mode": self.mode, "rejected": bool(self.rejected)}
        if self.mode == "direct":
            out["violations"] = [
                {"probe": int(i), "y": float(y), "ratio": float(r)}
                for (i, y, r) in self.violations
            ]
            out["skipped_probes"] = [int(i) for i in self.skipped_probes]
        else:
            out.update(
                t_stat=self.t_stat,
                crit_value=self.crit_value,
                p_value=self.p_value,
                b_reps=self.b_reps,
                level=self.level,
            )
        return out


@dataclass(frozen=True)
class QttInterval:
    q: float
    c: float
    c1: float
    interval: tuple
    tau1_ci: tuple
    grid_of_candidates: np.ndarray
    adjusted_p: np.ndarray
    empty: bool = False

    def to_json_dict(self) -> dict:
        return {
            "q": self.q,
            "level": self.c,
            "c1": self.c1,
            "interval": [self.interval[0], self.interval[1]],
            "tau1_ci": [self.tau1_ci[0], self.tau1_ci[1]],
            "n_candidates": int(len(self.grid_of_candidates)),
            "empty": bool(self.empty),
        }


# ---------------------------------------------------------------------------
# Direct check
# ---------------------------------------------------------------------------


def default_probes(data: Dataset, levels: Sequence[float] = (0.1, 0.25, 0.5, 0.75, 0.9)) -> np.ndarray:
    """Deterministic covariate probes: componentwise quantiles plus the mean."""
    if data.d == 0:
        return np.zeros((1, 0))
    qs = np.quantile(data.x, levels, axis=0)
    return np.vstack([qs, data.x.mean(axis=0, keepdims=True)])


def falsify_direct(
    theta: NuisanceTheta,
    grid: OutcomeGrid,
    x_probes: np.ndarray,
    relevance_tol: float = 0.02,
) -> FalsificationReport:
    """Evaluate the density-ratio implication at each probe; record negatives."""
    x_probes = np.atleast_2d(np.asarray(x_probes, dtype=float))
    violations = []
    skipped = []
    for i in range(x_probes.shape[0]):
        tl = local_theta(theta, x_probes[i : i + 1], on_weak="ignore")
        gap = float(tl.fa[0, 1] - tl.fa[0, 0])
        if abs(gap) < relevance_tol:
            skipped.append(i)
            continue
        num = (1.0 - tl.fa[0, 1]) * tl.fy[0, 1, :] - (1.0 - tl.fa[0, 0]) * tl.fy[0, 0, :]
        den = (1.0 - tl.fa[0, 1]) - (1.0 - tl.fa[0, 0])
        ratio = num / den
        for j in np.nonzero(ratio < -1e-12)[0]:
            violations.append((i, float(grid.points[j]), float(ratio[j])))
    return FalsificationReport(
        mode="direct",
        rejected=bool(violations),
        violations=tuple(violations),
        skipped_probes=tuple(skipped),
    )


# ---------------------------------------------------------------------------
# KS bootstrap test
# ---------------------------------------------------------------------------


def default_g_class(data: Dataset, max_y_cuts: int = 9) -> np.ndarray:
    """Finite indicator class: outcome tail cells alone and crossed with
    below/above-median halves of one covariate at a time.

    Returns a binary matrix of shape (n, n_g).
    """
    y = data.y
    uniq = np.unique(y)
    if len(uniq) <= max_y_cuts + 1:
        cuts = uniq[:-1]
    else:
        cuts = np.unique(np.quantile(y, np.linspace(0.1, 0.9, max_y_cuts)))
    y_cells = []
    for t in cuts:
        y_cells.append(y <= t)
        y_cells.append(y > t)
    cols = list(y_cells)
    for j in range(data.d):
        med = np.median(data.x[:, j])
        lo = data.x[:, j] <= med
        for cell in y_cells:
            cols.append(cell & lo)
            cols.append(cell & ~lo)
    mat = np.column_stack(cols).astype(float)
    # Drop empty cells (identically zero indicators carry no information).
    keep = mat.sum(axis=0) > 0
    return mat[:, keep]


def falsify_ks(
    data: Dataset,
    config: RunConfig,
    b_reps: int = 200,
    xi: float = 0.05,
    g_class: Optional[np.ndarray] = None,
    level: float = 0.05,
) -> FalsificationReport:
    """Variance-weighted KS-type falsification test with bootstrap critical value."""
    validate(data)
    if xi <= 0:
        raise ConfigError("xi must be positive")
    n = data.n
    fz_model = _fit_logistic(_with_intercept(data.x), data.z.astype(float))
    fa_design = _with_intercept(
        np.hstack([data.z.reshape(-1, 1).astype(float), data.x])
    )
    fa_model = _fit_logistic(fa_design, data.a.astype(float))
    fz = np.clip(
        fz_model.predict(_with_intercept(data.x)),
        config.prob_floor,
        1.0 - config.prob_floor,
    )

    def fa_at(z):
        design = _with_intercept(
            np.hstack([np.full((n, 1), float(z)), data.x])
        )
        return np.clip(
            fa_model.predict(design), config.prob_floor, 1.0 - config.prob_floor
        )

    denom = (1.0 - fa_at(1)) - (1.0 - fa_at(0))
    if np.any(np.abs(denom) < 1e-12):
        raise WeakInstrument(
            "estimated instrument effect on treatment vanishes at some "
            "observation; the KS statistic is undefined"
        )
    kappa = (
        (1.0 - data.a.astype(float))
        / denom
        * (data.z.astype(float) - fz)
        / (fz * (1.0 - fz))
    )
    gmat = default_g_class(data) if g_class is None else np.asarray(g_class, dtype=float)
    gk = gmat * kappa[:, None]  # (n, n_g)
    sums = gk.sum(axis=0)
    sd0 = np.maximum(gk.std(axis=0, ddof=1), 0.0)
    t_stat = float(-np.min(sums / np.maximum(xi, sd0)) / np.sqrt(n))

    rng = stream(config.seed, "ksboot")
    t_boot = np.empty(b_reps)
    for b in range(b_reps):
        idx = rng.integers(0, n, n)
        ab = data.a[idx]
        zb = data.z[idx]
        if ab.min() == ab.max() or zb.min() == zb.max():
            raise InsufficientData(
                f"bootstrap replicate {b} emptied a treatment or instrument arm"
            )
        sub = gk[idx]
        sums_b = sub.sum(axis=0) - sums
        sd_b = sub.std(axis=0, ddof=1)
        t_boot[b] = -np.min(sums_b / np.maximum(xi, sd_b)) / np.sqrt(n)
    crit = float(np.quantile(t_boot, 1.0 - level))
    p_value = float(np.mean(t_boot >= t_stat))
    return FalsificationReport(
        mode="ks_bootstrap",
        rejected=bool(t_stat > crit),
        t_stat=t_stat,
        crit_value=crit,
        p_value=p_value,
        b_reps=b_reps,
        level=level,
    )


# ---------------------------------------------------------------------------
# QTT inference
# ---------------------------------------------------------------------------


def qtt_ci(
    data: Dataset,
    config: RunConfig,
    q: float,
    c: float = 0.05,
    c1: float = 1e-3,
    candidate_grid: Optional[np.ndarray] = None,
    tau1_points: int = 41,
    b_boot: int = 4000,
    exact_theta: Optional[NuisanceTheta] = None,
    s_reps: Optional[int] = None,
) -> QttInterval:
    """Confidence interval for the QTT by adjusted-p-value inversion.

    ``s_reps`` (default ``config.median_reps``) applies the median-of-splits
    adjustment to ρ̂ and its standard error across independent fold splits,
    the same stabilization used for the ATT point estimate.
    """
    if not 0.0 < q < 1.0:
        raise ConfigError("q must lie in (0, 1)")
    if not 0.0 < c1 < c:
        raise ConfigError("require 0 < c1 < c (Berger-Boos inner level)")
    validate(data)
    treated_y = data.y[data.a == 1]
    if len(treated_y) < 2:
        raise InsufficientData("too few treated units for quantile inference")

    # Bootstrap CI for the q-quantile of Y | A=1 at inner level 1 - c1.
    rng = stream(config.seed, "qttboot")
    n1 = len(treated_y)
    boot_q = np.empty(b_boot)
    for b in range(b_boot):
        boot_q[b] = np.quantile(treated_y[rng.integers(0, n1, n1)], q)
    tau1_lo = float(np.quantile(boot_q, c1 / 2.0))
    tau1_hi = float(np.quantile(boot_q, 1.0 - c1 / 2.0))
    tau1_grid = np.linspace(tau1_lo, tau1_hi, tau1_points)

    if candidate_grid is None:
        span = float(data.y.max() - data.y.min())
        candidate_grid = np.linspace(-span, span, 81)
    candidate_grid = np.asarray(candidate_grid, dtype=float)

    # Nuisances and fixed points are fold-cached once per split and reused
    # for every candidate/τ₁ transform.
    if s_reps is None:
        s_reps = config.median_reps
    if s_reps > 1:
        split_seeds = [
            int(stream(config.seed, "median", s).integers(0, 2**32))
            for s in range(s_reps)
        ]
    else:
        split_seeds = [None]
    contexts = [
        CrossfitContext(data, config, exact_theta=exact_theta, split_seed=ss)
        for ss in split_seeds
    ]
    # One threshold τ₁ − τ_q per (candidate, τ₁) pair, swept in a single
    # vectorized pass per split via the indicator fast path.
    thresholds = (tau1_grid[None, :] - candidate_grid[:, None]).ravel()
    rhos = np.empty((len(contexts), len(thresholds)))
    ses = np.empty_like(rhos)
    for s, ctx in enumerate(contexts):
        rhos[s], ses[s] = ctx.rho0_indicator(thresholds, q)
    rho = np.median(rhos, axis=0)
    se = np.sqrt(np.median(ses**2 + (rhos - rho) ** 2, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        p_val = np.where(
            se > 0.0,
            2.0 * normal_sf(np.abs(rho) / np.where(se > 0.0, se, 1.0)),
            np.where(np.abs(rho) > 0.0, 0.0, 1.0),
        )
    p_bar = p_val.reshape(len(candidate_grid), len(tau1_grid)).max(axis=1) + c1
    accepted = candidate_grid[p_bar > c]
    empty = len(accepted) == 0
    interval = (
        (float("nan"), float("nan")) if empty else (float(accepted.min()), float(accepted.max()))
    )
    return QttInterval(
        q=q,
        c=c,
        c1=c1,
        interval=interval,
        tau1_ci=(tau1_lo, tau1_hi),
        grid_of_candidates=candidate_grid,
        adjusted_p=p_bar,
        empty=empty,
    )
