"""Cross-fitted ATT estimation and comparison estimators.

The main estimator follows three steps per fold: fit θ̂ on the complement,
solve the fixed point and recover (α̂, β̂) at each held-out evaluation point,
and evaluate the influence value φ̂ on the held-out fold.  Then

    τ̂ = Σ φ̂_i / Σ A_i ,
    σ̂² = N⁻¹ Σ {(φ̂_i − A_i τ̂) / (Σ A / N)}² ,
    CI = τ̂ ± z_{1−c/2} σ̂ / √N .

Also provided: median adjustment over repeated sample splits, and the three
comparison estimators (2SLS, ignorability-AIPW, OLS).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    Dataset,
    EmptyArm,
    OutcomeGrid,
    RankDeficient,
    RunConfig,
    SepIVError,
    make_outcome_grid,
    validate,
)
from .eif import EifBatch, identity_transform
from .fixedpoint import recover_odds_batch, solve_gstar_batch, stabilize_odds
from .nuisance import NuisanceTheta, fit_theta, local_theta, _with_intercept, _fit_logistic
from .rng import stream

__all__ = [
    "EstimateResult",
    "CrossfitContext",
    "crossfit_att",
    "median_adjust",
    "est_2sls",
    "est_ignorability_aipw",
    "est_ols",
    "normal_ppf",
    "normal_sf",
    "fold_indices",
]


# ---------------------------------------------------------------------------
# Normal distribution helpers
# ---------------------------------------------------------------------------

_PPF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
          1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_PPF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
          6.680131188771972e+01, -1.328068155288572e+01)
_PPF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
          -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_PPF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
          3.754408661907416e+00)


def normal_ppf(p: float) -> float:
    """Inverse standard-normal CDF (Acklam rational approximation, |err| < 1.2e-8)."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        num = ((((_PPF_C[0] * q + _PPF_C[1]) * q + _PPF_C[2]) * q + _PPF_C[3]) * q + _PPF_C[4]) * q + _PPF_C[5]
        den = (((_PPF_D[0] * q + _PPF_D[1]) * q + _PPF_D[2]) * q + _PPF_D[3]) * q + 1.0
        return num / den
    if p > 1.0 - p_low:
        return -normal_ppf(1.0 - p)
    q = p - 0.5
    r = q * q
    num = ((((_PPF_A[0] * r + _PPF_A[1]) * r + _PPF_A[2]) * r + _PPF_A[3]) * r + _PPF_A[4]) * r + _PPF_A[5]
    den = ((((_PPF_B[0] * r + _PPF_B[1]) * r + _PPF_B[2]) * r + _PPF_B[3]) * r + _PPF_B[4]) * r + 1.0
    return q * num / den


def normal_sf(x):
    """Standard-normal survival function via erfc (scalar or array)."""
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(float(x) / math.sqrt(2.0))
    x = np.asarray(x, dtype=float)
    return 0.5 * np.vectorize(math.erfc)(x / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimateResult:
    tau_hat: float
    se: float
    ci: tuple
    n: int
    k_folds: int
    method: str
    level: float
    seed: int
    fold_diagnostics: tuple = ()
    flags: tuple = ()

    def __post_init__(self) -> None:
        if self.se < 0:
            raise SepIVError("standard error must be nonnegative")
        if not (self.ci[0] <= self.tau_hat <= self.ci[1]):
            raise SepIVError("CI must bracket the point estimate")

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "tau_hat": self.tau_hat,
            "se": self.se,
            "ci": [self.ci[0], self.ci[1]],
            "level": self.level,
            "n": self.n,
            "k_folds": self.k_folds,
            "seed": self.seed,
            "flags": list(self.flags),
        }


def fold_indices(n: int, k: int, rng: np.random.Generator) -> list:
    """Seeded uniform shuffle into K near-equal folds, keyed by row index."""
    perm = rng.permutation(n)
    return [np.sort(part) for part in np.array_split(perm, k)]


def _wald(num: np.ndarray, a: np.ndarray, level: float):
    """Point estimate, asymptotic sd, and Wald CI from influence numerators."""
    n = len(num)
    a_sum = float(a.sum())
    if a_sum == 0:
        raise EmptyArm("no treated units; ATT undefined")
    tau = float(num.sum() / a_sum)
    abar = a_sum / n
    psi = (num - a * tau) / abar
    sigma2 = float(np.mean(psi**2))
    se = math.sqrt(sigma2 / n)
    zq = normal_ppf(1.0 - level / 2.0)
    return tau, se, (tau - zq * se, tau + zq * se)


# ---------------------------------------------------------------------------
# Cross-fitting context
# ---------------------------------------------------------------------------


class CrossfitContext:
    """Per-split cache of fold-wise nuisances and fixed-point solutions.

    Everything independent of the outcome transform 𝒢 is computed once, so
    repeated estimates with different transforms (QTT sweeps) are cheap.

    With ``exact_theta`` supplied, Step 1 (nuisance fitting) is bypassed and
    the provided θ is used for every observation (oracle mode).
    """

    def __init__(
        self,
        data: Dataset,
        config: RunConfig,
        exact_theta: NuisanceTheta | None = None,
        split_seed: int | None = None,
        grid: OutcomeGrid | None = None,
    ):
        validate(data)
        self.data = data
        self.config = config
        self.grid = grid if grid is not None else (
            exact_theta.grid if exact_theta is not None else make_outcome_grid(data, config)
        )
        seed = config.seed if split_seed is None else split_seed
        self.split_seed = seed
        if exact_theta is not None:
            folds = [np.arange(data.n)]
        else:
            folds = fold_indices(data.n, config.k_folds, stream(seed, "folds"))
        self.folds = folds
        self._caches = []
        self.fold_diagnostics = []
        for k, idx in enumerate(folds):
            if data.a[idx].sum() == 0:
                raise EmptyArm(f"fold {k} contains no treated units")
            try:
                if exact_theta is not None:
                    theta = exact_theta
                else:
                    mask = np.ones(data.n, dtype=bool)
                    mask[idx] = False
                    theta = fit_theta(data.subset(mask), self.grid, config)
                cache = self._build_fold_cache(theta, idx)
            except SepIVError as exc:
                exc.args = (f"fold {k}: {exc.args[0] if exc.args else exc}",)
                raise
            self._caches.append(cache)
            self.fold_diagnostics.append(
                {
                    "fold": k,
                    "n_eval": int(len(idx)),
                    "fp_iterations": cache["iterations"],
                    "negative_psi": cache["negative_psi"],
                    "fp_stalled": cache["fp_stalled"],
                    "odds_clipped": cache["odds_clipped"],
                }
            )

    def _build_fold_cache(self, theta: NuisanceTheta, idx: np.ndarray) -> dict:
        data, config, grid = self.data, self.config, self.grid
        if data.d == 0:
            x_eval = np.zeros((1, 0))
            rep = np.zeros(len(idx), dtype=int)
        else:
            x_eval = data.x[idx]
            rep = np.arange(len(idx))
        tl = local_theta(theta, x_eval, relevance_tol=config.relevance_tol)
        g, iters, negative, stalled, _ = solve_gstar_batch(
            theta,
            x_eval,
            grid,
            tol=config.fp_tol,
            max_iter=config.fp_max_iter,
            density_floor=config.density_floor,
            relevance_tol=config.relevance_tol,
            tl=tl,
        )
        alpha, beta = recover_odds_batch(g, tl, grid)
        alpha, beta, n_clipped = stabilize_odds(
            alpha, beta, tl, grid, prob_floor=config.prob_floor
        )
        batch = EifBatch(
            tl,
            alpha,
            beta,
            grid,
            odds_bound=(1.0 - config.prob_floor) / config.prob_floor,
        )
        return {
            "idx": idx,
            "rep": rep,
            "batch": batch,
            "iterations": int(iters),
            "negative_psi": int(negative),
            "fp_stalled": int(stalled.size),
            "odds_clipped": int(n_clipped),
        }

    # -- estimation ---------------------------------------------------------

    def phi(self, g_transform: Callable = identity_transform) -> np.ndarray:
        """Uncentered influence values φ̂ for every observation."""
        data, grid = self.data, self.grid
        gv = np.asarray(g_transform(grid.points), dtype=float)
        out = np.empty(data.n)
        for cache in self._caches:
            idx = cache["idx"]
            batch: EifBatch = cache["batch"]
            pieces = batch.omega_pieces(gv)
            g_of_y = np.asarray(g_transform(data.y[idx]), dtype=float)
            out[idx] = batch.phi(
                pieces, data.y[idx], data.a[idx], data.z[idx], g_of_y, rep=cache["rep"]
            )
        return out

    def estimate(
        self,
        g_transform: Callable = identity_transform,
        estimand: str = "att",
        method: str = "sepiv",
    ) -> EstimateResult:
        """ATT-type estimate.

        ``estimand='att'`` targets E{𝒢(Y¹) − 𝒢(Y⁰) | A=1}; ``estimand='rho0'``
        targets ρ* = E{𝒢(Y⁰) | A=1} (used by QTT inference).
        """
        data = self.data
        phi = self.phi(g_transform)
        if estimand == "att":
            num = phi
        elif estimand == "rho0":
            num = data.a * np.asarray(g_transform(data.y), dtype=float) - phi
        else:
            raise ValueError(f"unknown estimand {estimand!r}")
        tau, se, ci = _wald(num, data.a.astype(float), self.config.level)
        flags = []
        if any(d["negative_psi"] for d in self.fold_diagnostics):
            flags.append("negative_psi_floored")
        if any(d["fp_stalled"] for d in self.fold_diagnostics):
            flags.append("fp_stalled")
        if any(d["odds_clipped"] for d in self.fold_diagnostics):
            flags.append("odds_clipped")
        return EstimateResult(
            tau_hat=tau,
            se=se,
            ci=ci,
            n=data.n,
            k_folds=len(self.folds),
            method=method,
            level=self.config.level,
            seed=self.split_seed,
            fold_diagnostics=tuple(
                tuple(sorted(d.items())) for d in self.fold_diagnostics
            ),
            flags=tuple(flags),
        )

    def rho0_indicator(self, thresholds, q: float, chunk: int = 512):
        """Batched (ρ̂_t, σ̂_t) for ρ*_t = E{1(Y⁰ ≤ t) − q | A=1} over thresholds.

        Equivalent to ``estimate(y ↦ 1{y ≤ t} − q, estimand='rho0')`` per
        threshold, but computed with the indicator fast path (prefix sums on
        the fold caches) in chunks of ``chunk`` thresholds.
        """
        return _rho0_indicator_impl(self, thresholds, q, chunk)


def _rho0_indicator_impl(ctx: "CrossfitContext", thresholds, q, chunk=512):
    t = np.asarray(thresholds, dtype=float)
    data = ctx.data
    af = data.a.astype(float)
    a_sum = float(af.sum())
    if a_sum == 0:
        raise EmptyArm("no treated units; ATT undefined")
    abar = a_sum / data.n
    tau = np.empty(len(t))
    se = np.empty(len(t))
    for lo in range(0, len(t), chunk):
        tt = t[lo : lo + chunk]
        num = np.empty((data.n, len(tt)))
        for cache in ctx._caches:
            idx = cache["idx"]
            batch: EifBatch = cache["batch"]
            phi = batch.phi_indicator(
                tt, q, data.y[idx], data.a[idx], data.z[idx], rep=cache["rep"]
            )
            g_of_y = (data.y[idx, None] <= tt).astype(float) - q
            num[idx] = af[idx, None] * g_of_y - phi
        tau_c = num.sum(axis=0) / a_sum
        psi = (num - af[:, None] * tau_c) / abar
        tau[lo : lo + len(tt)] = tau_c
        se[lo : lo + len(tt)] = np.sqrt(np.mean(psi**2, axis=0) / data.n)
    return tau, se


def crossfit_att(
    data: Dataset,
    config: RunConfig,
    g_transform: Callable = identity_transform,
    exact_theta: NuisanceTheta | None = None,
    split_seed: int | None = None,
) -> EstimateResult:
    """Cross-fitted EIF-based ATT estimate with Wald CI."""
    ctx = CrossfitContext(data, config, exact_theta=exact_theta, split_seed=split_seed)
    return ctx.estimate(g_transform)


def median_adjust(
    data: Dataset,
    config: RunConfig,
    s_reps: int,
    g_transform: Callable = identity_transform,
    exact_theta: NuisanceTheta | None = None,
) -> EstimateResult:
    """Median-adjusted estimate over S independent sample splits.

    τ̂_med = median_s τ̂_s; the variance adjustment median_s{σ̂_s² + (τ̂_s −
    τ̂_med)²} is applied on the squared-standard-error scale, where both terms
    are of the same order.
    """
    if s_reps < 1:
        raise ValueError("s_reps must be >= 1")
    results = []
    for s in range(s_reps):
        split_seed = int(stream(config.seed, "median", s).integers(0, 2**32))
        results.append(
            crossfit_att(
                data, config, g_transform, exact_theta=exact_theta, split_seed=split_seed
            )
        )
    taus = np.array([r.tau_hat for r in results])
    tau_med = float(np.median(taus))
    se2_med = float(np.median([r.se**2 + (r.tau_hat - tau_med) ** 2 for r in results]))
    se_med = math.sqrt(se2_med)
    zq = normal_ppf(1.0 - config.level / 2.0)
    flags = tuple(sorted({f for r in results for f in r.flags}))
    return EstimateResult(
        tau_hat=tau_med,
        se=se_med,
        ci=(tau_med - zq * se_med, tau_med + zq * se_med),
        n=data.n,
        k_folds=config.k_folds,
        method="sepiv",
        level=config.level,
        seed=config.seed,
        fold_diagnostics=tuple(r.fold_diagnostics for r in results),
        flags=flags,
    )


# ---------------------------------------------------------------------------
# Comparison estimators
# ---------------------------------------------------------------------------


def _check_rank(mat: np.ndarray, what: str) -> None:
    if np.linalg.matrix_rank(mat) < mat.shape[1]:
        raise RankDeficient(f"{what} design matrix is rank deficient")


def est_2sls(data: Dataset, level: float = 0.05) -> EstimateResult:
    """Two-stage least squares: coefficient of Â in Y ~ (Â, X), first stage
    A ~ (Z, X).  Heteroskedasticity-robust sandwich SE."""
    n = data.n
    x_mat = np.column_stack([np.ones(n), data.a.astype(float), data.x])
    z_mat = np.column_stack([np.ones(n), data.z.astype(float), data.x])
    _check_rank(z_mat, "first-stage")
    first, *_ = np.linalg.lstsq(z_mat, data.a.astype(float), rcond=None)
    a_hat = z_mat @ first
    x_hat = np.column_stack([np.ones(n), a_hat, data.x])
    gram = x_hat.T @ x_mat
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise RankDeficient("2SLS cross-moment matrix is rank deficient")
    coef = np.linalg.solve(gram, x_hat.T @ data.y)
    resid = data.y - x_mat @ coef
    bread = np.linalg.inv(gram)
    meat = x_hat.T @ (x_hat * (resid**2)[:, None])
    cov = bread @ meat @ bread.T
    tau = float(coef[1])
    se = math.sqrt(max(cov[1, 1], 0.0))
    zq = normal_ppf(1.0 - level / 2.0)
    return EstimateResult(
        tau_hat=tau,
        se=se,
        ci=(tau - zq * se, tau + zq * se),
        n=n,
        k_folds=0,
        method="twostage_ls",
        level=level,
        seed=0,
    )


def est_ols(data: Dataset, level: float = 0.05) -> EstimateResult:
    """Coefficient of A in OLS of Y on (A, Z, X) with HC0 robust SE."""
    n = data.n
    x_mat = np.column_stack(
        [np.ones(n), data.a.astype(float), data.z.astype(float), data.x]
    )
    _check_rank(x_mat, "OLS")
    coef, *_ = np.linalg.lstsq(x_mat, data.y, rcond=None)
    resid = data.y - x_mat @ coef
    bread = np.linalg.inv(x_mat.T @ x_mat)
    meat = x_mat.T @ (x_mat * (resid**2)[:, None])
    cov = bread @ meat @ bread
    tau = float(coef[1])
    se = math.sqrt(max(cov[1, 1], 0.0))
    zq = normal_ppf(1.0 - level / 2.0)
    return EstimateResult(
        tau_hat=tau,
        se=se,
        ci=(tau - zq * se, tau + zq * se),
        n=n,
        k_folds=0,
        method="ols",
        level=level,
        seed=0,
    )


def est_ignorability_aipw(data: Dataset, config: RunConfig) -> EstimateResult:
    """Cross-fitted EIF-based ATT estimator under no unmeasured confounding,
    treating L = (Z, X) as regular confounders:

        Σ_i {A_i − (1−A_i) ê(L_i)/(1 − ê(L_i))} {Y_i − m̂₁(L_i)} / Σ_i A_i

    with ê = P̂(A=1|L) (logistic) and m̂₁ = Ê(Y|A=1, L) (least squares), both
    fit out-of-fold."""
    validate(data)
    n = data.n
    l_mat = np.column_stack([data.z.astype(float), data.x])
    folds = fold_indices(n, config.k_folds, stream(config.seed, "ign"))
    num = np.empty(n)
    for idx in folds:
        mask = np.ones(n, dtype=bool)
        mask[idx] = False
        design_tr = _with_intercept(l_mat[mask])
        prop = _fit_logistic(design_tr, data.a[mask].astype(float))
        treated = mask & (data.a == 1)
        design_t = _with_intercept(l_mat[treated])
        _check_rank(design_t, "outcome-regression")
        coef, *_ = np.linalg.lstsq(design_t, data.y[treated], rcond=None)
        design_ev = _with_intercept(l_mat[idx])
        e_hat = np.clip(
            prop.predict(design_ev), config.prob_floor, 1.0 - config.prob_floor
        )
        m1 = design_ev @ coef
        a_ev = data.a[idx].astype(float)
        num[idx] = (a_ev - (1.0 - a_ev) * e_hat / (1.0 - e_hat)) * (data.y[idx] - m1)
    tau, se, ci = _wald(num, data.a.astype(float), config.level)
    return EstimateResult(
        tau_hat=tau,
        se=se,
        ci=ci,
        n=n,
        k_folds=config.k_folds,
        method="ignorability_aipw",
        level=config.level,
        seed=config.seed,
    )
