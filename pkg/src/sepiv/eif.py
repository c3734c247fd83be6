"""Efficient-influence-function building blocks.

From (θ, α, β) this module tabulates the counterfactual law
f(Y⁰=y, A=a, Z=z | x), the conditional means μ*(z, x; 𝒢), the augmentation
function ω* via its closed-form pieces (B, C, L*), and the uncentered
influence value

    φ = {A − (1−A) α β}{𝒢(Y) − μ*(Z, x; 𝒢)}
        + (1−A) α β {ω* − μ*(Z, x; ω*)} + A μ*(Z, x; ω*) + (1−A) ω* .

Key closed forms (binary Z), writing p₁ = f(Z=1|x), p₀ = 1 − p₁,
β_z = β(z, x), and μ_z(h) = E{h(Y⁰) | A=1, Z=z, x}:

    𝔭₁(y) = {1 + α(y) β₀} β₁ p₁ / {β₁ p₁ + β₀ p₀ + α(y) β₀ β₁}
    L*(y)  = {𝒢(y) + 𝔭₁(y) B + C} / {𝔭₁(y) − p₁}
    ω*(y, z) = {L*(y) − E(L*|x)} (z − p₁)

with (B, C) solving the 2×2 system 𝒜 [B C]ᵀ = ℬ,

    𝒜 = [ β₁p₁ + β₀β₁p₁ μ₀(α),   β₁p₁ + 2β₀p₀ − β₁p₀ + β₀β₁ μ₀(α) ]
        [ p₁ + β₁p₁ μ₁(α),       1 + β₁ μ₁(α)                     ]
    ℬ = −[ β₁p₁ μ₀(𝒢) + 2β₀p₀ μ₀(𝒢) − β₁p₀ μ₀(𝒢) + β₀β₁ μ₀(α𝒢) ]
         [ μ₁(𝒢) + β₁ μ₁(α𝒢)                                     ]

whose determinant is det(𝒜) = 2 p₁ p₀ {1 + β₁ μ₁(α)} (β₁ − β₀).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import (
    DivisionGuard,
    NormalizationFailure,
    ObservedRow,
    OutcomeGrid,
    SingularSystem,
)
from .fixedpoint import OddsPair
from .nuisance import NuisanceTheta, ThetaLocal, local_theta

__all__ = [
    "CounterfactualLaw",
    "OmegaParts",
    "counterfactual_law",
    "mu_star",
    "solve_BC",
    "omega_parts",
    "omega_star",
    "eif_phi",
    "identity_transform",
    "interp_rows",
    "EifBatch",
]

identity_transform: Callable[[np.ndarray], np.ndarray] = lambda y: np.asarray(
    y, dtype=float
)


def interp_rows(values: np.ndarray, points: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise linear interpolation of (n, m) grid functions at y (n,)."""
    values = np.atleast_2d(values)
    y = np.asarray(y, dtype=float)
    m = len(points)
    j = np.clip(np.searchsorted(points, y, side="right") - 1, 0, m - 2)
    t = (y - points[j]) / (points[j + 1] - points[j])
    t = np.clip(t, 0.0, 1.0)
    rows = np.arange(values.shape[0])
    return values[rows, j] * (1.0 - t) + values[rows, j + 1] * t


# ---------------------------------------------------------------------------
# Batch kernel
# ---------------------------------------------------------------------------


class EifBatch:
    """Vectorized EIF components for a batch of covariate values.

    Everything 𝒢-independent (counterfactual law, μ-weights, 𝔭₁) is computed
    once at construction, so repeated transforms (QTT candidate sweeps) reuse
    the cache.
    """

    def __init__(
        self,
        tl: ThetaLocal,
        alpha: np.ndarray,
        beta: np.ndarray,
        grid: OutcomeGrid,
        check_tol: float | None = None,
        odds_bound: float | None = None,
    ):
        self.tl = tl
        self.alpha = alpha  # (n, m)
        self.beta = beta  # (n, 2)
        self.grid = grid
        # Bound on the extended-propensity odds αβ_z where it multiplies
        # observation-level residuals (boundedness enforcement for estimated
        # nuisances); None leaves the odds unrestricted.
        self.odds_bound = odds_bound
        w = grid.weights
        # α-weighted outcome laws: μ_z(h) = Σ h · afyw_z / den_z.
        self.afyw = np.stack(
            [alpha * tl.fy[:, z, :] * w for z in (0, 1)], axis=1
        )  # (n, 2, m)
        self.den = self.afyw.sum(axis=2)  # (n, 2)
        self.mu_alpha = (self.afyw * alpha[:, None, :]).sum(axis=2) / self.den
        # Marginal law of Y⁰ | x via f(Y⁰=y|x) = {1 + α β_z} f(Y=y, A=0|z, x).
        self.fy0 = (1.0 + alpha * beta[:, 0:1]) * (1.0 - tl.fa[:, 0:1]) * tl.fy[:, 0, :]
        self.fy0w = self.fy0 * w
        # 𝔭₁(y) = f(Z=1 | A=1, Y⁰=y, x).
        p1 = tl.fz
        p0 = 1.0 - p1
        b0 = beta[:, 0:1]
        b1 = beta[:, 1:2]
        self.frakp1 = (
            (1.0 + alpha * b0)
            * b1
            * p1[:, None]
            / (b1 * p1[:, None] + b0 * p0[:, None] + alpha * b0 * b1)
        )
        self.dinv = None  # lazily: 1 / (𝔭₁ − p₁)
        if check_tol is not None:
            self._check_consistency(check_tol)

    # -- internal checks ----------------------------------------------------

    def _check_consistency(self, tol: float) -> None:
        mass = self.grid.integrate(self.fy0)
        if np.any(np.abs(mass - 1.0) > tol):
            raise NormalizationFailure(
                f"counterfactual marginal mass deviates from 1 by up to "
                f"{float(np.max(np.abs(mass - 1.0))):.3g}"
            )
        # The same marginal must arise from the z=1 arm (IV2 consistency).
        alt = (
            (1.0 + self.alpha * self.beta[:, 1:2])
            * (1.0 - self.tl.fa[:, 1:2])
            * self.tl.fy[:, 1, :]
        )
        if np.max(np.abs(alt - self.fy0)) > tol:
            raise NormalizationFailure(
                "marginal f(Y0|x) differs between the two instrument arms by "
                f"{float(np.max(np.abs(alt - self.fy0))):.3g}"
            )

    def _div_inv(self) -> np.ndarray:
        if self.dinv is None:
            diff = self.frakp1 - self.tl.fz[:, None]
            bad = np.abs(diff) < 1e-10
            if bad.any():
                i, j = np.argwhere(bad)[0]
                raise DivisionGuard(
                    f"p1(y) - P(Z=1|x) below guard at grid point "
                    f"y={self.grid.points[j]:.6g} (evaluation point {int(i)})"
                )
            self.dinv = 1.0 / diff
        return self.dinv

    # -- 𝒢-dependent pieces -------------------------------------------------

    def mu(self, h: np.ndarray) -> np.ndarray:
        """μ_z(h) for a grid function h of shape (m,) or (n, m) → (n, 2)."""
        h = np.asarray(h, dtype=float)
        if h.ndim == 1:
            return self.afyw @ h / self.den
        return (self.afyw * h[:, None, :]).sum(axis=2) / self.den

    def joint(self) -> np.ndarray:
        """Tabulated f(Y⁰=y, A=a, Z=z | x), shape (n, m, 2, 2) [y, a, z]."""
        n, m = self.fy0.shape
        out = np.empty((n, m, 2, 2))
        pz = np.stack([1.0 - self.tl.fz, self.tl.fz], axis=1)  # (n, 2)
        for z in (0, 1):
            ab = self.alpha * self.beta[:, z][:, None]
            out[:, :, 0, z] = self.fy0 / (1.0 + ab) * pz[:, z][:, None]
            out[:, :, 1, z] = self.fy0 * ab / (1.0 + ab) * pz[:, z][:, None]
        return out

    def _system_coefficients(self):
        """Threshold-independent coefficients of the 2×2 (B, C) system."""
        p1 = self.tl.fz
        p0 = 1.0 - p1
        b0 = self.beta[:, 0]
        b1 = self.beta[:, 1]
        ma0 = self.mu_alpha[:, 0]
        ma1 = self.mu_alpha[:, 1]
        a11 = b1 * p1 + b0 * b1 * p1 * ma0
        a12 = b1 * p1 + 2.0 * b0 * p0 - b1 * p0 + b0 * b1 * ma0
        a21 = p1 + b1 * p1 * ma1
        a22 = 1.0 + b1 * ma1
        det = a11 * a22 - a12 * a21
        scale = np.maximum(np.abs(a11 * a22), np.abs(a12 * a21)) + 1e-300
        if np.any(np.abs(det) < 1e-12 * scale):
            raise SingularSystem(
                "2x2 system for (B, C) is singular "
                "(baseline odds equal across instrument arms?)"
            )
        return a11, a12, a21, a22, det

    def _solve_bc_arrays(self, mg0, mg1, mag0, mag1):
        """Solve the (B, C) system for μ arrays of shape (n,) or (n, T)."""
        p1 = self.tl.fz
        p0 = 1.0 - p1
        b0 = self.beta[:, 0]
        b1 = self.beta[:, 1]
        a11, a12, a21, a22, det = self._system_coefficients()
        if mg0.ndim == 2:
            p1, p0, b0, b1 = (v[:, None] for v in (p1, p0, b0, b1))
            a11, a12, a21, a22, det = (
                v[:, None] for v in (a11, a12, a21, a22, det)
            )
        r1 = -(b1 * p1 * mg0 + 2.0 * b0 * p0 * mg0 - b1 * p0 * mg0 + b0 * b1 * mag0)
        r2 = -(mg1 + b1 * mag1)
        big_b = (a22 * r1 - a12 * r2) / det
        big_c = (a11 * r2 - a21 * r1) / det
        return big_b, big_c, det

    def solve_bc(self, mu_g: np.ndarray, mu_ag: np.ndarray):
        """Solve the 2×2 system for (B, C) given μ_z(𝒢) and μ_z(α𝒢).

        Returns (B, C, det) as (n,) arrays; uses explicit cofactor inversion
        so the determinant doubles as a singularity diagnostic.
        """
        big_b, big_c, det = self._solve_bc_arrays(
            mu_g[:, 0], mu_g[:, 1], mu_ag[:, 0], mu_ag[:, 1]
        )
        return big_b, big_c, det if det.ndim == 1 else det[:, 0]

    def omega_pieces(self, g_values: np.ndarray):
        """All ω*-related pieces for transform values g_values (m,) or (n, m).

        Returns dict with B, C (n,), L (n, m), EL (n,), mu_L (n, 2),
        mu_g (n, 2).
        """
        gv = np.asarray(g_values, dtype=float)
        mu_g = self.mu(gv)
        mu_ag = self.mu(self.alpha * gv if gv.ndim == 2 else self.alpha * gv[None, :])
        big_b, big_c, det = self.solve_bc(mu_g, mu_ag)
        dinv = self._div_inv()
        gv2 = gv if gv.ndim == 2 else np.broadcast_to(gv, self.alpha.shape)
        lfun = (gv2 + self.frakp1 * big_b[:, None] + big_c[:, None]) * dinv
        el = (lfun * self.fy0w).sum(axis=1)
        mu_l = self.mu(lfun)
        return {
            "B": big_b,
            "C": big_c,
            "det": det,
            "L": lfun,
            "EL": el,
            "mu_L": mu_l,
            "mu_g": mu_g,
        }

    # -- indicator-family fast path (QTT threshold sweeps) ------------------

    @staticmethod
    def _padded_cumsum(arr: np.ndarray) -> np.ndarray:
        """Cumulative sum along the last (grid) axis, prefixed with a zero."""
        zero = np.zeros(arr.shape[:-1] + (1,))
        return np.concatenate([zero, np.cumsum(arr, axis=-1)], axis=-1)

    def indicator_pieces(self, thresholds: np.ndarray, q: float) -> dict:
        """ω pieces for the family 𝒢_t(y) = 1{y ≤ t} − q over thresholds.

        All grid integrals of a step function reduce to prefix sums, so the
        whole threshold sweep costs a handful of cumulative sums plus
        gathers.  Returns B, C, EL of shape (n, T) and mu_g, mu_L of shape
        (n, 2, T); results match :meth:`omega_pieces` applied per threshold.
        """
        t = np.asarray(thresholds, dtype=float)
        pts = self.grid.points
        k = np.searchsorted(pts, t, side="right")  # prefix length per t
        den = self.den[:, :, None]
        cs_a = self._padded_cumsum(self.afyw)
        cs_aa = self._padded_cumsum(self.afyw * self.alpha[:, None, :])
        mu_g = (cs_a[:, :, k] - q * den) / den
        mu_ag = (cs_aa[:, :, k] - q * cs_aa[:, :, -1:]) / den
        big_b, big_c, _ = self._solve_bc_arrays(
            mu_g[:, 0], mu_g[:, 1], mu_ag[:, 0], mu_ag[:, 1]
        )
        dinv = self._div_inv()
        pdinv = self.frakp1 * dinv
        dw = dinv * self.fy0w
        cs_dw = self._padded_cumsum(dw)
        s1 = dw.sum(axis=1)[:, None]
        s2 = (pdinv * self.fy0w).sum(axis=1)[:, None]
        el = cs_dw[:, k] - q * s1 + big_b * s2 + big_c * s1
        da = dinv[:, None, :] * self.afyw
        cs_da = self._padded_cumsum(da)
        t1 = da.sum(axis=2)[:, :, None]
        t2 = (pdinv[:, None, :] * self.afyw).sum(axis=2)[:, :, None]
        mu_l = (
            cs_da[:, :, k] - q * t1 + big_b[:, None, :] * t2 + big_c[:, None, :] * t1
        ) / den
        return {"B": big_b, "C": big_c, "EL": el, "mu_g": mu_g, "mu_L": mu_l}

    def phi_indicator(
        self,
        thresholds: np.ndarray,
        q: float,
        y: np.ndarray,
        a: np.ndarray,
        z: np.ndarray,
        rep: np.ndarray | None = None,
        pieces: dict | None = None,
    ) -> np.ndarray:
        """Uncentered influence values for 𝒢_t(y) = 1{y ≤ t} − q, (n_obs, T).

        Linear interpolation of L at the observed y reduces, for a step
        transform, to two per-observation anchor weights times threshold
        indicators at the bracketing grid points.
        """
        t = np.asarray(thresholds, dtype=float)
        if pieces is None:
            pieces = self.indicator_pieces(t, q)
        if rep is None:
            rep = np.arange(len(y))
        pts = self.grid.points
        m = len(pts)
        j = np.clip(np.searchsorted(pts, y, side="right") - 1, 0, m - 2)
        s = np.clip((y - pts[j]) / (pts[j + 1] - pts[j]), 0.0, 1.0)
        dinv = self._div_inv()
        pdinv = self.frakp1 * dinv
        wa = (1.0 - s) * dinv[rep, j]
        wb = s * dinv[rep, j + 1]
        v = wa + wb  # interp of 1/(𝔭₁ − p₁) at y
        u = (1.0 - s) * pdinv[rep, j] + s * pdinv[rep, j + 1]
        ind_a = (pts[j][:, None] <= t).astype(float)
        ind_b = (pts[j + 1][:, None] <= t).astype(float)
        big_b = pieces["B"][rep]
        big_c = pieces["C"][rep]
        l_y = (
            wa[:, None] * ind_a
            + wb[:, None] * ind_b
            - q * v[:, None]
            + big_b * u[:, None]
            + big_c * v[:, None]
        )
        g_of_y = (y[:, None] <= t).astype(float) - q
        alpha_y = interp_rows(self.alpha[rep], pts, y)
        beta_z = self.beta[rep, z]
        ab = alpha_y * beta_z
        if self.odds_bound is not None:
            ab = np.clip(ab, 1.0 / self.odds_bound, self.odds_bound)
        fz = self.tl.fz[rep]
        zf = z.astype(float)
        el = pieces["EL"][rep]
        mu_g_z = pieces["mu_g"][rep, z]
        mu_l_z = pieces["mu_L"][rep, z]
        omega_y = (l_y - el) * (zf - fz)[:, None]
        mu_omega_z = (mu_l_z - el) * (zf - fz)[:, None]
        af = a.astype(float)[:, None]
        ab = ab[:, None]
        return (
            (af - (1.0 - af) * ab) * (g_of_y - mu_g_z)
            + (1.0 - af) * ab * (omega_y - mu_omega_z)
            + af * mu_omega_z
            + (1.0 - af) * omega_y
        )

    def phi(
        self,
        pieces: dict,
        y: np.ndarray,
        a: np.ndarray,
        z: np.ndarray,
        g_of_y: np.ndarray,
        rep: np.ndarray | None = None,
    ) -> np.ndarray:
        """Uncentered influence values for observations.

        ``rep`` maps observation index → row in this batch (identity when the
        batch was built at the observations' own covariates; all-zeros for the
        covariate-free fast path).
        """
        n_obs = len(y)
        if rep is None:
            rep = np.arange(n_obs)
        pts = self.grid.points
        alpha_y = interp_rows(self.alpha[rep], pts, y)
        l_y = interp_rows(pieces["L"][rep], pts, y)
        fz = self.tl.fz[rep]
        beta_z = self.beta[rep, z]
        mu_g_z = pieces["mu_g"][rep, z]
        el = pieces["EL"][rep]
        mu_l_z = pieces["mu_L"][rep, z]
        zf = z.astype(float)
        omega_y = (l_y - el) * (zf - fz)
        mu_omega_z = (mu_l_z - el) * (zf - fz)
        af = a.astype(float)
        ab = alpha_y * beta_z
        if self.odds_bound is not None:
            ab = np.clip(ab, 1.0 / self.odds_bound, self.odds_bound)
        return (
            (af - (1.0 - af) * ab) * (g_of_y - mu_g_z)
            + (1.0 - af) * ab * (omega_y - mu_omega_z)
            + af * mu_omega_z
            + (1.0 - af) * omega_y
        )


# ---------------------------------------------------------------------------
# Single-x public operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CounterfactualLaw:
    """Tabulated counterfactual law at one covariate value."""

    grid: OutcomeGrid
    joint: np.ndarray  # (m, 2, 2) indexed [y, a, z]
    marg_y0: np.ndarray  # (m,)
    p_z_given_treated: np.ndarray  # (m,): 𝔭₁(y, x)
    p_z: float  # f(Z=1 | x)


@dataclass(frozen=True)
class OmegaParts:
    """Closed-form ω* pieces at one covariate value."""

    B: float
    C: float
    L: np.ndarray  # (m,)
    EL: float
    mu_L: np.ndarray  # (2,)
    mu_g: np.ndarray  # (2,)
    p_z: float
    grid: OutcomeGrid

    def omega(self, y: float, z: int) -> float:
        l_y = float(interp_rows(self.L.reshape(1, -1), self.grid.points, np.array([y]))[0])
        return (l_y - self.EL) * (float(z) - self.p_z)

    def mu_omega(self, z: int) -> float:
        return (float(self.mu_L[z]) - self.EL) * (float(z) - self.p_z)


def _batch_at(theta, odds: OddsPair, x, grid, check_tol=None) -> EifBatch:
    x = np.atleast_2d(np.asarray(x, dtype=float))[:1]
    tl = local_theta(theta, x, on_weak="ignore")
    return EifBatch(
        tl,
        odds.alpha.reshape(1, -1),
        odds.beta.reshape(1, -1),
        grid,
        check_tol=check_tol,
    )


def counterfactual_law(
    theta: NuisanceTheta, odds: OddsPair, x, grid: OutcomeGrid
) -> CounterfactualLaw:
    """Tabulate f(Y⁰=y, A=a, Z=z | x), its Y⁰ marginal, and 𝔭₁."""
    batch = _batch_at(theta, odds, x, grid, check_tol=1e-6)
    joint = batch.joint()[0]
    mass = float(grid.integrate(joint.sum(axis=(1, 2))))
    if abs(mass - 1.0) > 1e-6:
        raise NormalizationFailure(f"joint mass {mass} deviates from 1")
    return CounterfactualLaw(
        grid=grid,
        joint=joint,
        marg_y0=batch.fy0[0],
        p_z_given_treated=batch.frakp1[0],
        p_z=float(batch.tl.fz[0]),
    )


def _grid_transform(g_transform, grid: OutcomeGrid) -> np.ndarray:
    return np.asarray(g_transform(grid.points), dtype=float)


def mu_star(
    z: int,
    x,
    g_transform: Callable,
    theta: NuisanceTheta,
    odds: OddsPair,
    grid: OutcomeGrid,
) -> float:
    """μ*(z, x; 𝒢) = E{𝒢 α | A=0, Z=z, x} / E{α | A=0, Z=z, x}."""
    batch = _batch_at(theta, odds, x, grid)
    return float(batch.mu(_grid_transform(g_transform, grid))[0, z])


def solve_BC(
    x,
    g_transform: Callable,
    theta: NuisanceTheta,
    odds: OddsPair,
    grid: OutcomeGrid,
) -> tuple[float, float]:
    """Closed-form (B, C) at one covariate value."""
    batch = _batch_at(theta, odds, x, grid)
    gv = _grid_transform(g_transform, grid)
    mu_g = batch.mu(gv)
    mu_ag = batch.mu((batch.alpha * gv[None, :]))
    big_b, big_c, _ = batch.solve_bc(mu_g, mu_ag)
    return float(big_b[0]), float(big_c[0])


def omega_parts(
    x,
    g_transform: Callable,
    theta: NuisanceTheta,
    odds: OddsPair,
    grid: OutcomeGrid,
) -> OmegaParts:
    """Assemble every ω*-related piece at one covariate value."""
    batch = _batch_at(theta, odds, x, grid)
    pieces = batch.omega_pieces(_grid_transform(g_transform, grid))
    return OmegaParts(
        B=float(pieces["B"][0]),
        C=float(pieces["C"][0]),
        L=pieces["L"][0],
        EL=float(pieces["EL"][0]),
        mu_L=pieces["mu_L"][0],
        mu_g=pieces["mu_g"][0],
        p_z=float(batch.tl.fz[0]),
        grid=grid,
    )


def omega_star(y: float, z: int, x, g_transform, law: CounterfactualLaw, parts: OmegaParts) -> float:
    """ω*(y, z, x) = {L*(y) − E(L*|x)} (z − E(Z|x))."""
    return parts.omega(y, z)


def eif_phi(
    row: ObservedRow,
    g_transform: Callable,
    theta: NuisanceTheta,
    odds: OddsPair,
    parts: OmegaParts,
    grid: OutcomeGrid,
) -> float:
    """Uncentered influence value φ at one observed row."""
    batch = _batch_at(theta, odds, np.asarray(row.x, dtype=float).reshape(1, -1), grid)
    pieces = {
        "B": np.array([parts.B]),
        "C": np.array([parts.C]),
        "L": parts.L.reshape(1, -1),
        "EL": np.array([parts.EL]),
        "mu_L": parts.mu_L.reshape(1, -1),
        "mu_g": parts.mu_g.reshape(1, -1),
    }
    g_y = float(np.asarray(g_transform(np.array([row.y])), dtype=float)[0])
    phi = batch.phi(
        pieces,
        np.array([row.y]),
        np.array([row.a]),
        np.array([row.z]),
        np.array([g_y]),
        rep=np.zeros(1, dtype=int),
    )
    return float(phi[0])
