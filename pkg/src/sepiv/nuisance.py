"""Estimation of the observed-data parameterization θ = {f_Z, f_A, f_Y}.

θ is estimated on training folds with built-in, deterministic estimators:

* logistic regression by Newton/IRLS (ridge fallback λ = 1e-4 on separation)
  for f_Z(x) = P(Z=1|x) and f_A(z, x) = P(A=1|z, x);
* frequency tables (d = 0) or per-grid-value logistic fits (d > 0) for the
  conditional pmf of Y | A=0, Z=z, x on discrete grids;
* Gaussian product-kernel conditional density with Silverman bandwidths on
  continuous grids.

Probabilities are clipped to [prob_floor, 1 − prob_floor] and densities are
floored at density_floor then renormalized to quadrature-integrate to one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import (
    Dataset,
    EmptyArm,
    EmptyCell,
    OutcomeGrid,
    RunConfig,
    WeakInstrument,
    _silverman_bandwidth,
)

__all__ = [
    "LogisticModel",
    "NuisanceTheta",
    "FittedTheta",
    "TabularTheta",
    "ThetaLocal",
    "DensityRatioFn",
    "fit_instrument_model",
    "fit_treatment_model",
    "fit_outcome_model",
    "fit_theta",
    "density_ratio",
    "local_theta",
    "expit",
    "floor_and_normalize",
]


def expit(v: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def floor_and_normalize(
    vals: np.ndarray, weights: np.ndarray, floor: float
) -> np.ndarray:
    """Return densities ≥ ``floor`` pointwise whose quadrature integral is 1.

    Values are floored, then the surplus mass is removed proportionally from
    the part sitting above the floor, so both invariants hold simultaneously.
    ``vals`` has shape (..., m).
    """
    vals = np.asarray(vals, dtype=float)
    total = vals @ weights
    total = np.where(total > 0, total, 1.0)
    vals = vals / total[..., None]
    vals = np.maximum(vals, floor)
    excess = vals @ weights - 1.0
    above = (vals - floor) @ weights
    above = np.where(above > 0, above, 1.0)
    scale = 1.0 - excess / above
    return floor + (vals - floor) * scale[..., None]


# ---------------------------------------------------------------------------
# Logistic regression (IRLS with ridge fallback)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticModel:
    coef: np.ndarray  # includes intercept as the first entry
    converged: bool
    ridge: float

    def predict(self, design: np.ndarray) -> np.ndarray:
        return expit(design @ self.coef)


def _irls(
    design: np.ndarray,
    resp: np.ndarray,
    ridge: float = 0.0,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> tuple[np.ndarray, bool]:
    n, p = design.shape
    beta = np.zeros(p)
    for _ in range(max_iter):
        mu = expit(design @ beta)
        w = np.clip(mu * (1.0 - mu), 1e-10, None)
        hess = design.T @ (design * w[:, None]) + ridge * np.eye(p)
        grad = design.T @ (resp - mu) - ridge * beta
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return beta, False
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            return beta, False
        if np.max(np.abs(step)) < tol:
            return beta, True
    return beta, False


def _fit_logistic(design: np.ndarray, resp: np.ndarray) -> LogisticModel:
    beta, ok = _irls(design, resp)
    # Separation or non-convergence: refit with a small ridge penalty.
    if not ok or np.max(np.abs(beta)) > 30.0:
        beta, ok = _irls(design, resp, ridge=1e-4, max_iter=500)
        return LogisticModel(beta, ok, 1e-4)
    return LogisticModel(beta, ok, 0.0)


def _with_intercept(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.hstack([np.ones((x.shape[0], 1)), x])


# ---------------------------------------------------------------------------
# Nuisance container
# ---------------------------------------------------------------------------


class NuisanceTheta:
    """Interface: evaluable θ = {f_Z, f_A, f_Y} for batches of x.

    ``x`` is always an (n, d) array; returned arrays are (n,) for the
    probability components and (n, m) for the outcome density on the grid.
    """

    grid: OutcomeGrid
    prob_floor: float
    density_floor: float

    def f_z(self, x: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def f_a(self, z: int, x: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def f_y(self, z: int, x: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


class FittedTheta(NuisanceTheta):
    """θ estimated from a training fold."""

    def __init__(self, fz_model, fa_model, fy_models, grid, config: RunConfig):
        self.fz_model = fz_model
        self.fa_model = fa_model
        self.fy_models = fy_models  # {z: outcome model}
        self.grid = grid
        self.prob_floor = config.prob_floor
        self.density_floor = config.density_floor

    def f_z(self, x):
        p = self.fz_model.predict(_with_intercept(x))
        return np.clip(p, self.prob_floor, 1.0 - self.prob_floor)

    def f_a(self, z, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        design = _with_intercept(
            np.hstack([np.full((x.shape[0], 1), float(z)), x])
        )
        p = self.fa_model.predict(design)
        return np.clip(p, self.prob_floor, 1.0 - self.prob_floor)

    def f_y(self, z, x):
        dens = self.fy_models[z].evaluate(np.atleast_2d(np.asarray(x, dtype=float)))
        return floor_and_normalize(dens, self.grid.weights, self.density_floor)

    def coefficients(self) -> dict:
        """Fitted coefficients/bandwidths for reproducibility dumps."""
        out = {
            "f_z": list(map(float, self.fz_model.coef)),
            "f_a": list(map(float, self.fa_model.coef)),
        }
        for z, model in self.fy_models.items():
            out[f"f_y[z={z}]"] = model.describe()
        return out


class TabularTheta(NuisanceTheta):
    """Exact θ for covariate-free (d = 0) problems, given as tables.

    Used both for oracle tests (exact-nuisance injection) and for saturated
    empirical fits.
    """

    def __init__(
        self,
        fz: float,
        fa: np.ndarray,
        fy: np.ndarray,
        grid: OutcomeGrid,
        prob_floor: float = 0.0,
        density_floor: float = 0.0,
    ):
        self.fz_val = float(fz)
        self.fa_val = np.asarray(fa, dtype=float)  # (2,)
        self.fy_val = np.asarray(fy, dtype=float)  # (2, m)
        self.grid = grid
        self.prob_floor = prob_floor
        self.density_floor = density_floor

    def f_z(self, x):
        n = np.atleast_2d(np.asarray(x, dtype=float)).shape[0]
        return np.full(n, self.fz_val)

    def f_a(self, z, x):
        n = np.atleast_2d(np.asarray(x, dtype=float)).shape[0]
        return np.full(n, self.fa_val[z])

    def f_y(self, z, x):
        n = np.atleast_2d(np.asarray(x, dtype=float)).shape[0]
        return np.broadcast_to(self.fy_val[z], (n, self.grid.m)).copy()


# ---------------------------------------------------------------------------
# Outcome models
# ---------------------------------------------------------------------------


class _FrequencyOutcomeModel:
    """Saturated pmf of Y among controls at a given z (d = 0)."""

    def __init__(self, y_train: np.ndarray, grid: OutcomeGrid):
        counts = np.array([(y_train == v).sum() for v in grid.points], dtype=float)
        self.pmf = counts / counts.sum()
        self.grid = grid

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.pmf, (x.shape[0], self.grid.m)).copy()

    def describe(self) -> dict:
        return {"type": "frequency", "pmf": list(map(float, self.pmf))}


class _PerValueLogisticOutcomeModel:
    """Discrete grid with covariates: one logistic fit per grid value,
    normalized across values at evaluation time."""

    def __init__(self, y_train: np.ndarray, x_train: np.ndarray, grid: OutcomeGrid):
        design = _with_intercept(x_train)
        self.models = [
            _fit_logistic(design, (y_train == v).astype(float)) for v in grid.points
        ]
        self.grid = grid

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        design = _with_intercept(x)
        probs = np.column_stack([m.predict(design) for m in self.models])
        total = probs.sum(axis=1, keepdims=True)
        total = np.where(total > 0, total, 1.0)
        return probs / total

    def describe(self) -> dict:
        return {
            "type": "per_value_logistic",
            "coef": [list(map(float, m.coef)) for m in self.models],
        }


class _KernelOutcomeModel:
    """Gaussian product-kernel conditional density f(y | x) among controls."""

    def __init__(self, y_train: np.ndarray, x_train: np.ndarray, grid: OutcomeGrid):
        self.y_train = np.asarray(y_train, dtype=float)
        self.x_train = np.asarray(x_train, dtype=float)
        self.grid = grid
        dims = 1 + self.x_train.shape[1]
        self.h_y = _silverman_bandwidth(self.y_train, dims=dims)
        self.h_x = np.array(
            [
                _silverman_bandwidth(self.x_train[:, j], dims=dims)
                for j in range(self.x_train.shape[1])
            ]
        )
        # Kernel matrix in y between training points and the grid: (ntr, m).
        u = (grid.points[None, :] - self.y_train[:, None]) / self.h_y
        self.ky = np.exp(-0.5 * u * u)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        if self.x_train.shape[1] == 0:
            wx = np.ones((x.shape[0], len(self.y_train)))
        else:
            u = (x[:, None, :] - self.x_train[None, :, :]) / self.h_x[None, None, :]
            wx = np.exp(-0.5 * np.sum(u * u, axis=2))
        dens = wx @ self.ky
        return dens  # normalized downstream

    def describe(self) -> dict:
        return {
            "type": "gaussian_kernel",
            "bandwidth_y": float(self.h_y),
            "bandwidth_x": list(map(float, self.h_x)),
            "n_train": int(len(self.y_train)),
        }


# ---------------------------------------------------------------------------
# Fitting entry points
# ---------------------------------------------------------------------------


def fit_instrument_model(train: Dataset) -> LogisticModel:
    """Logistic regression of Z on (1, X)."""
    if train.z.min() == train.z.max():
        raise EmptyArm("instrument takes a single value in training data")
    return _fit_logistic(_with_intercept(train.x), train.z.astype(float))


def fit_treatment_model(train: Dataset) -> LogisticModel:
    """Logistic regression of A on (1, Z, X)."""
    if train.a.min() == train.a.max():
        raise EmptyArm("treatment takes a single value in training data")
    design = _with_intercept(
        np.hstack([train.z.reshape(-1, 1).astype(float), train.x])
    )
    return _fit_logistic(design, train.a.astype(float))


def fit_outcome_model(train: Dataset, grid: OutcomeGrid) -> dict:
    """Conditional outcome models among controls, one per instrument arm."""
    models = {}
    for z in (0, 1):
        sel = (train.a == 0) & (train.z == z)
        if not sel.any():
            raise EmptyCell(f"no control units with Z={z} in training data")
        y_sub, x_sub = train.y[sel], train.x[sel]
        if grid.kind == "discrete":
            if train.d == 0:
                models[z] = _FrequencyOutcomeModel(y_sub, grid)
            else:
                models[z] = _PerValueLogisticOutcomeModel(y_sub, x_sub, grid)
        else:
            models[z] = _KernelOutcomeModel(y_sub, x_sub, grid)
    return models


def fit_theta(train: Dataset, grid: OutcomeGrid, config: RunConfig) -> FittedTheta:
    """Fit the full θ on a training fold."""
    return FittedTheta(
        fit_instrument_model(train),
        fit_treatment_model(train),
        fit_outcome_model(train, grid),
        grid,
        config,
    )


# ---------------------------------------------------------------------------
# Local evaluation bundle and density ratio
# ---------------------------------------------------------------------------


class ThetaLocal(NamedTuple):
    """θ evaluated at a batch of covariate values.

    fz: (n,); fa: (n, 2); fy: (n, 2, m); zm/zM: (n,) argmin/argmax of
    f(A=1|Z=z, x) over z; derived slices at z_m/z_M; ry = R_Y.
    """

    fz: np.ndarray
    fa: np.ndarray
    fy: np.ndarray
    zm: np.ndarray
    fa_m: np.ndarray
    fa_M: np.ndarray
    fy_m: np.ndarray
    fy_M: np.ndarray
    ry: np.ndarray


def local_theta(
    theta: NuisanceTheta,
    x: np.ndarray,
    relevance_tol: float = 0.02,
    on_weak: str = "raise",
) -> ThetaLocal:
    """Evaluate θ at a batch of x and resolve z_m/z_M per point.

    Raises :class:`WeakInstrument` when |f_A(1|Z=1) − f_A(1|Z=0)| falls below
    ``relevance_tol`` (strong-relevance guard) unless ``on_weak='ignore'``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    fz = theta.f_z(x)
    fa = np.column_stack([theta.f_a(0, x), theta.f_a(1, x)])
    fy = np.stack([theta.f_y(0, x), theta.f_y(1, x)], axis=1)
    gap = np.abs(fa[:, 1] - fa[:, 0])
    if on_weak == "raise" and np.any(gap < relevance_tol):
        idx = int(np.argmin(gap))
        raise WeakInstrument(
            f"|f(A=1|Z=1,x) - f(A=1|Z=0,x)| = {gap[idx]:.4g} < {relevance_tol}"
            f" at evaluation point {idx}"
        )
    zm = (fa[:, 1] < fa[:, 0]).astype(np.int64)
    rows = np.arange(len(fz))
    fa_m = fa[rows, zm]
    fa_M = fa[rows, 1 - zm]
    fy_m = fy[rows, zm, :]
    fy_M = fy[rows, 1 - zm, :]
    ry = fy_M / fy_m
    return ThetaLocal(fz, fa, fy, zm, fa_m, fa_M, fy_m, fy_M, ry)


@dataclass(frozen=True)
class DensityRatioFn:
    """R_Y(y, x) = f(Y=y|A=0, Z=z_M, x) / f(Y=y|A=0, Z=z_m, x) on the grid."""

    values: np.ndarray  # (n, m)
    zm: np.ndarray  # (n,)
    grid: OutcomeGrid


def density_ratio(
    theta: NuisanceTheta, x: np.ndarray, relevance_tol: float = 0.02
) -> DensityRatioFn:
    tl = local_theta(theta, x, relevance_tol=relevance_tol)
    return DensityRatioFn(tl.ry, tl.zm, theta.grid)
