"""Shared data model: observations, outcome grids, configuration, validation.

All types here are immutable after construction and safe to share across
concurrent workers.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "SepIVError",
    "ValidationError",
    "EmptyArm",
    "NonBinary",
    "DegenerateOutcome",
    "ConfigError",
    "NumericError",
    "WeakInstrument",
    "NoConvergence",
    "SingularSystem",
    "NormalizationFailure",
    "DivisionGuard",
    "RankDeficient",
    "EmptyCell",
    "InsufficientData",
    "ObservedRow",
    "Dataset",
    "OutcomeGrid",
    "RunConfig",
    "ValidationReport",
    "validate",
    "make_outcome_grid",
]


# ---------------------------------------------------------------------------
# Errors.  ``exit_code`` is the CLI process exit status: 2 for input/validation
# problems, 3 for numerical failures.
# ---------------------------------------------------------------------------


class SepIVError(Exception):
    exit_code = 3


class ValidationError(SepIVError):
    exit_code = 2


class EmptyArm(ValidationError):
    pass


class NonBinary(ValidationError):
    pass


class DegenerateOutcome(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NumericError(SepIVError):
    exit_code = 3


class WeakInstrument(NumericError):
    pass


class NoConvergence(NumericError):
    pass


class SingularSystem(NumericError):
    pass


class NormalizationFailure(NumericError):
    pass


class DivisionGuard(NumericError):
    pass


class RankDeficient(NumericError):
    pass


class EmptyCell(NumericError):
    pass


class InsufficientData(NumericError):
    pass


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservedRow:
    """One observed unit O = (Y, A, Z, X)."""

    y: float
    a: int
    z: int
    x: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not math.isfinite(self.y):
            raise NonBinary(f"outcome must be finite, got {self.y}")
        if self.a not in (0, 1):
            raise NonBinary(f"treatment must be 0 or 1, got {self.a}")
        if self.z not in (0, 1):
            raise NonBinary(f"instrument must be 0 or 1, got {self.z}")
        if not all(math.isfinite(v) for v in self.x):
            raise NonBinary("covariates must be finite")


class Dataset:
    """A validated collection of observed rows, stored as numpy arrays."""

    def __init__(self, y: np.ndarray, a: np.ndarray, z: np.ndarray, x: np.ndarray):
        y = np.asarray(y, dtype=float)
        a = np.asarray(a)
        z = np.asarray(z)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(y), -1) if x.size else x.reshape(len(y), 0)
        if len(y) == 0:
            raise EmptyArm("dataset must contain at least one row")
        if not (len(y) == len(a) == len(z) == len(x)):
            raise ConfigError("y, a, z, x must have equal length")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise NonBinary("outcomes and covariates must be finite")
        if not np.isin(a, (0, 1)).all():
            raise NonBinary("treatment must be binary 0/1")
        if not np.isin(z, (0, 1)).all():
            raise NonBinary("instrument must be binary 0/1")
        self.y = y
        self.a = a.astype(np.int64)
        self.z = z.astype(np.int64)
        self.x = x
        self.y.setflags(write=False)
        self.a.setflags(write=False)
        self.z.setflags(write=False)
        self.x.setflags(write=False)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_rows(cls, rows: Sequence[ObservedRow]) -> "Dataset":
        if not rows:
            raise EmptyArm("dataset must contain at least one row")
        d = len(rows[0].x)
        if any(len(r.x) != d for r in rows):
            raise ConfigError("all rows must share the same covariate dimension")
        return cls(
            np.array([r.y for r in rows]),
            np.array([r.a for r in rows]),
            np.array([r.z for r in rows]),
            np.array([r.x for r in rows]).reshape(len(rows), d),
        )

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise EmptyArm("empty CSV file") from None
            expected = ["y", "a", "z"] + [f"x{j + 1}" for j in range(len(header) - 3)]
            if header != expected:
                raise ConfigError(
                    f"malformed CSV header: expected {expected!r}, got {header!r}"
                )
            rows = list(reader)
        if not rows:
            raise EmptyArm("CSV contains no data rows")
        try:
            arr = np.array(rows, dtype=float)
        except ValueError as exc:
            raise ConfigError(f"non-numeric or missing cell in CSV: {exc}") from None
        if arr.shape[1] != len(header):
            raise ConfigError("CSV rows have inconsistent column counts")
        a = arr[:, 1]
        z = arr[:, 2]
        if not np.isin(a, (0.0, 1.0)).all():
            raise NonBinary("column 'a' must be binary 0/1")
        if not np.isin(z, (0.0, 1.0)).all():
            raise NonBinary("column 'z' must be binary 0/1")
        return cls(arr[:, 0], a.astype(int), z.astype(int), arr[:, 3:])

    def to_csv(self, path) -> None:
        header = ["y", "a", "z"] + [f"x{j + 1}" for j in range(self.d)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(self.n):
                writer.writerow(
                    [repr(float(self.y[i])), int(self.a[i]), int(self.z[i])]
                    + [repr(float(v)) for v in self.x[i]]
                )

    # -- views --------------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def rows(self) -> Iterator[ObservedRow]:
        for i in range(self.n):
            yield ObservedRow(
                float(self.y[i]), int(self.a[i]), int(self.z[i]), tuple(self.x[i])
            )

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.y[idx], self.a[idx], self.z[idx], self.x[idx])


@dataclass(frozen=True)
class OutcomeGrid:
    """Quadrature grid over the outcome support.

    ``points`` is strictly increasing; ``weights`` are quadrature weights
    (unit weights on discrete grids, trapezoidal on continuous ones).
    """

    points: np.ndarray
    weights: np.ndarray
    kind: str  # "discrete" | "continuous"

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        wts = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)
        if pts.ndim != 1 or len(pts) < 2:
            raise ConfigError("grid needs at least two points")
        if not np.all(np.diff(pts) > 0):
            raise ConfigError("grid points must be strictly increasing")
        if not np.all(wts > 0) or len(wts) != len(pts):
            raise ConfigError("grid weights must be positive and match points")
        if self.kind not in ("discrete", "continuous"):
            raise ConfigError(f"unknown grid kind {self.kind!r}")
        pts.setflags(write=False)
        wts.setflags(write=False)

    @property
    def m(self) -> int:
        return len(self.points)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Quadrature of ``values`` (…, m) over the grid."""
        return np.asarray(values) @ self.weights


@dataclass(frozen=True)
class RunConfig:
    """Run-wide configuration; serialized into every CLI output."""

    k_folds: int = 5
    grid_size: int = 101
    fp_tol: float = 1e-10
    fp_max_iter: int = 10_000
    prob_floor: float = 0.01
    density_floor: float = 1e-6
    relevance_tol: float = 0.02
    seed: int = 0
    median_reps: int = 1
    level: float = 0.05

    def __post_init__(self) -> None:
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        if self.median_reps < 1:
            raise ConfigError("median_reps must be >= 1")
        if not self.fp_tol > 0:
            raise ConfigError("fixed-point tol must be > 0")
        if self.fp_max_iter < 1:
            raise ConfigError("fixed-point max_iter must be >= 1")
        if not (0 < self.prob_floor < 0.5):
            raise ConfigError("prob_floor must lie in (0, 0.5)")
        if not self.density_floor > 0:
            raise ConfigError("density_floor must be > 0")
        if not (0 < self.level < 1):
            raise ConfigError("level must lie in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")

    def to_json_dict(self) -> dict:
        return {
            "k_folds": self.k_folds,
            "grid_size": self.grid_size,
            "fixed_point": {"tol": self.fp_tol, "max_iter": self.fp_max_iter},
            "clip": {
                "prob_floor": self.prob_floor,
                "density_floor": self.density_floor,
            },
            "relevance_tol": self.relevance_tol,
            "seed": self.seed,
            "median_reps": self.median_reps,
            "level": self.level,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "RunConfig":
        return cls(
            k_folds=obj.get("k_folds", 5),
            grid_size=obj.get("grid_size", 101),
            fp_tol=obj.get("fixed_point", {}).get("tol", 1e-10),
            fp_max_iter=obj.get("fixed_point", {}).get("max_iter", 10_000),
            prob_floor=obj.get("clip", {}).get("prob_floor", 0.01),
            density_floor=obj.get("clip", {}).get("density_floor", 1e-6),
            relevance_tol=obj.get("relevance_tol", 0.02),
            seed=obj.get("seed", 0),
            median_reps=obj.get("median_reps", 1),
            level=obj.get("level", 0.05),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


@dataclass(frozen=True)
class ValidationReport:
    n: int
    d: int
    arm_counts: dict  # {(a, z): count}
    y_min: float
    y_max: float
    empty_cells: tuple = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.empty_cells


def validate(dataset: Dataset) -> ValidationReport:
    """Check structural preconditions: binary arms present, finite outcomes.

    Pure and idempotent.  Raises :class:`EmptyArm` when any of the four (a, z)
    cells is empty (degenerate treatment or instrument).
    """
    counts = {}
    empty = []
    for a in (0, 1):
        for z in (0, 1):
            c = int(np.sum((dataset.a == a) & (dataset.z == z)))
            counts[(a, z)] = c
            if c == 0:
                empty.append((a, z))
    if empty:
        raise EmptyArm(f"empty (a, z) cells: {empty}")
    return ValidationReport(
        n=dataset.n,
        d=dataset.d,
        arm_counts=counts,
        y_min=float(dataset.y.min()),
        y_max=float(dataset.y.max()),
        empty_cells=tuple(empty),
    )


def _silverman_bandwidth(values: np.ndarray, dims: int = 1) -> float:
    """Silverman rule-of-thumb bandwidth for one coordinate of a ``dims``-
    dimensional Gaussian product kernel (``dims=1`` is the univariate rule)."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    sd = float(np.std(values, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(values, [75, 25])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if spread <= 0:
        spread = max(abs(float(values[0])), 1.0)
    if dims == 1:
        return 0.9 * spread * n ** (-0.2)
    factor = (4.0 / (dims + 2.0)) ** (1.0 / (dims + 4.0))
    return factor * spread * n ** (-1.0 / (dims + 4.0))


def make_outcome_grid(dataset: Dataset, config: RunConfig) -> OutcomeGrid:
    """Build the outcome grid: discrete when few distinct values, else a
    continuous equispaced grid spanning the data range plus one bandwidth
    margin, with trapezoidal weights."""
    uniq = np.unique(dataset.y)
    if len(uniq) < 2:
        raise DegenerateOutcome("all outcomes identical; no grid can be formed")
    if len(uniq) <= config.grid_size:
        return OutcomeGrid(uniq, np.ones_like(uniq), "discrete")
    h = _silverman_bandwidth(dataset.y)
    lo = float(dataset.y.min()) - h
    hi = float(dataset.y.max()) + h
    pts = np.linspace(lo, hi, config.grid_size)
    dy = (hi - lo) / (config.grid_size - 1)
    wts = np.full(config.grid_size, dy)
    wts[0] = wts[-1] = dy / 2
    return OutcomeGrid(pts, wts, "continuous")
