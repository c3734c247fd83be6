"""Shared fixtures: exact discrete forward-model oracle.

``DiscreteLaw`` builds every population object of a binary-outcome,
binary-instrument, covariate-free law directly from the structural
parameters (α, β, f(Y⁰), f(Z)) by enumeration — independently of the
package's identification machinery — so tests can compare recovered
quantities against ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from sepiv.core import OutcomeGrid
from sepiv.nuisance import TabularTheta


@dataclass(frozen=True)
class DiscreteLaw:
    """Exact binary-Y, binary-Z, d = 0 law from structural parameters."""

    alpha: np.ndarray  # (2,), alpha[0] = 1 (reference value y_R = 0)
    beta: np.ndarray  # (2,)
    fy0_marg: np.ndarray  # (2,), marginal pmf of Y⁰
    p1: float  # f(Z=1)
    y1_pmf: np.ndarray  # (2,), pmf of Y¹ | A=1 (independent of Z)

    # -- forward model ------------------------------------------------------

    @property
    def grid(self) -> OutcomeGrid:
        return OutcomeGrid(np.array([0.0, 1.0]), np.ones(2), "discrete")

    @property
    def pz(self) -> np.ndarray:
        return np.array([1.0 - self.p1, self.p1])

    @property
    def p_a1(self) -> np.ndarray:
        """P(A=1 | Y⁰=y, Z=z), shape (2, 2) indexed [y, z]."""
        ab = self.alpha[:, None] * self.beta[None, :]
        return ab / (1.0 + ab)

    @property
    def joint(self) -> np.ndarray:
        """f(Y⁰=y, A=a, Z=z), shape (2, 2, 2) indexed [y, a, z]."""
        out = np.empty((2, 2, 2))
        base = self.fy0_marg[:, None] * self.pz[None, :]
        out[:, 1, :] = base * self.p_a1
        out[:, 0, :] = base * (1.0 - self.p_a1)
        return out

    # -- observed-data parameterization θ -----------------------------------

    @property
    def fa(self) -> np.ndarray:
        """f(A=1 | Z=z), shape (2,)."""
        return (self.fy0_marg[:, None] * self.p_a1).sum(axis=0)

    @property
    def fy_obs(self) -> np.ndarray:
        """f(Y=y | A=0, Z=z), shape (2, 2) indexed [z, y]."""
        num = self.fy0_marg[:, None] * (1.0 - self.p_a1)  # (y, z)
        return (num / num.sum(axis=0)[None, :]).T

    def theta(self) -> TabularTheta:
        return TabularTheta(self.p1, self.fa, self.fy_obs, self.grid)

    # -- derived truths -----------------------------------------------------

    @property
    def z_m(self) -> int:
        return int(np.argmin(self.fa))

    @property
    def gstar(self) -> np.ndarray:
        """Normalized α · f(Y | A=0, z_m)."""
        g = self.alpha * self.fy_obs[self.z_m]
        return g / g.sum()

    @property
    def frakp1(self) -> np.ndarray:
        """P(Z=1 | A=1, Y⁰=y), shape (2,)."""
        j = self.joint
        return j[:, 1, 1] / j[:, 1, :].sum(axis=1)

    def mu(self, h: np.ndarray) -> np.ndarray:
        """μ_z(h) = E{h(Y⁰) | A=1, Z=z}, shape (2,)."""
        j = self.joint[:, 1, :]  # (y, z)
        return (h[:, None] * j).sum(axis=0) / j.sum(axis=0)

    @property
    def e_a(self) -> float:
        return float(self.joint[:, 1, :].sum())

    @property
    def e_y0_treated(self) -> float:
        """E[Y⁰ | A=1]."""
        j = self.joint[:, 1, :].sum(axis=1)
        return float((self.grid.points * j).sum() / j.sum())

    @property
    def att(self) -> float:
        """τ* = E[Y¹ − Y⁰ | A=1] with the fixed Y¹ | A=1 law."""
        ey1 = float((self.grid.points * self.y1_pmf).sum())
        return ey1 - self.e_y0_treated

    def observed_joint(self) -> np.ndarray:
        """Observed f(Y=y, A=a, Z=z), shape (2, 2, 2) indexed [y, a, z].

        For A=1 the observed outcome is Y¹ ~ ``y1_pmf`` independent of
        (Z, Y⁰); for A=0 it is Y⁰.
        """
        out = np.empty((2, 2, 2))
        out[:, 0, :] = self.joint[:, 0, :]
        pa_z = self.joint[:, 1, :].sum(axis=0)  # f(A=1, Z=z)
        out[:, 1, :] = self.y1_pmf[:, None] * pa_z[None, :]
        return out


def make_law(
    alpha1: float,
    beta0: float,
    beta1: float,
    fy1: float,
    p1: float,
    y1_p: float = 0.7,
) -> DiscreteLaw:
    return DiscreteLaw(
        alpha=np.array([1.0, alpha1]),
        beta=np.array([beta0, beta1]),
        fy0_marg=np.array([1.0 - fy1, fy1]),
        p1=p1,
        y1_pmf=np.array([1.0 - y1_p, y1_p]),
    )


@pytest.fixture(scope="session")
def toy() -> DiscreteLaw:
    """The reference discrete law used throughout the oracle tests."""
    return make_law(alpha1=2.0, beta0=0.5, beta1=3.0, fy1=0.4, p1=0.5)


def draw_admissible(rng: np.random.Generator, min_gap: float = 0.05) -> DiscreteLaw:
    """Rejection-sample a law in the admissible box with a relevant instrument."""
    while True:
        law = make_law(
            alpha1=rng.uniform(0.2, 5.0),
            beta0=rng.uniform(0.2, 5.0),
            beta1=rng.uniform(0.2, 5.0),
            fy1=rng.uniform(0.1, 0.9),
            p1=rng.uniform(0.2, 0.8),
        )
        if abs(law.beta[1] - law.beta[0]) < 1e-3:
            continue
        if abs(law.fa[1] - law.fa[0]) < min_gap:
            continue
        return law
