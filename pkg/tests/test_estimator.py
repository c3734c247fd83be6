"""Cross-fitted estimator, median adjustment, and comparison estimators."""
import numpy as np
import pytest
import scipy.special
import scipy.stats

from sepiv.core import Dataset, EmptyArm, RunConfig, SepIVError
from sepiv.estimator import (
    CrossfitContext,
    EstimateResult,
    crossfit_att,
    est_2sls,
    est_ignorability_aipw,
    est_ols,
    fold_indices,
    median_adjust,
    normal_ppf,
    normal_sf,
)
from sepiv.rng import stream


# ---------------------------------------------------------------------------
# Normal quantiles / survival
# ---------------------------------------------------------------------------


def test_normal_ppf_matches_reference():
    ps = np.concatenate(
        [[1e-12, 1e-6, 0.001, 0.024, 0.025], np.linspace(0.05, 0.95, 19), [0.975, 0.999, 1 - 1e-9]]
    )
    for p in ps:
        assert normal_ppf(float(p)) == pytest.approx(
            scipy.special.ndtri(p), abs=1.3e-8
        )
    with pytest.raises(ValueError):
        normal_ppf(0.0)
    with pytest.raises(ValueError):
        normal_ppf(1.0)


def test_normal_sf_matches_reference():
    x = np.array([-8.0, -1.5, 0.0, 1.5, 8.0])
    np.testing.assert_allclose(normal_sf(x), scipy.stats.norm.sf(x), rtol=1e-12)
    assert normal_sf(1.0) == pytest.approx(scipy.stats.norm.sf(1.0), rel=1e-12)


# ---------------------------------------------------------------------------
# Folds / results
# ---------------------------------------------------------------------------


def test_fold_indices_partition():
    folds = fold_indices(103, 5, stream(0, "folds"))
    allidx = np.concatenate(folds)
    assert sorted(allidx) == list(range(103))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    again = fold_indices(103, 5, stream(0, "folds"))
    for f, g in zip(folds, again):
        assert np.array_equal(f, g)


def test_estimate_result_validation():
    with pytest.raises(SepIVError):
        EstimateResult(1.0, -0.1, (0.9, 1.1), 10, 2, "sepiv", 0.05, 0)
    with pytest.raises(SepIVError):
        EstimateResult(1.0, 0.1, (1.2, 1.4), 10, 2, "sepiv", 0.05, 0)
    res = EstimateResult(1.0, 0.1, (0.8, 1.2), 10, 2, "sepiv", 0.05, 0)
    d = res.to_json_dict()
    assert d["tau_hat"] == 1.0 and d["ci"] == [0.8, 1.2] and d["flags"] == []


# ---------------------------------------------------------------------------
# Exact-θ estimation on the discrete oracle law
# ---------------------------------------------------------------------------


def _sample_observed(law, n, seed):
    """Draw (y, a, z) from the observed joint law by cell enumeration."""
    oj = law.observed_joint()
    cells = np.array([(y, a, z) for y in (0, 1) for a in (0, 1) for z in (0, 1)])
    p = np.array([oj[y, a, z] for y, a, z in cells])
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(cells), size=n, p=p)
    y, a, z = cells[pick].T
    return Dataset(y.astype(float), a, z, np.zeros((n, 0)))


def test_exact_theta_estimator_is_consistent(toy):
    n = 50_000
    data = _sample_observed(toy, n, seed=21)
    cfg = RunConfig(seed=3)
    res = crossfit_att(data, cfg, exact_theta=toy.theta())
    assert res.k_folds == 1 and res.flags == ()
    assert abs(res.tau_hat - toy.att) < 3.0 * res.se
    # Wald CI geometry at the configured level
    z = normal_ppf(1.0 - cfg.level / 2.0)
    assert res.ci[0] == pytest.approx(res.tau_hat - z * res.se, abs=1e-12)
    assert res.ci[1] == pytest.approx(res.tau_hat + z * res.se, abs=1e-12)


def test_median_adjust_reduces_to_single_fit_with_exact_theta(toy):
    data = _sample_observed(toy, 2_000, seed=22)
    cfg = RunConfig(seed=5)
    base = crossfit_att(data, cfg, exact_theta=toy.theta())
    med = median_adjust(data, cfg, s_reps=3, exact_theta=toy.theta())
    # With exact θ there is no split randomness: every replicate coincides.
    assert med.tau_hat == pytest.approx(base.tau_hat, abs=1e-14)
    assert med.se == pytest.approx(base.se, abs=1e-14)
    with pytest.raises(ValueError):
        median_adjust(data, cfg, s_reps=0)


def test_rho0_indicator_matches_generic_estimate(toy):
    data = _sample_observed(toy, 3_000, seed=23)
    cfg = RunConfig(seed=7)
    ctx = CrossfitContext(data, cfg, exact_theta=toy.theta())
    thresholds = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])
    q = 0.3
    tau, se = ctx.rho0_indicator(thresholds, q)
    for j, t in enumerate(thresholds):
        res = ctx.estimate(lambda y, t=t: (y <= t).astype(float) - q, estimand="rho0")
        assert tau[j] == pytest.approx(res.tau_hat, abs=1e-10)
        assert se[j] == pytest.approx(res.se, abs=1e-10)


def test_fold_without_treated_units_raises():
    y = np.arange(40.0)
    a = np.zeros(40, dtype=int)
    a[:2] = 1  # 2 treated among 40: some fold will miss them
    z = np.tile([0, 1], 20)
    with pytest.raises(EmptyArm):
        CrossfitContext(Dataset(y, a, z, np.zeros((40, 0))), RunConfig(k_folds=5, seed=0))


# ---------------------------------------------------------------------------
# Comparison estimators
# ---------------------------------------------------------------------------


def _linear_iv_data(n, seed, tau=2.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1))
    z = (rng.uniform(size=n) < 0.5).astype(int)
    u = rng.standard_normal(n)  # confounder
    a = (0.8 * z + 0.8 * u + rng.standard_normal(n) > 0.7).astype(int)
    y = tau * a + x[:, 0] + u + rng.standard_normal(n)
    return Dataset(y, a, z, x)


def test_2sls_consistent_ols_biased_under_endogeneity():
    data = _linear_iv_data(40_000, seed=31)
    iv = est_2sls(data)
    ols = est_ols(data)
    assert iv.method == "twostage_ls" and ols.method == "ols"
    assert abs(iv.tau_hat - 2.0) < 3.0 * iv.se
    # OLS inherits the confounding and lands far from the truth
    assert abs(ols.tau_hat - 2.0) > 10.0 * ols.se


def test_ignorability_aipw_unbiased_under_randomization():
    rng = np.random.default_rng(33)
    n = 20_000
    x = rng.standard_normal((n, 1))
    z = (rng.uniform(size=n) < 0.5).astype(int)
    a = (rng.uniform(size=n) < 0.4).astype(int)  # randomized treatment
    y = 1.5 * a + 0.5 * x[:, 0] + rng.standard_normal(n)
    data = Dataset(y, a, z, x)
    res = est_ignorability_aipw(data, RunConfig(seed=9))
    assert res.method == "ignorability_aipw"
    assert abs(res.tau_hat - 1.5) < 3.0 * res.se
