"""Acceptance criteria, one test each, with the tolerances fixed up front.

Training criteria use the bundled configs (5 seeds each) and take tens of
minutes on one CPU core.  The full 40000-iteration depth study runs only when
DEEPBSDE_FULL=1; its reduced variant always runs.
"""

import math
import os

import numpy as np
import pytest

from deepbsde import experiment, gradcheck, net, oracles, problems, solver
from deepbsde.net import NetConfig
from deepbsde.numerics import make_rng, standard_normal

FULL = os.environ.get("DEEPBSDE_FULL") == "1"

GRADCHECK_TOL = 1e-5
FK_SIGMAS = 3.0
HJB_TOL = 0.010
SWEEP_TOL = 0.02
ALLEN_CAHN_TOL = 0.010
BS_TOL = 0.015
NO_DEFAULT_VALUE = 60.781
NO_DEFAULT_SIGMAS = 3.0
TABLE1_H2_TOL = 0.015


def run_config(name, *overrides):
    config = experiment.apply_overrides(experiment.load_config(name), overrides)
    return experiment.run_experiment(config)


def run_sweep(name, *overrides):
    config = experiment.apply_overrides(experiment.load_config(name), overrides)
    return [(point, experiment.run_experiment(cfg)) for point, cfg in experiment.expand_sweep(config)]


def test_criterion_1_gradient_correctness(acceptance):
    results = gradcheck.run_suite(dims=(1, 2, 3), steps=(1, 2, 3, 4), trials=24, seed=0)
    worst = max(r.max_relative_error for r in results)
    covered = {r.problem_id for r in results}
    ok = worst <= GRADCHECK_TOL and covered == set(gradcheck.BENCHMARK_PROBLEMS)
    acceptance("1 gradient correctness", ok,
               f"max relative error {worst:.2e} over {len(results)} instances (<= {GRADCHECK_TOL:g})")
    assert ok


@pytest.mark.parametrize("d", [1, 10])
def test_criterion_2_linear_feynman_kac(d, acceptance):
    spec = problems.heat(d=d)
    oracle = oracles.linear_fk_reference(spec, 1_000_000, make_rng(2024, d))
    result = run_config("heat", f"problem.params.d={d}", "train.runs=5")
    u0 = result.summary.final_u0
    se = math.sqrt(oracle.std_error**2 + u0.var(ddof=1) / u0.size)
    gap = abs(u0.mean() - oracle.value)
    ok = gap <= FK_SIGMAS * se
    acceptance(f"2 linear Feynman-Kac d={d}", ok,
               f"u0 {u0.mean():.5f} vs oracle {oracle.value:.5f}, gap {gap:.2e} "
               f"<= {FK_SIGMAS:g} x {se:.2e}")
    assert ok


def test_criterion_3_hjb(acceptance):
    result = run_config("hjb")
    rel = result.summary.final_relative_error.mean()
    ok = rel <= HJB_TOL
    acceptance("3 HJB d=100 lambda=1", ok,
               f"mean relative error {rel:.3%} (<= {HJB_TOL:.1%}) vs oracle "
               f"{result.reference.value:.4f}; mean runtime {result.summary.runtimes.mean():.0f} s")
    assert ok


def test_criterion_4_hjb_lambda_sweep(acceptance):
    rows = run_sweep("hjb_lambda_sweep")
    lams = [p["problem.params.lambda"] for p, _ in rows]
    means = [r.summary.final_u0.mean() for _, r in rows]
    rels = [r.summary.final_relative_error.mean() for _, r in rows]
    decreasing = all(a > b for a, b in zip(means, means[1:]))
    ok = decreasing and max(rels) <= SWEEP_TOL
    detail = ", ".join(f"lam={lam}: {m:.4f} ({e:.2%})" for lam, m, e in zip(lams, means, rels))
    acceptance("4 HJB lambda sweep", ok,
               f"decreasing={decreasing}, max error {max(rels):.2%} (<= {SWEEP_TOL:.0%}); {detail}")
    assert ok


def test_criterion_5_allen_cahn(acceptance):
    result = run_config("allen_cahn")
    rel = result.summary.final_relative_error.mean()
    ok = rel <= ALLEN_CAHN_TOL
    acceptance("5 Allen-Cahn d=100", ok,
               f"mean relative error {rel:.3%} (<= {ALLEN_CAHN_TOL:.1%}), u0 "
               f"{result.summary.final_u0.mean():.5f} vs 0.0528")
    assert ok


def test_criterion_6_default_risk_black_scholes(acceptance):
    result = run_config("bs_default_risk")
    rel = result.summary.final_relative_error.mean()
    ok = rel <= BS_TOL
    acceptance("6a default-risk Black-Scholes", ok,
               f"mean relative error {rel:.3%} (<= {BS_TOL:.1%}), u0 "
               f"{result.summary.final_u0.mean():.3f} vs 57.300")
    assert ok


def test_criterion_6_no_default_oracle(acceptance):
    spec = problems.linear_bs_no_default()
    est = oracles.linear_fk_reference(spec, 1_000_000, make_rng(2024, 0))
    gap = abs(est.value - NO_DEFAULT_VALUE)
    ok = gap <= NO_DEFAULT_SIGMAS * est.std_error
    acceptance("6b no-default oracle", ok,
               f"{est.value:.3f} +- {est.std_error:.3f} vs {NO_DEFAULT_VALUE} "
               f"(gap {gap / est.std_error:.0f} standard errors)")
    assert ok


def _depth_study(name, acceptance, label, check_h2):
    rows = run_sweep(name)
    errors = [r.summary.final_relative_error.mean() for _, r in rows]
    depths = [p["net.hidden_layers"] for p, _ in rows]
    first3 = errors[:3]
    monotone = all(a > b for a, b in zip(first3, first3[1:]))
    ok = monotone and (not check_h2 or first3[2] <= TABLE1_H2_TOL)
    detail = ", ".join(f"H={h}: {e:.2%}" for h, e in zip(depths, errors))
    acceptance(label, ok, f"monotone H=0..2: {monotone}; {detail}")
    assert ok


def test_criterion_7_depth_study_smoke(acceptance):
    _depth_study("table1_smoke", acceptance, "7 depth study (d=20 smoke)", check_h2=False)


@pytest.mark.skipif(not FULL, reason="40000-iteration depth study; set DEEPBSDE_FULL=1")
def test_criterion_7_depth_study_full(acceptance):
    _depth_study("table1", acceptance, "7 depth study (d=100, full)", check_h2=True)


def test_criterion_8_property_suite(acceptance):
    failures = []

    # BN normalisation in training mode
    cfg = NetConfig(input_dim=4, output_dim=4, hidden_layers=2, bn_epsilon=1e-10)
    params = net.init_subnet(cfg, make_rng(0))
    _, cache = net.forward_train(params, 2.0 + 3.0 * standard_normal(make_rng(1), (32, 4)),
                                 update_stats=False)
    for bn in [cache.input_bn] + cache.bns:
        if np.max(np.abs(bn.xhat.mean(axis=0))) > 1e-10 or np.max(np.abs(bn.xhat.var(axis=0) - 1)) > 1e-8:
            failures.append("BN normalisation")

    # adjointness of the diffusion operators
    rng = make_rng(2)
    for pid in sorted(problems.PROBLEMS):
        spec = problems.make_problem(pid, d=3)
        x = np.abs(standard_normal(rng, (5, 3))) + 0.5
        v, w = standard_normal(rng, (5, 3)), standard_normal(rng, (5, 3))
        lhs = np.sum(spec.diffusion_apply(0.1, x, v) * w, axis=-1)
        rhs = np.sum(v * spec.diffusion_transpose_apply(0.1, x, w), axis=-1)
        if not np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12):
            failures.append(f"adjointness {pid}")

    # intensity Q: continuous at the thresholds, non-increasing
    p = problems.DefaultRiskParams()
    for v in (p.v_h, p.v_l):
        if abs(problems.intensity_q(v - 1e-9, p) - problems.intensity_q(v + 1e-9, p)) > 1e-9:
            failures.append("Q continuity")
    ys = np.linspace(0, 120, 2001)
    if np.any(np.diff(problems.intensity_q(ys, p)) > 0):
        failures.append("Q monotonicity")

    # the oscillating exact solution solves its PDE (central differences)
    spec = problems.gobet_oscillating(d=3)
    kappa, lam, d, T = 1.6, 0.1, 3, 1.0
    h = 1e-4
    for k in range(5):
        t = 0.2 * k
        x = standard_normal(make_rng(3, k), (3,))
        u = lambda t_, x_: oracles.gobet_exact(t_, x_, kappa, lam, d, T)
        ut = (u(t + h, x) - u(t - h, x)) / (2 * h)
        lap, grad = 0.0, np.zeros(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            lap += (u(t, x + e) - 2 * u(t, x) + u(t, x - e)) / h**2
            grad[i] = (u(t, x + e) - u(t, x - e)) / (2 * h)
        f = spec.generator(t, x[None], np.array([u(t, x)]), grad[None])[0]
        if abs(ut + 0.5 * lap + f) > 1e-5:
            failures.append("oscillating residual")

    # determinism: two identical training runs give identical CSV bytes
    config = experiment.apply_overrides(experiment.load_config("heat"),
                                        ["train.iterations=30", "train.runs=2",
                                         "train.record_time=false"])
    a = experiment.run_experiment(config)
    b = experiment.run_experiment(config)
    if any(experiment.records_csv(x) != experiment.records_csv(y)
           for x, y in zip(a.summary.runs, b.summary.runs)):
        failures.append("determinism")

    # martingale property of the z-sum for f = 0
    spec = problems.heat(d=3)
    grid = solver.TimeGrid(5, 1.0)
    model = solver.init_params(spec, grid, solver.default_net_config(spec), make_rng(4))
    X, dW = solver.sample_paths(spec, grid, 100_000, make_rng(5))
    ro = solver.rollout(spec, grid, model, X, dW, training=False)
    diff = ro.u_hat - model.u0[0]
    if abs(diff.mean()) > 3 * diff.std(ddof=1) / math.sqrt(diff.size):
        failures.append("martingale mean")

    ok = not failures
    acceptance("8 property suite", ok, "all properties hold" if ok else f"failed: {failures}")
    assert ok
