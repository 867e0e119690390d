import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepbsde.numerics import make_rng, standard_normal
from deepbsde.oracles import gobet_exact
from deepbsde.problems import (
    PROBLEMS,
    DefaultRiskParams,
    Provenance,
    allen_cahn,
    bs_default_risk,
    gobet_oscillating,
    hjb_lqg,
    intensity_q,
    intensity_q_derivative,
    linear_bs_no_default,
    make_problem,
)

DEFAULTS = DefaultRiskParams()


@pytest.mark.parametrize("y, expected", [(40.0, 0.2), (80.0, 0.02), (60.0, 0.11)])
def test_intensity_branches(y, expected):
    assert intensity_q(y, DEFAULTS) == pytest.approx(expected, abs=1e-15)


def test_intensity_continuity_at_thresholds():
    for v in (DEFAULTS.v_h, DEFAULTS.v_l):
        assert abs(intensity_q(v - 1e-9, DEFAULTS) - intensity_q(v, DEFAULTS)) < 1e-6


def test_intensity_non_increasing():
    y = np.linspace(0.0, 120.0, 10**4)
    assert np.all(np.diff(intensity_q(y, DEFAULTS)) <= 0.0)


def test_intensity_derivative_uses_right_branch_at_kinks():
    slope = (DEFAULTS.gamma_h - DEFAULTS.gamma_l) / (DEFAULTS.v_h - DEFAULTS.v_l)
    assert intensity_q_derivative(DEFAULTS.v_h, DEFAULTS) == slope
    assert intensity_q_derivative(DEFAULTS.v_l, DEFAULTS) == 0.0
    assert intensity_q_derivative(40.0, DEFAULTS) == 0.0


@pytest.mark.parametrize("kwargs", [dict(v_h=70.0, v_l=50.0), dict(gamma_h=0.01),
                                    dict(delta=1.0), dict(delta=-0.1)])
def test_default_risk_params_validated(kwargs):
    with pytest.raises(ValueError):
        DefaultRiskParams(**kwargs)


def test_bs_default_risk_pieces():
    spec = bs_default_risk()
    x = np.full((1, 100), 100.0)
    assert spec.terminal(x)[0] == 100.0
    y = np.array([57.3])
    expected = -(1.0 / 3.0) * intensity_q(57.3, DEFAULTS) * 57.3 - 0.02 * 57.3
    assert spec.generator(0.0, x, y, np.zeros((1, 100)))[0] == pytest.approx(expected, rel=1e-14)
    assert spec.reference.value == 57.300
    assert spec.reference.provenance is Provenance.EXTERNAL_PUBLISHED
    assert np.array_equal(spec.start_point, np.full(100, 100.0))


def test_bs_default_risk_reference_only_for_paper_setting():
    assert bs_default_risk(d=10).reference is None


def test_linear_bs_generator():
    spec = linear_bs_no_default(d=3)
    x = np.ones((1, 3))
    assert spec.generator(0.3, x, np.array([1.0]), np.full((1, 3), 5.0))[0] == pytest.approx(-0.02)
    other = linear_bs_no_default(d=3, p=DefaultRiskParams(delta=0.1))
    y = np.array([42.0])
    assert other.generator(0.0, x, y, x)[0] == spec.generator(0.0, x, y, x)[0]
    assert spec.linear_rate == 0.02


def test_hjb_pieces():
    spec = hjb_lqg(d=100, lam=1.0)
    assert spec.terminal(np.zeros((1, 100)))[0] == pytest.approx(np.log(0.5), abs=1e-15)
    assert spec.generator(0.0, np.zeros((1, 100)), np.zeros(1), np.zeros((1, 100)))[0] == 0.0
    z = np.array([[1.0, 2.0]])
    small = hjb_lqg(d=2, lam=3.0)
    # -lam |grad u|^2 with z = sqrt(2) grad u
    assert small.generator(0.0, z, np.zeros(1), z)[0] == pytest.approx(-3.0 * 5.0 / 2.0)


@pytest.mark.parametrize("lam", [0.0, -1.0])
def test_hjb_rejects_non_positive_lambda(lam):
    with pytest.raises(ValueError):
        hjb_lqg(d=2, lam=lam)


def test_allen_cahn_pieces():
    spec = allen_cahn(d=100, T=0.3)
    x = np.zeros((2, 100))
    assert np.array_equal(spec.generator(0.0, x, np.array([0.0, 1.0]), x), [0.0, 0.0])
    assert spec.terminal(np.zeros((1, 100)))[0] == 0.5
    assert spec.reference.value == 0.0528
    assert spec.time_reversed
    assert allen_cahn(d=100, T=0.2).reference is None


def test_allen_cahn_generator_matches_cubic_on_grid():
    spec = allen_cahn(d=1, T=0.3)
    y = np.linspace(-2.0, 2.0, 401)
    x = np.zeros((y.size, 1))
    assert np.array_equal(spec.generator(0.0, x, y, x), y - y**3)


def test_gobet_pieces():
    spec = gobet_oscillating(d=100, kappa=1.6, lam=0.1, T=1.0)
    assert spec.terminal(np.zeros((1, 100)))[0] == 1.6
    assert spec.reference.value == 1.6
    assert spec.reference.provenance is Provenance.EXACT_FUNCTION


def test_gobet_generator_vanishes_on_exact_solution():
    spec = gobet_oscillating(d=5, kappa=1.6, lam=0.1, T=1.0)
    rng = make_rng(3)
    for t in (0.0, 0.25, 0.9):
        x = 3.0 * standard_normal(rng, (50, 5))
        y = gobet_exact(t, x, 1.6, 0.1, 5, 1.0)
        assert np.all(spec.generator(t, x, y, x) == 0.0)


def test_gobet_exact_solution_has_zero_residual():
    # u* solves du/dt + 1/2 Lap u = 0; check with finite differences
    kappa, lam, d, T = 1.6, 0.7, 3, 1.0
    x = np.array([0.3, -0.2, 0.5])
    t, h = 0.4, 1e-4
    u = lambda t_, x_: gobet_exact(t_, x_, kappa, lam, d, T)
    dt = (u(t + h, x) - u(t - h, x)) / (2 * h)
    lap = sum((u(t, x + h * e) - 2 * u(t, x) + u(t, x - h * e)) / h**2 for e in np.eye(d))
    assert abs(dt + 0.5 * lap) < 1e-6


@pytest.mark.parametrize("problem_id", sorted(PROBLEMS))
def test_adjointness_of_diffusion(problem_id):
    spec = make_problem(problem_id, d=7)
    rng = make_rng(5)
    for _ in range(100):
        t = float(rng.uniform((1,), 0, spec.horizon)[0])
        x = spec.start_point + standard_normal(rng, (1, 7))
        v, w = standard_normal(rng, (2, 1, 7))
        lhs = np.sum(spec.diffusion_apply(t, x, v) * w)
        rhs = np.sum(v * spec.diffusion_transpose_apply(t, x, w))
        scale = 1.0 + abs(lhs)
        assert abs(lhs - rhs) <= 1e-12 * scale


@pytest.mark.parametrize("problem_id", sorted(PROBLEMS))
def test_generator_and_derivatives_finite(problem_id):
    spec = make_problem(problem_id, d=4)
    rng = make_rng(6)
    x = spec.start_point + standard_normal(rng, (8, 4))
    y = spec.u0_bracket[0] + standard_normal(rng, (8,))
    z = standard_normal(rng, (8, 4))
    for fn in (spec.generator, spec.generator_dy):
        assert np.all(np.isfinite(fn(0.1, x, y, z)))
    assert spec.generator_dz(0.1, x, y, z).shape == (8, 4)
    assert np.all(np.isfinite(spec.terminal(x)))


@settings(max_examples=50, deadline=None)
@given(y=st.floats(-100, 200), problem_id=st.sampled_from(["bs_default_risk", "allen_cahn", "gobet",
                                                          "hjb_lqg", "bs_linear"]))
def test_generator_dy_matches_finite_difference(y, problem_id):
    spec = make_problem(problem_id, d=2)
    x = spec.start_point[None, :] + 0.1
    z = np.array([[0.3, -0.2]])
    if problem_id == "bs_default_risk" and min(abs(y - 50.0), abs(y - 70.0)) < 1e-3:
        return
    if problem_id == "gobet":
        s = y - gobet_exact(0.2, x, 1.6, 0.1, 2, 1.0)[0]
        if abs(abs(s) - 1.0) < 1e-3:
            return
    h = 1e-6
    fd = (spec.generator(0.2, x, np.array([y + h]), z) - spec.generator(0.2, x, np.array([y - h]), z)) / (2 * h)
    an = spec.generator_dy(0.2, x, np.array([y]), z)
    assert an[0] == pytest.approx(fd[0], rel=1e-5, abs=1e-5 * (1 + abs(y)))


def test_hjb_generator_dz_matches_finite_difference():
    spec = hjb_lqg(d=3, lam=2.0)
    z = np.array([[0.4, -1.0, 2.0]])
    an = spec.generator_dz(0.0, z, np.zeros(1), z)
    h = 1e-6
    for i in range(3):
        e = np.zeros((1, 3))
        e[0, i] = h
        fd = (spec.generator(0.0, z, np.zeros(1), z + e) - spec.generator(0.0, z, np.zeros(1), z - e)) / (2 * h)
        assert an[0, i] == pytest.approx(fd[0], rel=1e-8)


def test_registry_unknown_id_lists_known():
    with pytest.raises(KeyError) as err:
        make_problem("nope")
    assert "hjb_lqg" in str(err.value)


def test_registry_accepts_overrides():
    spec = make_problem("hjb_lqg", d=3, **{"lambda": 5.0})
    assert spec.params["lam"] == 5.0
    spec = make_problem("bs_default_risk", d=3, delta=0.5)
    assert spec.params["delta"] == 0.5


def test_missing_generator_derivative_rejected():
    import dataclasses
    with pytest.raises(TypeError):
        dataclasses.replace(hjb_lqg(d=2), generator_dy=None)
