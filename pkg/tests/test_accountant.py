import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.stats import binom, norm

from dpgbdt import accountant as acc
from dpgbdt.sgbdt import Hyperparameters

from oracles import (gaussian_cases, gaussian_variances, renyi_gauss_by_integration,
                     renyi_laplace_by_integration, subsampled_bound_mp, subsampled_cases)


# --- Gaussian ---------------------------------------------------------------

def test_single_dim_gaussian_reduces_to_known_form():
    assert acc.rdp_gauss_nonspherical(2, [1.0], [1.0], 1.0) == 1.0


def test_zero_sensitivity_gives_zero():
    assert acc.rdp_gauss_nonspherical(5, [0.0, 0.0], [0.4, 0.6], 0.3) == 0.0


def test_two_dim_example_matches_integration():
    got = acc.rdp_gauss_nonspherical(2, [1.0, 0.2], [0.5, 0.5], 1.0)
    oracle = renyi_gauss_by_integration(2, [1.0, 0.2], gaussian_variances([0.5, 0.5], 1.0))
    assert got == pytest.approx(1.04, rel=1e-12)
    assert got == pytest.approx(oracle, rel=1e-6)


@pytest.mark.parametrize("alpha,s,r,sigma2", gaussian_cases())
def test_gaussian_matches_integration(alpha, s, r, sigma2):
    got = acc.rdp_gauss_nonspherical(alpha, s, r, sigma2)
    oracle = renyi_gauss_by_integration(alpha, s, gaussian_variances(r, sigma2))
    assert got == pytest.approx(oracle, rel=1e-6)


def test_gaussian_rejects_bad_weights():
    with pytest.raises(ValueError):
        acc.rdp_gauss_nonspherical(2, [1.0, 1.0], [0.5, 0.6], 1.0)
    with pytest.raises(ValueError):
        acc.rdp_gauss_nonspherical(2, [1.0], [1.0], 0.0)


# --- Laplace / init score ---------------------------------------------------

def test_laplace_unit_ratio_closed_form():
    expected = math.log(2 / 3 * math.e + 1 / 3 * math.exp(-2))
    assert acc.rdp_laplace(2, 1.0) == pytest.approx(expected, rel=1e-14)
    assert acc.rdp_laplace(2, 1.0) == pytest.approx(renyi_laplace_by_integration(2, 1.0),
                                                    rel=1e-8)


@pytest.mark.parametrize("alpha,ratio", [(2, 0.3), (3, 1.0), (8, 0.5), (20, 0.05)])
def test_laplace_matches_integration(alpha, ratio):
    assert acc.rdp_laplace(alpha, ratio) == pytest.approx(
        renyi_laplace_by_integration(alpha, ratio), rel=1e-7)


def test_init_score_vanishing_budget():
    assert acc.rdp_laplace_init(10, 5.0, 1000, 1e-9) < 1e-8


@given(st.floats(0.01, 100.0), st.integers(2, 64))
def test_init_score_independent_of_label_clip(c, alpha):
    base = acc.rdp_laplace_init(alpha, 1.0, 500, 0.05)
    assert acc.rdp_laplace_init(alpha, c, 500, 0.05) == pytest.approx(base, rel=1e-12)


def test_init_scale_readings_differ_by_factor_two():
    a = acc.laplace_ratio(2.0, 100, 0.1, "algorithm")
    t = acc.laplace_ratio(2.0, 100, 0.1, "theorem")
    assert a == pytest.approx(0.1) and t == pytest.approx(0.2)


# --- subsampling ------------------------------------------------------------

def test_subsampled_zero_rate():
    for alpha in (2, 7, 40):
        assert acc.rdp_subsampled(alpha, lambda l: 0.3 * l, 0.0) == 0.0


def test_subsampled_full_rate_order_two():
    assert acc.rdp_subsampled(2, lambda l: 0.7 * l, 1.0) == pytest.approx(1.4, rel=1e-14)


def test_subsampled_example_by_direct_sum():
    curve = lambda l: 0.05 * l  # noqa: E731
    got = acc.rdp_subsampled(4, curve, 0.1)
    assert got == pytest.approx(subsampled_bound_mp(4, curve, 0.1), rel=1e-10)
    assert got == pytest.approx(0.005467059897284354, rel=1e-12)


@pytest.mark.parametrize("alpha,c,gamma", subsampled_cases())
def test_subsampled_matches_arbitrary_precision(alpha, c, gamma):
    curve = lambda l: c * l  # noqa: E731
    assert acc.rdp_subsampled(alpha, curve, gamma) == pytest.approx(
        subsampled_bound_mp(alpha, curve, gamma), rel=1e-10)


def test_subsampled_accepts_mapping_and_rejects_gaps():
    curve = {l: 0.1 * l for l in range(2, 6)}
    assert acc.rdp_subsampled(5, curve, 0.2) == pytest.approx(
        acc.rdp_subsampled(5, lambda l: 0.1 * l, 0.2), rel=1e-15)
    with pytest.raises(ValueError):
        acc.rdp_subsampled(6, curve, 0.2)


def test_vectorised_subsampling_agrees():
    factors = np.array([0.001, 0.05, 0.7, 3.0])
    vec = acc.subsampled_gaussian(12, factors, 0.15)
    for f, v in zip(factors, vec):
        assert v == pytest.approx(acc.rdp_subsampled(12, lambda l: l * f, 0.15), rel=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 5.0), st.floats(0.01, 0.3), st.integers(10, 500), st.floats(0.05, 2.0),
       st.floats(0.1, 0.9))
def test_subsampling_never_exceeds_unsampled_for_planned_worst_case(g_star, gamma, rounds, eps,
                                                                     r1):
    # flat curves can exceed it through the floor below; planning uses the worst case
    h = Hyperparameters(g_star=g_star, gamma=gamma, T_regular=rounds, eps_trees=eps, r1=r1)
    try:
        plan = acc.initialize(h)
    except acc.InfeasibleBudget:
        assume(False)
    c = float(acc.leaf_factor(g_star, h.r1, h.r2, plan.sigma2_leaf))
    assert plan.rho_tree <= c * plan.alpha_hat


@pytest.mark.parametrize("alpha,gamma", [(3, 0.5), (20, 0.1), (80, 0.1)])
def test_flat_curve_floor(alpha, gamma):
    # the constant-3 terms leave a floor of log(1 + 2 P[Bin >= 3]) / (alpha - 1)
    floor = math.log1p(2 * binom.sf(2, alpha, gamma)) / (alpha - 1)
    assert acc.rdp_subsampled(alpha, lambda l: 1e-12 * l, gamma) == pytest.approx(floor,
                                                                                 rel=1e-6)


@given(st.integers(2, 500), st.floats(0.0, 3.0), st.floats(0.01, 0.99), st.floats(1e-3, 1e3))
def test_gaussian_bound_monotone_in_order(alpha, s, r1, sigma2):
    a = acc.rdp_gauss_nonspherical(alpha, [1.0, s], [r1, 1 - r1], sigma2)
    b = acc.rdp_gauss_nonspherical(alpha + 1, [1.0, s], [r1, 1 - r1], sigma2)
    assert b >= a


# --- composition and conversion ---------------------------------------------

def test_compose_examples():
    assert acc.rdp_compose([0, 0, 0]) == 0
    assert acc.rdp_compose([0.1, 0.2, 0.3]) == pytest.approx(0.6, rel=1e-15)
    rho0 = 0.0137
    assert acc.rdp_compose([rho0] * 250) == pytest.approx(250 * rho0, rel=1e-12)
    with pytest.raises(ValueError):
        acc.rdp_compose([0.1, -0.1])


def test_conversion_examples():
    assert acc.rdp_to_adp(2, 0.0, math.exp(-2)) == pytest.approx(1.0, rel=1e-15)
    assert acc.rdp_to_adp(10, 1.0, 1e-5) == pytest.approx((1 + 11.512925464970229) / 10)
    assert acc.rdp_to_adp(10, 1.0, 1e-5) == pytest.approx(1.2513, abs=1e-4)
    assert acc.rdp_to_adp(3, 0.0, 1 - 1e-12) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        acc.rdp_to_adp(1, 0.5, 1e-5)


@settings(max_examples=200)
@given(st.integers(2, 500), st.floats(0.0, 50.0), st.floats(1e-12, 0.5))
def test_conversion_round_trip(alpha, rho, delta):
    eps = acc.rdp_to_adp(alpha, rho, delta)
    assert math.exp(rho - alpha * eps) == pytest.approx(delta, rel=1e-12)


def test_standard_conversion_is_looser():
    assert acc.rdp_to_adp(20, 0.5, 1e-5, "standard") > acc.rdp_to_adp(20, 0.5, 1e-5)


# --- initialize -------------------------------------------------------------

def test_tiny_rate_picks_smallest_variance():
    # the conversion keeps -log(delta)/alpha, so the budget must exceed that term
    h = Hyperparameters(gamma=1e-300, g_star=0.01, eps_trees=6.0, T_regular=10)
    plan = acc.initialize(h)
    assert plan.sigma2_leaf == acc.SIGMA2_GRID[0]
    assert plan.rho_budget < 1e-200


def test_epsilon_nonincreasing_in_variance():
    for alpha in (2, 17, 120):
        f = acc.leaf_factor(1.0, 0.3, 0.7, acc.SIGMA2_GRID)
        rho = 100 * acc.subsampled_gaussian(alpha, f, 0.1)
        eps = (rho - math.log(1e-5)) / alpha
        assert np.all(np.diff(eps) <= 1e-15)


def test_abalone_scale_plan_fits_budget():
    h = Hyperparameters(g_star=3, gamma=0.2, T_regular=400, eps_trees=0.54)
    plan = acc.initialize(h)
    assert plan.epsilon_reported <= 0.54
    assert plan.within_tolerance
    assert 2 <= plan.alpha_hat <= h.alpha_max
    assert plan.rho_budget == acc.rdp_compose([plan.rho_tree] * 400)


def test_plan_uses_all_rounds_without_filter():
    on = acc.initialize(Hyperparameters(T_regular=50, T_extra=50, use_filter=True))
    off = acc.initialize(Hyperparameters(T_regular=50, T_extra=50, use_filter=False))
    assert off.sigma2_leaf > on.sigma2_leaf


def test_infeasible_budget_reports_closest():
    with pytest.raises(acc.InfeasibleBudget, match="closest achievable"):
        acc.initialize(Hyperparameters(gamma=1.0, T_regular=1000, eps_trees=0.01,
                                       alpha_max=20))


def test_worst_case_loss_matches_planned_tree_loss():
    h = Hyperparameters(g_star=2.0, gamma=0.2, T_regular=100)
    plan = acc.initialize(h)
    c = acc.leaf_factor(2.0, h.r1, h.r2, plan.sigma2_leaf)
    assert acc.rdp_subsampled(plan.alpha_hat, lambda l: l * c, h.gamma) == pytest.approx(
        plan.rho_tree, rel=1e-12)


def _gaussian_exact_delta(eps, mu):
    # exact privacy profile of a Gaussian mechanism with sensitivity / noise sd = mu
    return norm.cdf(-eps / mu + mu / 2) - math.exp(eps) * norm.cdf(-eps / mu - mu / 2)


def test_standard_conversion_is_sound_and_default_is_not():
    # unit sensitivity, unit noise: the order-a divergence is a / 2
    std = min(acc.rdp_to_adp(a, a / 2, 1e-5, "standard") for a in range(2, 501))
    default = min(acc.rdp_to_adp(a, a / 2, 1e-5) for a in range(2, 501))
    assert _gaussian_exact_delta(std, 1.0) <= 1e-5
    assert default == pytest.approx(0.5 + math.log(1e5) / 500)
    assert _gaussian_exact_delta(default, 1.0) > 0.2
