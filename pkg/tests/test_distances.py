"""Test functions, mollification, class membership, and Wasserstein
estimators against closed forms and independent quadrature oracles."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlclt import QuadratureError, UsageError
from mlclt.distances import TestFunction as FnSpec
from mlclt.distances import (DiscreteLaw, SampleSet,
                             class_membership_check, gaussian_mean, mollify,
                             restricted_distance, ridge_function, sliced_w1,
                             soft_clip_family, w1_discrete_pair,
                             w1_discrete_vs_gaussian, w1_empirical_gaussian)
from mlclt.gaussians import GaussianLaw, SpdMatrix

STD_1D = GaussianLaw(SpdMatrix(np.eye(1)))
ROOT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def scalar_fn(f, budget, label):
    return FnSpec(evaluator=lambda x: f(np.asarray(x)[:, 0]),
                        lipschitz_budget=budget, label=label, dim=1)


# ---------------------------------------------------------------------------
# domain types


def test_discrete_law_validation():
    with pytest.raises(UsageError):
        DiscreteLaw(values=np.array([1.0]), probs=np.array([0.9]))
    with pytest.raises(UsageError):
        DiscreteLaw(values=np.array([1.0, 2.0]), probs=np.array([1.5, -0.5]))
    with pytest.raises(UsageError):
        DiscreteLaw(values=np.array([np.inf]), probs=np.array([1.0]))


def test_sample_set_validation_and_views():
    s = SampleSet(values=np.arange(6.0), master_seed=1)
    assert s.dim == 1 and s.n == 6
    assert np.array_equal(s.scalar(), np.arange(6.0))
    with pytest.raises(UsageError):
        SampleSet(values=np.array([[np.nan]]), master_seed=0)


def test_ridge_direction_normalized():
    phi = ridge_function([3.0, 4.0], lambda t: t, 1.0, "lin")
    assert np.allclose(phi.ridge.direction, [0.6, 0.8])
    x = np.array([[1.0, 1.0]])
    assert math.isclose(float(phi(x)[0]), 1.4)


# ---------------------------------------------------------------------------
# mollification


def test_mollify_linear_is_exact_contraction():
    phi = ridge_function([1.0], lambda t: t, 1.0, "x")
    for eps in (0.25, 0.5, 0.8):
        sm = mollify(phi, eps, STD_1D)
        x = np.linspace(-3, 3, 7)[:, None]
        assert np.max(np.abs(sm(x) - math.sqrt(1 - eps * eps) * x[:, 0])) < 1e-8


def test_mollify_quadratic_closed_form():
    # smoothing x^2 at scale 1/2: (3/4) x^2 + 1/4
    phi = scalar_fn(lambda t: t ** 2, 10.0, "x^2")
    sm = mollify(phi, 0.5, STD_1D)
    x = np.linspace(-2, 2, 9)[:, None]
    assert np.max(np.abs(sm(x) - (0.75 * x[:, 0] ** 2 + 0.25))) < 1e-8


def test_mollify_abs_matches_adaptive_oracle():
    from scipy.integrate import quad
    phi = ridge_function([1.0], np.abs, 1.0, "|x|")
    eps = 0.5
    sm = mollify(phi, eps, STD_1D)
    a = math.sqrt(1 - eps * eps)
    for x in (0.0, 0.3, -1.2):
        oracle = quad(lambda z: abs(a * x - eps * z)
                      * math.exp(-z * z / 2.0) / math.sqrt(2 * math.pi),
                      -10.0, 10.0, epsabs=1e-12, epsrel=1e-12)[0]
        assert abs(float(sm(np.array([[x]]))[0]) - oracle) < 1e-8


def test_mollify_fixes_constants_and_is_linear():
    const = scalar_fn(lambda t: np.full_like(t, 2.5), 0.1, "c")
    sm = mollify(const, 0.3, STD_1D)
    x = np.array([[0.0], [1.7]])
    assert np.allclose(sm(x), 2.5, atol=1e-12)
    f = scalar_fn(lambda t: t ** 2, 10.0, "a")
    g = scalar_fn(lambda t: np.sin(t), 1.0, "b")
    combo = scalar_fn(lambda t: 2.0 * t ** 2 - 3.0 * np.sin(t), 10.0, "2a-3b")
    eps = 0.4
    lhs = mollify(combo, eps, STD_1D)(x)
    rhs = 2.0 * mollify(f, eps, STD_1D)(x) - 3.0 * mollify(g, eps, STD_1D)(x)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_mollify_rejects_bad_eps_and_dim():
    phi = ridge_function([1.0], lambda t: t, 1.0, "x")
    for eps in (0.0, 1.0, -0.5):
        with pytest.raises(UsageError):
            mollify(phi, eps, STD_1D)
    with pytest.raises(UsageError):
        mollify(phi, 0.5, GaussianLaw(SpdMatrix(np.eye(2))))


def test_mollify_generic_2d_matches_ridge_reduction():
    law = GaussianLaw(SpdMatrix(np.array([[2.0, 0.5], [0.5, 1.0]])))
    u = np.array([1.0, 1.0]) / math.sqrt(2.0)
    h = lambda t: np.tanh(t)
    ridge = ridge_function(u, h, 1.0, "ridge")
    generic = FnSpec(evaluator=lambda x: h(np.asarray(x) @ u),
                           lipschitz_budget=1.0, label="generic", dim=2)
    pts = np.array([[0.0, 0.0], [1.0, -0.5], [-2.0, 1.0]])
    a = mollify(ridge, 0.4, law)(pts)
    b = mollify(generic, 0.4, law)(pts)
    assert np.max(np.abs(a - b)) < 1e-6


def test_mollify_generic_nonsmooth_2d_reports_nonconvergence():
    # a genuinely 2d kinked function cannot fall back to 1d quadrature
    bad = FnSpec(evaluator=lambda x: np.abs(x[:, 0]) * np.abs(x[:, 1]),
                       lipschitz_budget=10.0, label="kink2d", dim=2)
    law = GaussianLaw(SpdMatrix(np.eye(2)))
    with pytest.raises(QuadratureError):
        mollify(bad, 0.5, law)


# ---------------------------------------------------------------------------
# class membership


def test_membership_unit_slope_fails_with_ratio_two():
    phi = ridge_function([1.0], lambda t: t, 1.0, "x")
    report = class_membership_check(phi, STD_1D, lbar=1.0,
                                    r_grid=[0.5, 1.0], x0_grid=[0.0])
    assert not report.passed
    assert abs(report.worst_osc_ratio - 2.0) < 0.05


def test_membership_half_slope_passes():
    phi = ridge_function([1.0], lambda t: 0.5 * t, 0.5, "x/2")
    report = class_membership_check(phi, STD_1D, lbar=0.5,
                                    r_grid=[0.25, 1.0, 2.0], x0_grid=[0.0, 1.0])
    assert report.passed
    assert report.worst_osc_ratio <= 1.0 + 1e-9


def test_membership_constant_passes_with_zero_oscillation():
    phi = scalar_fn(lambda t: np.ones_like(t), 0.5, "1")
    report = class_membership_check(phi, STD_1D, lbar=0.5,
                                    r_grid=[1.0], x0_grid=[0.0])
    assert report.passed and report.worst_osc_ratio == 0.0


def test_soft_clip_family_members_pass_membership():
    for dim in (1, 2):
        law = GaussianLaw(SpdMatrix(np.eye(dim)))
        for phi in soft_clip_family(dim):
            report = class_membership_check(
                phi, law, lbar=phi.lipschitz_budget,
                r_grid=[0.5, 2.0], x0_grid=[np.zeros(dim)])
            assert report.passed, phi.label


# ---------------------------------------------------------------------------
# W1 estimators


def test_point_mass_distance_is_mean_absolute_deviation():
    pm = DiscreteLaw(values=np.array([0.0]), probs=np.array([1.0]))
    assert abs(w1_discrete_vs_gaussian(pm, 1.0) - ROOT_2_OVER_PI) < 1e-12


def test_coin_distance_matches_quadrature_oracle():
    from scipy.integrate import quad
    from scipy.special import ndtri
    coin = DiscreteLaw(values=np.array([-1.0, 1.0]), probs=np.array([0.5, 0.5]))
    got = w1_discrete_vs_gaussian(coin, 1.0)
    oracle = (quad(lambda u: abs(-1.0 - ndtri(u)), 1e-12, 0.5, limit=200)[0]
              + quad(lambda u: abs(1.0 - ndtri(u)), 0.5, 1 - 1e-12, limit=200)[0])
    assert abs(got - oracle) < 1e-7


def test_coin_distance_sign_flip_invariance():
    coin = DiscreteLaw(values=np.array([-1.0, 1.0]), probs=np.array([0.5, 0.5]))
    flipped = DiscreteLaw(values=np.array([1.0, -1.0]), probs=np.array([0.5, 0.5]))
    assert math.isclose(w1_discrete_vs_gaussian(coin, 1.0),
                        w1_discrete_vs_gaussian(flipped, 1.0), rel_tol=1e-14)


def test_empirical_point_mass_reduces_to_closed_form():
    got = w1_empirical_gaussian(np.zeros(17), 1.0)
    assert abs(got - ROOT_2_OVER_PI) < 1e-6


def test_empirical_matches_discrete_on_atom_law():
    rng = np.random.default_rng(8)
    vals = rng.choice([-1.0, 1.0], size=100000)
    atoms, counts = np.unique(vals, return_counts=True)
    emp = DiscreteLaw(values=atoms, probs=counts / len(vals))
    assert abs(w1_empirical_gaussian(vals, 1.0)
               - w1_discrete_vs_gaussian(emp, 1.0)) < 1e-9


def test_empirical_self_distance_decays():
    rng = np.random.default_rng(21)
    x = rng.standard_normal(10 ** 6)
    assert w1_empirical_gaussian(x, 1.0) <= 0.005


def test_discrete_pair_distance():
    a = DiscreteLaw(values=np.array([0.0, 1.0]), probs=np.array([0.5, 0.5]))
    b = DiscreteLaw(values=np.array([0.0, 1.0]), probs=np.array([0.25, 0.75]))
    # quantile functions differ on u in [0.25, 0.5): gap 1 over width 1/4
    assert math.isclose(w1_discrete_pair(a, b), 0.25, rel_tol=1e-12)
    assert w1_discrete_pair(a, a) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5.0, 5.0), min_size=2, max_size=30),
       st.floats(0.1, 4.0))
def test_empirical_w1_permutation_and_scale_properties(xs, c):
    x = np.asarray(xs)
    base = w1_empirical_gaussian(x, 1.0)
    rng = np.random.default_rng(0)
    assert math.isclose(w1_empirical_gaussian(rng.permutation(x), 1.0), base,
                        rel_tol=1e-12, abs_tol=1e-12)
    scaled = w1_empirical_gaussian(c * x, c * c)
    assert math.isclose(scaled, c * base, rel_tol=1e-9, abs_tol=1e-12)


def test_sliced_equals_plain_in_one_dimension():
    rng = np.random.default_rng(4)
    s = SampleSet(values=rng.standard_normal(5000), master_seed=4)
    plain = w1_empirical_gaussian(s.scalar(), 1.0)
    assert math.isclose(sliced_w1(s, STD_1D, n_directions=8, seed=1), plain,
                        rel_tol=1e-12)


def test_sliced_self_distance_small_in_2d():
    rng = np.random.default_rng(12)
    lam = np.array([[2.0, 0.5], [0.5, 1.0]])
    law = GaussianLaw(SpdMatrix(lam))
    chol = np.linalg.cholesky(lam)
    s = SampleSet(values=rng.standard_normal((200000, 2)) @ chol.T,
                  master_seed=12)
    assert sliced_w1(s, law, n_directions=32, seed=7) <= 0.01


# ---------------------------------------------------------------------------
# restricted distance


def test_restricted_distance_constant_family_is_zero():
    const = scalar_fn(lambda t: np.full_like(t, 3.0), 0.1, "c")
    s = SampleSet(values=np.arange(10.0), master_seed=0)
    assert abs(restricted_distance(s, STD_1D, [const])) < 1e-12


def test_restricted_distance_detects_mean_shift():
    rng = np.random.default_rng(9)
    mu = 0.5
    s = SampleSet(values=rng.standard_normal(10 ** 6) + mu, master_seed=9)
    fam = [ridge_function([1.0], lambda t: 0.5 * t, 0.5, "x/2"),
           ridge_function([1.0], lambda t: -0.5 * t, 0.5, "-x/2")]
    got = restricted_distance(s, STD_1D, fam)
    assert abs(got - mu / 2.0) < 0.01


def test_restricted_distance_monotone_in_family():
    rng = np.random.default_rng(10)
    s = SampleSet(values=rng.standard_normal(2000), master_seed=10)
    fam = soft_clip_family(1)
    small = restricted_distance(s, STD_1D, fam[:1])
    big = restricted_distance(s, STD_1D, fam)
    assert big >= small - 1e-12


def test_restricted_distance_below_w1_for_lipschitz_scaled_family():
    # one-sided sup over (1/2)-Lipschitz ramps is at most half the W1 gap
    rng = np.random.default_rng(14)
    vals = rng.choice([-1.0, 1.0], size=20000)
    s = SampleSet(values=vals, master_seed=14)
    fam = soft_clip_family(1)
    d = restricted_distance(s, STD_1D, fam)
    w1 = w1_empirical_gaussian(vals, 1.0)
    assert d <= 0.5 * w1 + 1e-9


def test_gaussian_mean_of_centered_odd_profile_is_zero():
    phi = ridge_function([1.0], np.tanh, 1.0, "tanh")
    assert abs(gaussian_mean(phi, STD_1D)) < 1e-10
