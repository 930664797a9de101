import copy
import json
import math

import numpy as np
import pytest

from deki.ensemble import CovarianceBundle, Ensemble, gaussian_init
from deki.models import LinearModel, QuadraticModel, RegularizedProblem, transport_model
from deki.schemes import StepSchedule, deki_iterate, deki_mean_step
from deki.theory import (
    LinearizationReport,
    audit_collapse,
    audit_linearization_error,
    audit_stability,
    covariance_sandwich,
    gauss_newton_reference,
    linearization_bounds,
    operator_norm,
    psd_order,
    rate_constants,
    residual_norms,
    stability_ratios,
)

# -- Loewner order ------------------------------------------------------------------


def test_psd_order_examples():
    a = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert psd_order(a, a)
    assert psd_order(np.eye(2), 2 * np.eye(2))
    assert not psd_order(2 * np.eye(2), np.eye(2))
    assert not psd_order(np.array([[1.0, 0.9], [0.9, 1.0]]), np.eye(2))


def test_psd_order_rejects_asymmetric():
    with pytest.raises(ValueError):
        psd_order(np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(2))


# -- sandwich ---------------------------------------------------------------------


def test_sandwich_degenerate():
    C = np.array([[2.0, 0.5], [0.5, 1.0]])
    lo, hi = covariance_sandwich(C, 0.3, 1.2, 1.2)
    np.testing.assert_allclose(lo, hi)


def test_sandwich_scalar():
    lo, hi = covariance_sandwich([[2.0]], 0.5, 1.0, 1.0)
    np.testing.assert_allclose(lo, [[0.5]])
    np.testing.assert_allclose(hi, [[0.5]])


def test_sandwich_zero():
    lo, hi = covariance_sandwich(np.zeros((3, 3)), 1.0, 0.5, 2.0)
    np.testing.assert_array_equal(lo, 0.0)
    np.testing.assert_array_equal(hi, 0.0)


def test_sandwich_rejects_gamma_above_M():
    with pytest.raises(ValueError):
        covariance_sandwich(np.eye(2), 1.0, 2.0, 1.0)


def test_sandwich_is_ordered():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 3))
    lo, hi = covariance_sandwich(a @ a.T, 0.7, 0.5, 1.5)
    assert psd_order(lo, hi)


def exact_update(C, B, h):
    """Covariance after one linear deviation step, ``(I + hCB)^{-1} C (I + hBC)^{-1}``."""
    I = np.eye(C.shape[0])
    return np.linalg.solve(I + h * C @ B, C) @ np.linalg.inv(I + h * B @ C)


def test_sandwich_holds_when_maps_commute():
    C, B = np.diag([1.0, 0.3]), np.diag([1.0, 4.0])
    nxt = exact_update(C, B, 1.0)
    lo, hi = covariance_sandwich(C, 1.0, 1.0, 2.0)
    assert psd_order(lo, nxt) and psd_order(nxt, hi)


def test_sandwich_can_fail_without_commuting():
    # (1 + h x)^{-2} is not operator monotone, so the squared bounds are not
    # implied by gamma^2 I <= B <= M^2 I alone; the audit must report this
    C, B = np.array([[1.0, 0.5], [0.5, 0.5]]), np.diag([1.0, 4.0])
    nxt = exact_update(C, B, 1.0)
    lo, hi = covariance_sandwich(C, 1.0, 1.0, 2.0)
    assert not psd_order(lo, nxt, tol=1e-8)
    assert not psd_order(nxt, hi, tol=1e-8)
    # the unsquared form is monotone and does hold
    I = np.eye(2)
    assert psd_order(np.linalg.inv(np.linalg.inv(C) + 4.0 * I), C - C @ np.linalg.solve(I + B @ C, B @ C))


# -- operator norm ----------------------------------------------------------------


@pytest.mark.parametrize("shape", [(5, 5), (8, 3), (2, 9)])
def test_operator_norm(shape):
    A = np.random.default_rng(sum(shape)).standard_normal(shape)
    assert operator_norm(A) == pytest.approx(np.linalg.norm(A, 2), rel=1e-8)


# -- collapse audit ------------------------------------------------------------------


def scalar_run(n_steps=20):
    # G = 0.6 and C0^{-1/2} = 0.8 give H_n^T H_n = 1 exactly: gamma = M = 1
    p = RegularizedProblem(LinearModel([[0.6]]), 0.8, [1.0])
    e = Ensemble(np.array([[-1.0, 1.0]]))
    return deki_iterate(e, p, StepSchedule(theta=1.0, mu=0.5, eps0=0.0), n_steps, trace=True)


def test_scalar_run_meets_envelope_with_equality():
    rep = audit_collapse(scalar_run())
    assert rep.passed, rep.flags
    assert (rep.gamma, rep.M) == pytest.approx((1.0, 1.0))
    np.testing.assert_allclose(rep.cov_norm, 2.0 * 4.0 ** -np.arange(21), rtol=1e-10)
    np.testing.assert_allclose(rep.cov_norm, rep.envelope, rtol=1e-10)
    np.testing.assert_allclose(rep.cov_norm, rep.nominal_envelope, rtol=1e-10)


def test_injected_inflation_is_flagged():
    run = scalar_run()
    bad = copy.deepcopy(run)
    bad.trace.deviations[3] = bad.trace.deviations[3] * math.sqrt(1.1)
    rep = audit_collapse(bad)
    assert 3 in rep.flagged("envelope")
    assert not rep.passed


def test_empty_run_has_no_flags():
    rep = audit_collapse(scalar_run(0))
    assert rep.passed and rep.cov_norm.size == 0


def test_audit_needs_trace():
    p = RegularizedProblem(LinearModel([[0.6]]), 0.8, [1.0])
    run = deki_iterate(Ensemble(np.array([[-1.0, 1.0]])), p, StepSchedule(1.0, 0.5), 3)
    with pytest.raises(ValueError):
        audit_collapse(run)


def transport_run(seed=0, n_steps=40):
    d_u = 60
    m = transport_model(d_u, d_u, 0.3)
    rng = np.random.default_rng(seed)
    p = RegularizedProblem(m, 0.1 / np.sqrt(d_u), m.peek(rng.standard_normal(d_u)) + 1e-2 * rng.standard_normal(d_u))
    e = gaussian_init(d_u, 10, 0.1, seed)
    return p, deki_iterate(e, p, StepSchedule.from_ratio(2.5), n_steps, seed=seed, trace=True)


def test_transport_run_passes_collapse_audit():
    _, run = transport_run()
    rep = audit_collapse(run)
    assert rep.passed, rep.flags[:5]
    assert np.all(rep.rank == rep.rank[0])
    assert np.all(rep.kappa <= rep.kappa_bar * (1 + 1e-8))
    d = json.loads(rep.to_json())
    assert d["passed"] is True and len(d["cov_norm"]) == 41


def test_linearization_bounds_match_regularizer():
    _, run = transport_run()
    gamma, M = linearization_bounds(run)
    # the regularizer alone contributes 0.1 / sqrt(60) to every direction
    assert gamma >= 0.1 / np.sqrt(60) * (1 - 1e-9)
    assert M >= gamma


# -- rate constants ---------------------------------------------------------------------


BASE = dict(c=1.0, L=1.0, M=1.0, gamma=0.5, theta=1.0, mu=1.0, lam=0.5, kappa_bar=1.0, min_p=1.0, c0_norm=1.0, J=5,
            hessian_bound=0.1)


def test_beta0_reference_value():
    assert rate_constants(**BASE).beta0 == pytest.approx(3 / 64)


@pytest.mark.parametrize("lam", [1e-9, 1 - 1e-9])
def test_beta0_vanishes_at_extreme_keep_rates(lam):
    assert rate_constants(**{**BASE, "lam": lam}).beta0 < 1e-8


def test_beta_second_candidate():
    rc = rate_constants(**{**BASE, "gamma": 1.0, "theta": 1.0})
    assert rc.delta == pytest.approx(0.5)
    assert rc.beta == pytest.approx(min(rc.beta0, 0.25))
    big = rate_constants(**{**BASE, "gamma": 1.0, "c": 100.0, "kappa_bar": 1.0})
    assert big.beta == pytest.approx(0.25)


@pytest.mark.parametrize("s", [0.5, 2.0, 10.0])
def test_beta0_homogeneity(s):
    kw = {**BASE, "mu": 0.5, "theta": 0.5}
    scaled = {**kw, "c": s * kw["c"], "M": math.sqrt(s) * kw["M"], "L": s * kw["L"], "mu": kw["mu"] / s,
              "theta": kw["theta"] / s, "gamma": math.sqrt(s) * kw["gamma"]}
    assert rate_constants(**scaled).beta0 == pytest.approx(rate_constants(**kw).beta0, rel=1e-12)


def test_derived_constants():
    rc = rate_constants(**BASE)
    assert rc.bigC == pytest.approx(4**1.5 * 0.1)
    assert rc.a1 == pytest.approx(2 * rc.bigC * (1 + 1))
    assert rc.a2 == pytest.approx(rc.bigC**2)
    assert rc.C1 == pytest.approx(rc.a1 + rc.a2)
    assert rc.delta_n(1.0) == pytest.approx(rc.C1)
    # n0 is the first n with delta^n C1 <= beta0
    assert rc.delta**rc.n0 * rc.C1 <= rc.beta0 * (1 + 1e-12)
    assert rc.n0 == 0 or rc.delta ** (rc.n0 - 1) * rc.C1 > rc.beta0
    assert 0 < rc.beta < 1 and 0 < rc.delta < 1
    assert rc.C2 == pytest.approx((1 - rc.beta) ** rc.n0 * rc.C1 / (1 - rc.beta - rc.delta))


def test_linear_map_needs_no_burn_in():
    rc = rate_constants(**{**BASE, "hessian_bound": 0.0})
    assert rc.C1 == 0.0 and rc.n0 == 0


@pytest.mark.parametrize(
    "override",
    [{"lam": 1.0}, {"lam": 0.0}, {"theta": 2.0}, {"mu": 2.0}, {"c": 0.0}, {"gamma": 2.0}, {"J": 1},
     {"hessian_bound": -1.0}],
)
def test_rate_constants_reject_bad_input(override):
    with pytest.raises(ValueError):
        rate_constants(**{**BASE, **override})


# -- Gauss-Newton reference -----------------------------------------------------------------


def test_gauss_newton_matches_mean_step_for_linear_map():
    rng = np.random.default_rng(1)
    G = rng.standard_normal((4, 3))
    a = rng.standard_normal((3, 3))
    c = a @ a.T
    b = CovarianceBundle(c, c @ G.T, G @ c @ G.T)
    m, z, hm = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(4)
    np.testing.assert_allclose(gauss_newton_reference(m, c, G, 0.7, z, hm), deki_mean_step(m, b, 0.7, z, hm),
                               atol=1e-12)


def test_gauss_newton_zero_residual():
    z = np.array([1.0, 2.0])
    np.testing.assert_array_equal(gauss_newton_reference([3.0], [[1.0]], [[1.0], [2.0]], 1.0, z, z), [3.0])


def test_gauss_newton_scalar_quadratic():
    # H(u) = u^2 at u = 1 has slope 2: 1 + 1 * 2 / (1 + 4) * (2 - 1)
    assert gauss_newton_reference([1.0], [[1.0]], [[2.0]], 1.0, [2.0], [1.0])[0] == pytest.approx(1.4)


# -- mean-step approximation audit ------------------------------------------------------


def test_linear_map_has_zero_approximation_error():
    p, run = transport_run(n_steps=10)
    rep = audit_linearization_error(run, p, 0.0)
    assert rep.passed
    assert np.abs(rep.lhs).max() <= 1e-10


def scalar_quadratic_run():
    # H(u) = u + 0.05 u^2 has Hessian 0.1
    p = RegularizedProblem(QuadraticModel([[1.0]], [[[0.1]]]), 1.0, [2.0])
    run = deki_iterate(gaussian_init(1, 3, 0.5, 0), p, StepSchedule.from_ratio(0.5), 10, trace=True)
    return p, run


def test_scalar_quadratic_bound_holds():
    p, run = scalar_quadratic_run()
    assert p.model.hessian_bound == pytest.approx(0.1)
    rep = audit_linearization_error(run, p, p.model.hessian_bound)
    assert rep.passed
    assert np.any(rep.lhs > 0)


def test_inflated_error_is_flagged():
    p, run = scalar_quadratic_run()
    rep = audit_linearization_error(run, p, p.model.hessian_bound)
    bad = LinearizationReport(rep.lhs * 1e3, rep.rhs)
    assert not bad.passed
    assert set(bad.flags) == set(np.flatnonzero(rep.lhs > 0).tolist())
    assert json.loads(bad.to_json())["passed"] is False


# -- stability ------------------------------------------------------------------------


def test_stability_constant_sequence():
    assert audit_stability(np.ones(10), 1.0, 0.5)


def test_stability_injected_growth():
    M, mu = 1.3, 0.5
    r = np.ones(5)
    r[3] = 2 * (1 + M * math.sqrt(mu / 2))
    assert not audit_stability(r, M, mu)


def test_stability_ratios_handle_zero():
    np.testing.assert_array_equal(stability_ratios([1.0, 0.0, 0.0, 1.0]), [0.0, 1.0, np.inf])


def test_transport_run_is_stable():
    p, run = transport_run(n_steps=30)
    M = operator_norm(np.vstack([p.model.matrix, p.reg_matrix()]))
    assert audit_stability(residual_norms(run), M, 2.5)
