import numpy as np
import pytest
from scipy import stats

import oracles
from endosfa.errors import ContractError, DegenerateCurvatureError, InfeasibleParameterError
from endosfa.estimation import fit_mle
from endosfa.inference import (SubsampleOptions, default_block_size, free_mask,
                               lr_test_interior, lr_test_rho_u_zero, lr_test_sigma_u_zero,
                               mixture_critical_value, numeric_hessian, qp_objective,
                               qp_project_nonneg, se_from_hessian, subsample_ci, wald_ci,
                               wald_se)


def test_numeric_hessian_of_quadratic(rng):
    a = rng.normal(size=(3, 3))
    A = a @ a.T
    H = numeric_hessian(lambda x: 0.5 * x @ A @ x, rng.normal(size=3))
    np.testing.assert_allclose(H, A, rtol=1e-5, atol=1e-6)


def test_se_from_hessian_rejects_indefinite():
    with pytest.raises(DegenerateCurvatureError):
        se_from_hessian(np.diag([-1.0, 1.0]))
    np.testing.assert_allclose(se_from_hessian(-np.diag([4.0, 1.0])), [0.5, 1.0])


def test_wald(s2_data, s2_fit):
    se = wald_se(s2_data, s2_fit)
    mask = free_mask(s2_fit)
    assert np.all(np.isfinite(se[mask]) & (se[mask] > 0))
    assert np.all(np.isnan(se[~mask]) | (se[~mask] >= 0))
    ci = wald_ci(s2_fit, se)
    v = s2_fit.theta_hat.to_vector()
    assert np.all((ci[mask, 0] < v[mask]) & (v[mask] < ci[mask, 1]))


def test_wald_degenerate_at_origin(s2_data):
    fit = fit_mle(s2_data, fixed_rho_u=np.zeros(2))
    fit.fixed_rho_u = False
    with pytest.raises(DegenerateCurvatureError):
        wald_se(s2_data, fit)


def test_default_block_size():
    assert default_block_size(500) == 58
    assert default_block_size(1000) == int(np.floor(1000 ** 0.95 / np.log(1000)))
    with pytest.raises(ValueError):
        SubsampleOptions(block_size=1).resolve(100)
    with pytest.raises(ValueError):
        SubsampleOptions(block_size=101).resolve(100)


def test_subsample_ci_is_reproducible(s2_data, s2_fit):
    opts = SubsampleOptions(block_size=300, n_subsamples=12, rng_seed=3)
    a = subsample_ci(s2_data, s2_fit, opts)
    b = subsample_ci(s2_data, s2_fit, opts)
    assert np.array_equal(a.intervals, b.intervals, equal_nan=True)
    v = s2_fit.theta_hat.to_vector()
    ok = np.isfinite(a.intervals[:, 0])
    assert np.all(a.intervals[ok, 0] <= v[ok] + 1e-12)
    assert np.all(v[ok] <= a.intervals[ok, 1] + 1e-12)


def test_full_block_gives_degenerate_interval(s2_data, s2_fit):
    res = subsample_ci(s2_data, s2_fit, SubsampleOptions(block_size=s2_data.n, n_subsamples=2))
    v = s2_fit.theta_hat.to_vector()
    ok = np.isfinite(res.intervals[:, 0])
    np.testing.assert_allclose(res.intervals[ok, 0], v[ok], atol=1e-6)


def test_qp_scalar_is_positive_part():
    for z in (-2.0, -0.0, 0.0, 1e-300, 3.5):
        assert qp_project_nonneg([z], [[2.0]])[0] == max(z, 0.0)


def test_qp_matches_enumeration(rng):
    for k in (2, 3):
        for _ in range(100):
            z = rng.normal(size=k)
            a = rng.normal(size=(k, k))
            W = a @ a.T + 1e-3 * np.eye(k)
            tau = qp_project_nonneg(z, W)
            ref, val = oracles.qp_enumerate(z, W)
            assert np.all(tau >= 0)
            assert qp_objective(tau, z, W) == pytest.approx(val, rel=1e-9, abs=1e-12)
            np.testing.assert_allclose(tau, ref, atol=1e-8)


def test_qp_contract():
    with pytest.raises(ContractError):
        qp_project_nonneg([1.0, 2.0], [[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ContractError):
        qp_project_nonneg([1.0, 2.0], [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ContractError):
        qp_project_nonneg([1.0, 2.0], np.eye(3))


def test_mixture_critical_value():
    assert mixture_critical_value(0.05) == pytest.approx(2.7055, abs=1e-4)
    c = mixture_critical_value(0.01)
    assert 0.5 * stats.chi2.sf(c, 1) == pytest.approx(0.01)


def test_lr_tests_on_endogenous_data(s2_data, s2_fit):
    r = lr_test_rho_u_zero(s2_data, s2_fit, n_draws=300, seed=1)
    assert r.statistic > r.critical_values[0.01]
    assert r.reject(0.05)
    again = lr_test_rho_u_zero(s2_data, s2_fit, n_draws=300, seed=1)
    assert again.critical_values == r.critical_values

    i = lr_test_interior(s2_data, s2_fit, [0.5, 0.5])
    assert i.statistic >= 0 and 0 <= i.p_value <= 1
    assert i.critical_values[0.05] == pytest.approx(stats.chi2.ppf(0.95, 2))
    with pytest.raises(InfeasibleParameterError):
        lr_test_interior(s2_data, s2_fit, [1.2, 0.5])
    with pytest.raises(InfeasibleParameterError):
        lr_test_interior(s2_data, s2_fit, [0.5])

    s = lr_test_sigma_u_zero(s2_data, s2_fit)
    assert s.reject(0.01)
    assert set(s.to_dict()) >= {"statistic", "critical_values", "p_value", "reject"}
