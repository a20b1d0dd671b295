import numpy as np
import pytest
from scipy import integrate

from endosfa.data import Dataset
from endosfa.density import loglik
from endosfa.errors import DataError, EmptyDataError, EstimationError, SingularDesignError
from endosfa.estimation import (FitOptions, conditional_mean_u0, first_stage_ols, fit_exogenous,
                                fit_mle, fit_no_inefficiency, n_free_params, starting_values)
from endosfa.density import folded_normal_cond_pdf
from endosfa.simulation import McConfig, preset, simulate_dataset


def _small(rng, n=40):
    return Dataset(y=rng.normal(size=n), x=rng.normal(size=(n, 2)), z=rng.normal(size=(n, 1)),
                   w=rng.normal(size=(n, 1)), x_endog=[False, True], z_endog=[False])


def test_dataset_validation(rng):
    ds = _small(rng)
    assert ds.m == 1 and ds.eta_names == ["x2"]
    assert ds.first_stage_names() == ["const", "x1", "z1", "w1"]
    with pytest.raises(EmptyDataError):
        Dataset(y=[], x=np.zeros((0, 1)), z=np.zeros((0, 1)), w=np.zeros((0, 0)))
    with pytest.raises(DataError):
        Dataset(y=[1.0, np.nan], x=np.ones((2, 1)), z=np.zeros((2, 1)), w=np.zeros((2, 0)))
    with pytest.raises(DataError):
        Dataset(y=rng.normal(size=5), x=rng.normal(size=(5, 2)), z=rng.normal(size=(5, 1)),
                w=np.zeros((5, 0)), x_endog=[True, False])
    x = rng.normal(size=(6, 1))
    with pytest.raises(DataError):
        Dataset(y=rng.normal(size=6), x=x, z=x.copy(), w=np.zeros((6, 0)))


def test_duplicate_columns_dropped_from_first_stage(rng):
    n = 30
    x1 = rng.normal(size=n)
    ds = Dataset(y=rng.normal(size=n), x=np.column_stack([x1, rng.normal(size=n)]),
                 z=np.column_stack([x1, rng.normal(size=n)]), w=rng.normal(size=(n, 1)),
                 x_endog=[False, True], z_endog=[False, False])
    assert ds.first_stage_design().shape[1] == 4


def test_first_stage_matches_lstsq(rng):
    ds = _small(rng)
    fs = first_stage_ols(ds)
    ref, *_ = np.linalg.lstsq(ds.first_stage_design(), ds.endog_matrix(), rcond=None)
    np.testing.assert_allclose(fs.gamma, ref, atol=1e-12)
    np.testing.assert_allclose(fs.d_eta, np.sqrt(np.mean(fs.residuals ** 2, axis=0)))


def test_singular_first_stage(rng):
    n = 30
    w = rng.normal(size=(n, 1))
    ds = Dataset(y=rng.normal(size=n), x=np.column_stack([rng.normal(size=n), rng.normal(size=n)]),
                 z=np.column_stack([w[:, 0]]), w=w * 2.0, x_endog=[False, True], z_endog=[False])
    with pytest.raises(SingularDesignError):
        first_stage_ols(ds)


def test_conditional_mean_matches_quadrature(rng):
    p = preset("s2")
    for eta in rng.normal(size=(5, 2)):
        ref, _ = integrate.quad(lambda u: u * folded_normal_cond_pdf(u, eta, p), 0, np.inf)
        assert conditional_mean_u0(eta, p) == pytest.approx(ref, rel=1e-8)


def test_starting_values_feasible(s2_data):
    p = starting_values(s2_data, first_stage_ols(s2_data))
    assert p.is_feasible()


def test_fit_recovers_truth(s2_data, s2_fit):
    assert s2_fit.converged
    p = s2_fit.theta_hat
    truth = preset("s2")
    np.testing.assert_allclose(p.beta[1:], truth.beta[1:], atol=0.25)
    assert abs(p.sigma2_u - truth.sigma2_u) < 1.5
    assert 0 <= p.rho_u[0] <= 1
    assert s2_fit.loglik == pytest.approx(loglik(s2_data, p), rel=1e-12)
    assert s2_fit.loglik >= loglik(s2_data, starting_values(s2_data, first_stage_ols(s2_data)))


def test_warm_start_returns_same_optimum(s2_data, s2_fit):
    again = fit_mle(s2_data, start=s2_fit.theta_hat)
    assert again.loglik == pytest.approx(s2_fit.loglik, abs=1e-8)


def test_fit_is_deterministic(s2_data, s2_fit):
    again = fit_mle(s2_data)
    assert np.array_equal(again.theta_hat.to_vector(), s2_fit.theta_hat.to_vector())


def test_restricted_and_exogenous_fits(s2_data, s2_fit):
    r = fit_mle(s2_data, fixed_rho_u=np.zeros(2))
    assert np.all(r.theta_hat.rho_u == 0)
    assert r.loglik <= s2_fit.loglik + 1e-6
    ex = fit_exogenous(s2_data)
    assert ex.theta_hat.m == 0 and ex.converged
    g = fit_no_inefficiency(s2_data)
    assert g.loglik < s2_fit.loglik


def test_joint_fit_close_to_two_stage(s2_data, s2_fit):
    joint = fit_mle(s2_data, FitOptions(two_stage=False, multistart_count=1),
                    start=s2_fit.theta_hat)
    assert joint.loglik >= s2_fit.loglik - 1e-6
    np.testing.assert_allclose(joint.theta_hat.beta, s2_fit.theta_hat.beta, atol=0.1)


def test_too_few_observations(rng):
    ds = _small(rng, n=40)
    with pytest.raises(DataError):
        fit_mle(ds.subset(np.arange(n_free_params(ds))))


def test_infeasible_fixed_rho(s2_data):
    with pytest.raises(EstimationError):
        fit_mle(s2_data, fixed_rho_u=np.array([1.0, 1.0]))


def test_exogenous_truth_gives_positive_skew_fit():
    ds, _ = simulate_dataset(McConfig(setting="s1", n=400, replications=1, seed=9), 0)
    fit = fit_exogenous(ds)
    assert fit.theta_hat.sigma2_u > 0.5
