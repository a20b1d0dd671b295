import numpy as np
import pytest

from endosfa.data import Dataset
from endosfa.params import ParamVector, corr_from_lower, lower_from_corr
from endosfa.simulation import McConfig, simulate_dataset


def random_corr(rng, m):
    a = rng.standard_normal((m, m + 2))
    c = a @ a.T
    d = np.sqrt(np.diag(c))
    return c / np.outer(d, d)


def random_rho(rng, m, c_eta, max_q=0.8):
    """Random rho with rho' C^-1 rho below max_q."""
    r = rng.standard_normal(m)
    q = r @ np.linalg.solve(c_eta, r)
    return r * np.sqrt(rng.uniform(0.0, max_q) / q)


def random_params(rng, m=2, kx=2, kz=2, n_design=5, norm=True) -> ParamVector:
    c = random_corr(rng, m) if m > 1 else np.eye(m)
    rho_u = random_rho(rng, m, c) if m else np.zeros(0)
    if norm and m:
        rho_u = rho_u if rho_u[0] >= 0 else -rho_u
    return ParamVector(beta=rng.normal(size=kx + 1), delta=rng.normal(scale=0.3, size=kz),
                       sigma2_v=rng.uniform(0.3, 2.0), sigma2_u=rng.uniform(0.3, 3.0),
                       rho_v=random_rho(rng, m, c) if m else np.zeros(0), rho_u=rho_u,
                       gamma=rng.normal(size=(n_design, m)), d_eta=rng.uniform(0.5, 1.5, m),
                       c_eta_lower=lower_from_corr(c))


def random_dataset(rng, p: ParamVector, n=50) -> Dataset:
    """Data on the two-regressor layout (x1 exog, x2 endog, z1 exog, z2 endog)."""
    x = rng.standard_normal((n, 2))
    z = rng.standard_normal((n, 2))
    w = rng.standard_normal((n, 2))
    y = rng.standard_normal(n) * 2
    return Dataset(y=y, x=x, z=z, w=w, x_endog=[False, True], z_endog=[False, True])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def s2_data():
    ds, u = simulate_dataset(McConfig(setting="s2", n=800, replications=1, seed=5), 0)
    return ds


@pytest.fixture(scope="session")
def s2_fit(s2_data):
    from endosfa.estimation import fit_mle
    return fit_mle(s2_data)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
