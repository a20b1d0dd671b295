import numpy as np
import pytest

from endosfa.errors import ConfigError
from endosfa.inference import SubsampleOptions
from endosfa.simulation import McCompute, McConfig, preset, run_monte_carlo, simulate_dataset


def test_presets():
    assert np.all(preset("s1").rho_u == 0)
    np.testing.assert_allclose(preset("S2").rho_u, [0.5, 0.5])
    with pytest.raises(ConfigError):
        preset("s3")


def test_config_validation():
    with pytest.raises(ConfigError):
        McConfig(setting="s1", n=10, replications=1, seed=0)
    with pytest.raises(ConfigError):
        McConfig(setting="s1", n=100, replications=0, seed=0)


def test_simulated_moments():
    cfg = McConfig(setting="s2", n=20000, replications=1, seed=1)
    ds, u = simulate_dataset(cfg, 0)
    assert ds.m == 2 and ds.eta_names == ["x2", "z2"]
    assert np.all(u >= 0)
    # E[U0] is the half-normal mean regardless of rho_u
    assert u.mean() == pytest.approx(np.sqrt(2 * 2.752 / np.pi), rel=0.03)
    assert np.corrcoef(ds.x[:, 0], ds.z[:, 0])[0, 1] == pytest.approx(0.5, abs=0.03)


def test_streams_are_independent_of_order():
    cfg = McConfig(setting="s1", n=100, replications=3, seed=4)
    a, _ = simulate_dataset(cfg, 2)
    b, _ = simulate_dataset(cfg, 2)
    c, _ = simulate_dataset(cfg, 1)
    assert np.array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)


def test_small_monte_carlo_report():
    cfg = McConfig(setting="s2", n=300, replications=3, seed=2,
                   compute=McCompute(wald_ci=True, lr_tests=True, efficiency=True),
                   subsample=SubsampleOptions(n_subsamples=5), lr_draws=200)
    rep = run_monte_carlo(cfg)
    assert rep.n_failed == 0
    assert rep.row("beta_2")["truth"] == 0.661
    assert set(rep.tests) == {"rho_u_zero", "rho_u_interior", "sigma_u_zero"}
    assert 0 < rep.efficiency["mean"] < 1
    assert rep.to_json() == run_monte_carlo(cfg).to_json()
    assert rep.to_csv().splitlines()[0].startswith("parameter,truth,mean")
