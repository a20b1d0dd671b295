"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py``.  The Monte Carlo criteria
(9-12) dominate the runtime; criterion 12 alone takes about ten minutes on
one core.  Set SFA_THREADS to use more processes.
"""
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

sys.path.insert(0, str(Path(__file__).parent))
import oracles  # noqa: E402
from conftest import random_dataset, random_params  # noqa: E402
from endosfa._parallel import worker_count  # noqa: E402
from endosfa.cli import main as cli_main  # noqa: E402
from endosfa.density import (composite_terms, eps_cond_logpdf, folded_normal_cond_pdf,  # noqa: E402
                             hessian_rho_u_at_zero, loglik, score_rho_u, terms_from_parts)
from endosfa.efficiency import half_normal_mean_te, te_from_terms  # noqa: E402
from endosfa.inference import (SubsampleOptions, default_block_size, qp_objective,  # noqa: E402
                               qp_project_nonneg)
from endosfa.params import ParamVector  # noqa: E402
from endosfa.simulation import McCompute, McConfig, preset, run_monte_carlo, simulate_dataset  # noqa: E402

RESULTS: dict = {}


def record(num, ok, detail, t0):
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({time.time() - t0:.1f}s)"
    RESULTS[num] = line
    print(line, flush=True)
    return ok


def _single_terms(rng, p, eps):
    a = rng.standard_normal((1, p.m))
    log_g = rng.normal(scale=0.3, size=1)
    return a, log_g


# -- 1 ------------------------------------------------------------------------
def criterion_1():
    t0 = time.time()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(200):
        p = random_params(rng)
        a, log_g = _single_terms(rng, p, None)

        def f(e):
            return math.exp(eps_cond_logpdf(terms_from_parts(np.array([e]), a, log_g, p))[0])
        ct = terms_from_parts(np.zeros(1), a, log_g, p)
        centre = float(np.sqrt(p.sigma2_v) * (a @ p.rho_v)[0]
                       - ct.g[0] * np.sqrt(p.sigma2_u))
        lo, _ = integrate.quad(f, -np.inf, centre, epsabs=1e-12, epsrel=1e-12, limit=400)
        hi, _ = integrate.quad(f, centre, np.inf, epsabs=1e-12, epsrel=1e-12, limit=400)
        worst = max(worst, abs(lo + hi - 1.0))
    return record(1, worst < 1e-7, f"max |integral - 1| = {worst:.2e} over 200 cases", t0)


# -- 2 ------------------------------------------------------------------------
def criterion_2():
    t0 = time.time()
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(100):
        p = random_params(rng)
        a, log_g = _single_terms(rng, p, None)
        eps = rng.normal(scale=2.0)
        closed = math.exp(eps_cond_logpdf(terms_from_parts(np.array([eps]), a, log_g, p))[0])
        ref = oracles.eps_cond_pdf(eps, p, a[0], math.exp(log_g[0]))
        worst = max(worst, abs(closed - ref))
    return record(2, worst < 1e-6, f"max |closed form - quadrature| = {worst:.2e}", t0)


# -- 3 ------------------------------------------------------------------------
def criterion_3():
    t0 = time.time()
    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(5):
        s2u = rng.uniform(0.3, 3.0)
        d = rng.uniform(0.5, 2.0)
        p = ParamVector(beta=[0.0], delta=[], sigma2_v=1.0, sigma2_u=s2u, rho_v=[0.2],
                        rho_u=[rng.uniform(0.05, 0.95)], gamma=np.zeros((1, 1)), d_eta=[d],
                        c_eta_lower=[])
        for u in np.linspace(0.0, 4.0 * math.sqrt(s2u), 15):
            val, _ = integrate.quad(
                lambda e: folded_normal_cond_pdf(u, np.array([e]), p) * stats.norm.pdf(e, 0, d),
                -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)
            ref = 2.0 / math.sqrt(2 * math.pi * s2u) * math.exp(-u * u / (2 * s2u))
            worst = max(worst, abs(val - ref))
    return record(3, worst < 1e-6, f"max deviation from half-normal = {worst:.2e}", t0)


# -- 4 ------------------------------------------------------------------------
def criterion_4():
    t0 = time.time()
    rng = np.random.default_rng(104)
    exact, worst = True, 0.0
    for _ in range(20):
        p = random_params(rng).replace(rho_u=np.zeros(2))
        ds = random_dataset(rng, p, n=200)
        exact &= bool(np.all(score_rho_u(composite_terms(ds, p), p) == 0.0))
        h = 1e-4
        grad = [(loglik(ds, p.replace(rho_u=h * e), enforce_sign=False)
                 - loglik(ds, p.replace(rho_u=-h * e), enforce_sign=False)) / (2 * h)
                for e in np.eye(2)]
        worst = max(worst, float(np.linalg.norm(grad)))
    return record(4, exact and worst < 1e-8,
                  f"closed-form score exactly 0: {exact}; max FD gradient norm = {worst:.2e}", t0)


# -- 5 ------------------------------------------------------------------------
def criterion_5():
    t0 = time.time()
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(100):
        p = random_params(rng)
        ds = random_dataset(rng, p, n=100)
        a = loglik(ds, p)
        b = loglik(ds, p.flipped(), enforce_sign=False)
        worst = max(worst, abs(a - b) / abs(a))
    return record(5, worst < 1e-12, f"max relative difference = {worst:.2e}", t0)


# -- 6 ------------------------------------------------------------------------
def criterion_6():
    t0 = time.time()
    n = 100_000
    cfg = McConfig(setting="s1", n=n, replications=1, seed=106)
    ds, _ = simulate_dataset(cfg, 0)
    p = cfg.truth
    H = hessian_rho_u_at_zero(composite_terms(ds, p), p)
    mean = np.abs(H.mean(axis=0)).max()
    indiv = float(np.median(np.abs(H).max(axis=(1, 2))))
    bound = 5.0 / math.sqrt(n)
    return record(6, mean < bound and indiv > 10 * bound,
                  f"max |mean Hessian| = {mean:.2e} (< {bound:.2e}); "
                  f"median per-observation max |H| = {indiv:.2e}", t0)


# -- 7 ------------------------------------------------------------------------
def criterion_7():
    t0 = time.time()
    rng = np.random.default_rng(107)
    worst = 0.0
    for _ in range(500):
        p = random_params(rng)
        a, log_g = _single_terms(rng, p, None)
        eps = rng.normal(scale=2.0)
        ct = terms_from_parts(np.array([eps]), a, log_g, p)
        ref = oracles.te_quadrature(eps, p, a[0], math.exp(log_g[0]))
        worst = max(worst, abs(float(te_from_terms(ct)[0]) - ref))
    exo_worst = 0.0
    for _ in range(50):
        s2v, s2u = rng.uniform(0.2, 3.0, 2)
        p0 = ParamVector(beta=[0.0], delta=[], sigma2_v=s2v, sigma2_u=s2u, rho_v=[], rho_u=[],
                         gamma=np.zeros((0, 0)), d_eta=[], c_eta_lower=[])
        eps = rng.normal(scale=2.0, size=20)
        ct = terms_from_parts(eps, np.zeros((20, 0)), np.zeros(20), p0)
        ref = oracles.classical_bc(eps, math.sqrt(s2v), math.sqrt(s2u))
        exo_worst = max(exo_worst, float(np.max(np.abs(te_from_terms(ct) - ref) / ref)))
    return record(7, worst < 1e-6 and exo_worst < 1e-10,
                  f"max |TE - quadrature| = {worst:.2e}; "
                  f"exogenous vs classical rel. diff = {exo_worst:.2e}", t0)


# -- 8 ------------------------------------------------------------------------
def criterion_8():
    t0 = time.time()
    v = half_normal_mean_te(2.752)
    return record(8, abs(v - 0.3846) <= 1e-4, f"half_normal_mean_te(2.752) = {v:.6f}", t0)


# -- 9 ------------------------------------------------------------------------
def criterion_9():
    t0 = time.time()
    rep = run_monte_carlo(McConfig(setting="s2", n=1000, replications=200, seed=2024,
                                   workers=worker_count()))
    b2, s2u = rep.row("beta_2"), rep.row("sigma2_u")
    ok = (0.637 <= b2["mean"] <= 0.677 and 2.55 <= s2u["mean"] <= 2.90
          and 0.06 <= b2["sd"] <= 0.10)
    return record(9, ok, f"mean beta_2 = {b2['mean']:.4f}, SD beta_2 = {b2['sd']:.4f}, "
                         f"mean sigma2_u = {s2u['mean']:.4f}, failed = {rep.n_failed}", t0)


# -- 10 -----------------------------------------------------------------------
def criterion_10():
    t0 = time.time()
    rep = run_monte_carlo(McConfig(setting="s1", n=1000, replications=200, seed=2025,
                                   compute=McCompute(efficiency=True), workers=worker_count()))
    te = rep.efficiency["mean"]
    return record(10, 0.37 <= te <= 0.41,
                  f"sample mean TE = {te:.4f}, failed = {rep.n_failed}", t0)


# -- 11 -----------------------------------------------------------------------
def criterion_11():
    t0 = time.time()
    rep = run_monte_carlo(McConfig(setting="s2", n=500, replications=200, seed=2026,
                                   compute=McCompute(lr_tests=True), lr_draws=1000,
                                   workers=worker_count()))
    size = rep.tests["rho_u_interior"]["rejection"]["0.05"]
    power = rep.tests["rho_u_zero"]["rejection"]["0.05"]
    ok = 0.03 <= size <= 0.11 and power >= 0.95
    return record(11, ok, f"interior size at 5% = {size:.3f} "
                          f"({rep.tests['rho_u_interior']['count']} reps), boundary power = "
                          f"{power:.3f} ({rep.tests['rho_u_zero']['count']} reps)", t0)


# -- 12 -----------------------------------------------------------------------
def criterion_12():
    t0 = time.time()
    b = default_block_size(500)
    rep = run_monte_carlo(McConfig(setting="s2", n=500, replications=100, seed=2027,
                                   compute=McCompute(subsample_ci=True),
                                   subsample=SubsampleOptions(n_subsamples=200, rng_seed=2027),
                                   workers=worker_count()))
    cov = rep.row("beta_2")["subsample_coverage"]
    ok = b == 58 and cov is not None and 0.90 <= cov <= 1.00
    cov_s = "n/a" if cov is None else f"{cov:.3f}"
    return record(12, ok, f"b(500) = {b}; beta_2 subsample coverage = {cov_s}, "
                          f"failed reps = {rep.n_failed}", t0)


# -- 13 -----------------------------------------------------------------------
def criterion_13():
    t0 = time.time()
    rng = np.random.default_rng(113)
    scalar_ok = all(qp_project_nonneg([z], [[w]])[0] == max(z, 0.0)
                    for z, w in zip(rng.normal(size=1000), rng.uniform(0.01, 5, 1000)))
    worst = 0.0
    for _ in range(1000):
        z = rng.normal(size=2)
        a = rng.normal(size=(2, 2))
        W = a @ a.T + 1e-6 * np.eye(2)
        tau = qp_project_nonneg(z, W)
        ref, val = oracles.qp_enumerate(z, W)
        worst = max(worst, float(np.max(np.abs(tau - ref))),
                    abs(qp_objective(tau, z, W) - val))
    return record(13, scalar_ok and worst < 1e-8,
                  f"scalar exact: {scalar_ok}; max deviation from enumeration = {worst:.2e}", t0)


# -- 14 -----------------------------------------------------------------------
def criterion_14(tmp):
    t0 = time.time()
    args = ["simulate", "--setting", "s2", "--n", "200", "--reps", "3", "--seed", "14",
            "--compute", "wald,efficiency"]
    codes = [cli_main(args + ["--out-prefix", str(Path(tmp) / t)]) for t in ("a", "b")]
    same = all((Path(tmp) / f"a{e}").read_bytes() == (Path(tmp) / f"b{e}").read_bytes()
               for e in (".mc.json", ".mc.csv"))
    return record(14, codes == [0, 0] and same, f"exit codes {codes}; byte-identical: {same}", t0)


# -- pytest entry points -------------------------------------------------------
@pytest.mark.parametrize("num", range(1, 14))
def test_criterion(num):
    assert globals()[f"criterion_{num}"]()


def test_criterion_14(tmp_path):
    assert criterion_14(tmp_path)


if __name__ == "__main__":
    import tempfile
    ok = True
    for k in range(1, 14):
        ok &= globals()[f"criterion_{k}"]()
    with tempfile.TemporaryDirectory() as d:
        ok &= criterion_14(d)
    sys.exit(0 if ok else 1)
