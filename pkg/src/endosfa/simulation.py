"""Simulation design with two endogenous regressors and a Monte Carlo driver.

Exogenous block (X1, Z1, W1, W2) is equicorrelated standard normal (corr 0.5).
(V, eta_X, eta_Z) is jointly normal; X2 and Z2 load 0.316 on each exogenous
variable plus their eta.  U0 = |U0*| with U0* | eta normal, and
Y = beta0 + beta1 X1 + beta2 X2 + V - U0 exp(delta1 Z1 + delta2 Z2).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ._parallel import parallel_map
from .data import Dataset
from .efficiency import efficiency_scores
from .errors import ConfigError, DegenerateCurvatureError
from .estimation import FitOptions, fit_mle
from .inference import (SubsampleOptions, lr_test_interior, lr_test_rho_u_zero,
                        lr_test_sigma_u_zero, subsample_ci, wald_ci, wald_se)
from .params import ParamVector

log = logging.getLogger(__name__)

GAMMA = 0.316
EXOG_CORR = 0.5
SIGMA2_U = 2.752
TEST_LEVELS = (0.10, 0.05, 0.01)


def preset(setting: str) -> ParamVector:
    """True parameters of setting ``s1`` (rho_u = 0) or ``s2`` (rho_u = (0.5, 0.5))."""
    setting = setting.lower()
    if setting not in ("s1", "s2"):
        raise ConfigError(f"unknown setting {setting!r}")
    rho_u = [0.0, 0.0] if setting == "s1" else [0.5, 0.5]
    gamma = np.full((5, 2), GAMMA)
    gamma[0] = 0.0
    return ParamVector(beta=[0.0, 0.661, 0.661], delta=[0.0, 0.0], sigma2_v=1.0,
                       sigma2_u=SIGMA2_U, rho_v=[0.5, 0.5], rho_u=rho_u, gamma=gamma,
                       d_eta=[1.0, 1.0], c_eta_lower=[0.5])


@dataclass
class McCompute:
    wald_ci: bool = False
    subsample_ci: bool = False
    lr_tests: bool = False
    efficiency: bool = False


@dataclass
class McConfig:
    setting: object = "s2"
    n: int = 1000
    replications: int = 200
    seed: int = 0
    compute: McCompute = field(default_factory=McCompute)
    fit_options: FitOptions = field(default_factory=FitOptions)
    subsample: SubsampleOptions = field(default_factory=SubsampleOptions)
    lr_draws: int = 1000
    workers: int = 1

    def __post_init__(self):
        if self.n < 50:
            raise ConfigError("n must be at least 50")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")

    @property
    def truth(self) -> ParamVector:
        return self.setting if isinstance(self.setting, ParamVector) else preset(self.setting)

    @property
    def label(self) -> str:
        return self.setting if isinstance(self.setting, str) else "custom"


def replication_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for replication ``index``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def simulate_dataset(cfg: McConfig, replication_index: int):
    """(Dataset, true U = U0 g) for one replication."""
    p = cfg.truth
    if p.m != 2 or p.beta.size != 3 or p.delta.size != 2 or p.gamma.shape != (5, 2):
        raise ConfigError("custom parameters must match the two-regressor design")
    rng = replication_rng(cfg.seed, replication_index)
    n = cfg.n
    ex_cov = np.full((4, 4), EXOG_CORR)
    np.fill_diagonal(ex_cov, 1.0)
    exog = rng.standard_normal((n, 4)) @ np.linalg.cholesky(ex_cov).T
    x1, z1, w1, w2 = exog.T

    sv = np.sqrt(p.sigma2_v)
    cov = np.empty((3, 3))
    cov[0, 0] = p.sigma2_v
    cov[0, 1:] = cov[1:, 0] = sv * p.rho_v * p.d_eta
    cov[1:, 1:] = p.sigma_eta
    joint = rng.standard_normal((n, 3)) @ np.linalg.cholesky(cov).T
    v, eta = joint[:, 0], joint[:, 1:]

    design = np.column_stack([np.ones(n), x1, z1, w1, w2])
    endog = design @ p.gamma + eta
    x2, z2 = endog.T

    su = np.sqrt(p.sigma2_u)
    mu = su * ((eta / p.d_eta) @ p.c_eta_inv @ p.rho_u)
    u0 = np.abs(mu + np.sqrt(p.sigma2_u * (1.0 - p.quad_u())) * rng.standard_normal(n))
    x = np.column_stack([x1, x2])
    z = np.column_stack([z1, z2])
    u = u0 * np.exp(z @ p.delta)
    y = p.beta[0] + x @ p.beta[1:] + v - u
    ds = Dataset(y=y, x=x, z=z, w=np.column_stack([w1, w2]), x_endog=[False, True],
                 z_endog=[False, True], y_name="y", x_names=("x1", "x2"),
                 z_names=("z1", "z2"), w_names=("w1", "w2"))
    return ds, u


# ---------------------------------------------------------------------------
# Monte Carlo

def _replicate(args):
    cfg, idx = args
    out = {"index": idx, "ok": False}
    try:
        ds, _ = simulate_dataset(cfg, idx)
        fit = fit_mle(ds, cfg.fit_options)
    except Exception as exc:  # noqa: BLE001 - failures are counted, not fatal
        out["error"] = f"{type(exc).__name__}: {exc}"
        return out
    if not fit.converged:
        out["error"] = "fit did not converge"
        return out
    truth = cfg.truth.to_vector()
    out.update(ok=True, theta=fit.theta_hat.to_vector(), loglik=fit.loglik,
               boundary=fit.boundary)
    c = cfg.compute
    if c.wald_ci:
        try:
            se = wald_se(ds, fit)
            ci = wald_ci(fit, se)
            out["se"] = se
            out["wald_cover"] = (ci[:, 0] <= truth) & (truth <= ci[:, 1])
        except DegenerateCurvatureError as exc:
            out["wald_error"] = str(exc)
    if c.subsample_ci:
        try:
            sub = subsample_ci(ds, fit, SubsampleOptions(
                cfg.subsample.block_size, cfg.subsample.n_subsamples, cfg.subsample.level,
                cfg.subsample.rng_seed + 7919 * idx, cfg.subsample.rate_exponent,
                cfg.subsample.max_iterations, cfg.subsample.max_failure_share))
            ci = sub.intervals
            out["sub_cover"] = (ci[:, 0] <= truth) & (truth <= ci[:, 1])
            out["sub_failed"] = sub.n_failed
        except Exception as exc:  # noqa: BLE001
            out["sub_error"] = f"{type(exc).__name__}: {exc}"
    if c.lr_tests:
        tests = {}
        p0 = cfg.truth
        try:
            r = lr_test_rho_u_zero(ds, fit, n_draws=cfg.lr_draws, seed=cfg.seed + idx,
                                   levels=TEST_LEVELS)
            tests["rho_u_zero"] = {lv: r.reject(lv) for lv in TEST_LEVELS}
        except Exception as exc:  # noqa: BLE001
            out["lr_error_rho0"] = f"{type(exc).__name__}: {exc}"
        if np.any(p0.rho_u != 0):
            try:
                r = lr_test_interior(ds, fit, p0.rho_u, levels=TEST_LEVELS)
                tests["rho_u_interior"] = {lv: r.reject(lv) for lv in TEST_LEVELS}
            except Exception as exc:  # noqa: BLE001
                out["lr_error_interior"] = f"{type(exc).__name__}: {exc}"
        try:
            r = lr_test_sigma_u_zero(ds, fit, levels=TEST_LEVELS)
            tests["sigma_u_zero"] = {lv: r.reject(lv) for lv in TEST_LEVELS}
        except Exception as exc:  # noqa: BLE001
            out["lr_error_sigma"] = f"{type(exc).__name__}: {exc}"
        out["tests"] = tests
    if c.efficiency:
        out["te"] = efficiency_scores(ds, fit.theta_hat).scores
    return out


@dataclass
class McReport:
    setting: str
    n: int
    replications: int
    seed: int
    n_failed: int
    rows: list
    tests: dict
    efficiency: dict | None
    failures: list
    notes: list

    def row(self, name: str) -> dict:
        for r in self.rows:
            if r["parameter"] == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"setting": self.setting, "n": self.n, "replications": self.replications,
                "seed": self.seed, "n_failed": self.n_failed, "rows": self.rows,
                "tests": self.tests, "efficiency": self.efficiency,
                "failures": self.failures, "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        cols = ["parameter", "truth", "mean", "sd", "avg_se", "wald_coverage",
                "subsample_coverage"]
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(_fmt(r[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _mean_or_none(vals):
    return float(np.mean(vals)) if len(vals) else None


def run_monte_carlo(cfg: McConfig) -> McReport:
    """Simulate, fit and aggregate ``cfg.replications`` datasets."""
    results = parallel_map(_replicate, [(cfg, i) for i in range(cfg.replications)],
                           cfg.workers)
    results.sort(key=lambda r: r["index"])
    ok = [r for r in results if r["ok"]]
    failures = [{"index": r["index"], "error": r.get("error", "")}
                for r in results if not r["ok"]]
    notes = []
    if len(failures) > 0.1 * cfg.replications:
        notes.append(f"{len(failures)} of {cfg.replications} replications failed; "
                     "report is partial")
    truth = cfg.truth
    ds0, _ = simulate_dataset(cfg, 0)
    names = truth.names(beta_names=["beta_0", "beta_1", "beta_2"],
                        delta_names=["delta_1", "delta_2"], eta_names=ds0.eta_names,
                        design_names=ds0.first_stage_names())
    tv = truth.to_vector()
    thetas = np.array([r["theta"] for r in ok]) if ok else np.zeros((0, tv.size))
    rows = []
    for j, name in enumerate(names):
        col = thetas[:, j]
        ses = [r["se"][j] for r in ok if "se" in r and np.isfinite(r["se"][j])]
        wc = [r["wald_cover"][j] for r in ok if "wald_cover" in r]
        sc = [r["sub_cover"][j] for r in ok if "sub_cover" in r]
        rows.append({"parameter": name, "truth": float(tv[j]),
                     "mean": float(col.mean()) if col.size else None,
                     "sd": float(col.std()) if col.size else None,
                     "avg_se": _mean_or_none(ses), "wald_coverage": _mean_or_none(wc),
                     "subsample_coverage": _mean_or_none(sc)})
    tests = {}
    if cfg.compute.lr_tests:
        for key in ("rho_u_zero", "rho_u_interior", "sigma_u_zero"):
            got = [r["tests"][key] for r in ok if key in r.get("tests", {})]
            if got:
                tests[key] = {"count": len(got),
                              "rejection": {f"{lv:g}": float(np.mean([g[lv] for g in got]))
                                            for lv in TEST_LEVELS}}
        errs = sum(1 for r in ok for k in r if k.startswith("lr_error"))
        if errs:
            notes.append(f"{errs} test evaluations failed")
    eff = None
    if cfg.compute.efficiency and ok:
        pooled = np.concatenate([r["te"] for r in ok])
        q = np.quantile(pooled, [0.0, 0.25, 0.5, 0.75, 1.0])
        eff = {"min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
               "mean": float(pooled.mean()), "q3": float(q[3]), "max": float(q[4]),
               "replication_mean_sd": float(np.std([r["te"].mean() for r in ok]))}
    wald_err = sum(1 for r in ok if "wald_error" in r)
    if wald_err:
        notes.append(f"{wald_err} replications had degenerate curvature (no Wald SE)")
    sub_err = sum(1 for r in ok if "sub_error" in r)
    if sub_err:
        notes.append(f"{sub_err} replications had unreliable subsampling")
    if cfg.compute.wald_ci:
        notes.append("standard errors from the joint numeric Hessian of the full likelihood")
    return McReport(setting=cfg.label, n=cfg.n, replications=cfg.replications, seed=cfg.seed,
                    n_failed=len(failures), rows=rows, tests=tests, efficiency=eff,
                    failures=failures, notes=notes)
