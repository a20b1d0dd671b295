"""Standard errors, subsampling intervals and likelihood-ratio tests."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._parallel import parallel_map
from .data import Dataset
from .density import DEFAULT_MODEL, Model, composite_terms, hessian_rho_u_at_zero, obs_loglik, vech
from .errors import (ContractError, DegenerateCurvatureError, EstimationError,
                     InfeasibleParameterError, UnreliableInferenceError)
from .estimation import FitOptions, FitResult, first_stage_ols, fit_mle, fit_no_inefficiency

log = logging.getLogger(__name__)

DEFAULT_LEVELS = (0.10, 0.05, 0.01)
CLAMP_NOTE = 1e-6


# ---------------------------------------------------------------------------
# Wald standard errors

def hessian_steps(x) -> np.ndarray:
    return np.maximum(1e-5, 1e-4 * np.abs(np.asarray(x, dtype=float)))


def numeric_hessian(f, x, steps=None) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    h = hessian_steps(x) if steps is None else np.asarray(steps, dtype=float)
    k = x.size
    f0 = f(x)
    H = np.zeros((k, k))
    E = np.diag(h)
    for i in range(k):
        H[i, i] = (f(x + E[i]) - 2.0 * f0 + f(x - E[i])) / (h[i] * h[i])
        for j in range(i):
            v = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j])
                 + f(x - E[i] - E[j])) / (4.0 * h[i] * h[j])
            H[i, j] = H[j, i] = v
    return H


def se_from_hessian(H) -> np.ndarray:
    """sqrt(diag((-H)^-1)); raises DegenerateCurvatureError unless -H is positive definite."""
    H = np.asarray(H, dtype=float)
    if not np.all(np.isfinite(H)):
        raise DegenerateCurvatureError("Hessian has non-finite entries")
    neg = -0.5 * (H + H.T)
    eig = np.linalg.eigvalsh(neg)
    if eig.size and eig[0] <= 1e-10 * max(1.0, abs(eig[-1])):
        raise DegenerateCurvatureError(
            f"negative Hessian is not positive definite (smallest eigenvalue {eig[0]:.3g})",
            eigenvalues=eig)
    return np.sqrt(np.diag(np.linalg.inv(neg)))


def free_mask(fit: FitResult) -> np.ndarray:
    """Which entries of theta_hat.to_vector() were estimated."""
    p = fit.theta_hat
    mask = []
    for name, size in p.blocks():
        mask += [not (name == "rho_u" and fit.fixed_rho_u)] * size
    return np.array(mask, dtype=bool)


def wald_se(ds: Dataset, fit: FitResult, model: Model | None = None) -> np.ndarray:
    """Standard errors from the numeric Hessian of l_n over all free parameters.

    Returned in the layout of ``theta_hat.to_vector()``; fixed entries are NaN.
    """
    model = model or fit.model
    p = fit.theta_hat
    if p.m and not fit.fixed_rho_u and np.all(p.rho_u == 0):
        raise DegenerateCurvatureError(
            "rho_u estimate is exactly zero: the information matrix loses rank "
            f"{p.m} there", eigenvalues=np.zeros(p.m))
    full = p.to_vector()
    mask = free_mask(fit)

    def f(x):
        v = full.copy()
        v[mask] = x
        try:
            q = p.from_vector(v)
            return float(np.sum(obs_loglik(ds, q, model, enforce_sign=False)))
        except (InfeasibleParameterError, np.linalg.LinAlgError):
            return np.nan

    H = numeric_hessian(f, full[mask])
    se = np.full(full.size, np.nan)
    se[mask] = se_from_hessian(H)
    return se


def wald_ci(fit: FitResult, se: np.ndarray, level: float = 0.95) -> np.ndarray:
    z = stats.norm.ppf(0.5 + level / 2.0)
    v = fit.theta_hat.to_vector()
    return np.column_stack([v - z * se, v + z * se])


# ---------------------------------------------------------------------------
# subsampling

def default_block_size(n: int) -> int:
    """floor(n^0.95 / ln n)."""
    return int(math.floor(n ** 0.95 / math.log(n)))


@dataclass
class SubsampleOptions:
    block_size: int | None = None
    n_subsamples: int | None = None
    level: float = 0.95
    rng_seed: int = 0
    rate_exponent: float = 0.5
    max_iterations: int = 200
    max_failure_share: float = 0.2

    def resolve(self, n: int) -> "SubsampleOptions":
        b = default_block_size(n) if self.block_size is None else int(self.block_size)
        s = min(500, n) if self.n_subsamples is None else int(self.n_subsamples)
        if not 1 < b <= n:
            raise ValueError(f"block size {b} must satisfy 1 < b <= n = {n}")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        if s < 1:
            raise ValueError("need at least one subsample")
        return SubsampleOptions(b, s, self.level, self.rng_seed, self.rate_exponent,
                                self.max_iterations, self.max_failure_share)


def _subsample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def _subsample_task(args):
    ds, fit, opts, i = args
    n, b = ds.n, opts.block_size
    idx = np.arange(n) if b == n else np.sort(_subsample_rng(opts.rng_seed, i).choice(
        n, size=b, replace=False))
    sub = ds.subset(idx)
    fo = FitOptions(max_iterations=opts.max_iterations, two_stage=fit.two_stage,
                    multistart_count=1, norm_index=fit.theta_hat.norm_index)
    try:
        r = fit_mle(sub, fo, fit.model, start=fit.theta_hat,
                    fixed_rho_u=fit.theta_hat.rho_u if fit.fixed_rho_u else None)
    except Exception as exc:  # noqa: BLE001 - any failed refit counts as a failure
        log.debug("subsample %d failed: %s", i, exc)
        return None
    return r.theta_hat.to_vector() if r.converged else None


@dataclass
class SubsampleResult:
    intervals: np.ndarray
    replicates: np.ndarray
    n_failed: int
    options: SubsampleOptions


def subsample_ci(ds: Dataset, fit: FitResult, opts: SubsampleOptions | None = None,
                 workers: int = 1) -> SubsampleResult:
    """Equal-tailed subsampling intervals from b^r (theta_b - theta_n)."""
    opts = (opts or SubsampleOptions()).resolve(ds.n)
    tasks = [(ds, fit, opts, i) for i in range(opts.n_subsamples)]
    out = parallel_map(_subsample_task, tasks, workers)
    good = [v for v in out if v is not None]
    n_failed = len(out) - len(good)
    theta = fit.theta_hat.to_vector()
    reps = np.array(good) if good else np.zeros((0, theta.size))
    r = opts.rate_exponent
    if good:
        dist = opts.block_size ** r * (reps - theta)
        alpha = 1.0 - opts.level
        lo_q, hi_q = np.quantile(dist, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
        ci = np.column_stack([theta - hi_q / ds.n ** r, theta - lo_q / ds.n ** r])
    else:
        ci = np.full((theta.size, 2), np.nan)
    mask = free_mask(fit)
    ci[~mask] = np.nan
    res = SubsampleResult(ci, reps, n_failed, opts)
    if n_failed > opts.max_failure_share * len(out):
        raise UnreliableInferenceError(
            f"{n_failed} of {len(out)} subsample refits failed", partial=res)
    return res


# ---------------------------------------------------------------------------
# quadratic programming projection

def qp_project_nonneg(z, weight) -> np.ndarray:
    """argmin over tau >= 0 of (tau - z)' W (tau - z).

    Lawson-Hanson active-set iterations run directly on the quadratic form,
    so no square root of W is needed.  Terminates at a KKT point, which is the
    global minimum because the problem is convex.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    W = np.atleast_2d(np.asarray(weight, dtype=float))
    k = z.size
    if W.shape != (k, k):
        raise ContractError(f"weight has shape {W.shape}, z has length {k}")
    if not np.allclose(W, W.T, rtol=1e-10, atol=1e-12):
        raise ContractError("weight matrix is not symmetric")
    if k == 1:
        if W[0, 0] < 0:
            raise ContractError("weight must be positive semidefinite")
        return np.array([max(z[0], 0.0)])
    W = 0.5 * (W + W.T)
    lam = np.linalg.eigvalsh(W)
    if lam[0] < -1e-10 * max(1.0, abs(lam[-1])):
        raise ContractError("weight must be positive semidefinite")
    b = W @ z
    tol = 1e-12 * max(1.0, np.abs(W).max()) * max(1.0, np.abs(z).max())
    tau = np.zeros(k)
    passive = np.zeros(k, bool)
    for _ in range(3 * k + 10):
        w = b - W @ tau                      # minus half the gradient
        cand = np.where(~passive, w, -np.inf)
        j = int(np.argmax(cand))
        if cand[j] <= tol:
            break
        passive[j] = True
        while True:
            s = np.zeros(k)
            idx = np.flatnonzero(passive)
            s[idx] = np.linalg.lstsq(W[np.ix_(idx, idx)], b[idx], rcond=None)[0]
            if np.all(s[idx] > 0):
                tau = s
                break
            neg = idx[s[idx] <= 0]
            alpha = np.min(tau[neg] / (tau[neg] - s[neg]))
            tau = tau + alpha * (s - tau)
            passive &= tau > tol
            tau[~passive] = 0.0
            if not passive.any():
                break
    return tau


def qp_objective(tau, z, W) -> float:
    d = np.asarray(tau) - np.asarray(z)
    return float(d @ W @ d)


# ---------------------------------------------------------------------------
# LR tests

@dataclass
class LrTestResult:
    statistic: float
    critical_values: dict
    p_value: float | None
    method: str
    loglik_unrestricted: float = float("nan")
    loglik_restricted: float = float("nan")
    raw_statistic: float = float("nan")
    notes: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def reject(self, level: float) -> bool:
        return bool(self.statistic > self.critical_values[level])

    def to_dict(self) -> dict:
        return {"statistic": self.statistic,
                "critical_values": {f"{k:g}": v for k, v in sorted(self.critical_values.items())},
                "p_value": self.p_value, "method": self.method,
                "loglik_unrestricted": self.loglik_unrestricted,
                "loglik_restricted": self.loglik_restricted,
                "raw_statistic": self.raw_statistic,
                "reject": {f"{k:g}": self.reject(k) for k in sorted(self.critical_values)},
                "notes": list(self.notes), "details": self.details}


def _lr(l_unres, l_res, notes):
    raw = 2.0 * (l_unres - l_res)
    if raw < -CLAMP_NOTE:
        notes.append(f"negative LR statistic {raw:.3g} clamped to 0")
    return max(raw, 0.0), raw


def _restricted_fit(ds, fit, rho_u, model):
    opts = FitOptions(two_stage=fit.two_stage, norm_index=fit.theta_hat.norm_index)
    cand = [fit_mle(ds, opts, model, fixed_rho_u=rho_u)]
    try:
        warm = fit.theta_hat.replace(rho_u=rho_u)
        if warm.is_feasible(normalized=False):
            cand.append(fit_mle(ds, opts, model, start=warm, fixed_rho_u=rho_u))
    except (np.linalg.LinAlgError, ValueError):
        pass
    return max(cand, key=lambda r: r.loglik)


def lr_test_interior(ds: Dataset, fit_unrestricted: FitResult, r0,
                     levels=DEFAULT_LEVELS, model: Model | None = None) -> LrTestResult:
    """LR test of rho_u = r0 (interior) against chi-square with dim(rho_u) degrees of freedom."""
    model = model or fit_unrestricted.model
    p = fit_unrestricted.theta_hat
    r0 = np.asarray(r0, dtype=float).reshape(-1)
    if r0.size != p.m:
        raise InfeasibleParameterError(f"r0 has length {r0.size}, expected {p.m}")
    cand = p.replace(rho_u=r0)
    cand.check(normalized=True)
    if r0[p.norm_index] <= 0 or r0[p.norm_index] >= 1:
        raise InfeasibleParameterError("r0 must be interior to the normalized range")
    res = _restricted_fit(ds, fit_unrestricted, r0, model)
    if not res.converged:
        raise EstimationError("restricted fit did not converge")
    notes = []
    stat, raw = _lr(fit_unrestricted.loglik, res.loglik, notes)
    df = p.m
    cv = {lv: float(stats.chi2.ppf(1.0 - lv, df)) for lv in levels}
    return LrTestResult(stat, cv, float(stats.chi2.sf(stat, df)), "chi2",
                        fit_unrestricted.loglik, res.loglik, raw, notes,
                        {"df": df, "r0": r0.tolist()})


def mixture_critical_value(alpha: float) -> float:
    """c solving P(chi2_1 > c) / 2 = alpha."""
    return float(stats.chi2.ppf(1.0 - 2.0 * alpha, 1))


def lr_test_sigma_u_zero(ds: Dataset, fit_unrestricted: FitResult | None = None,
                         levels=DEFAULT_LEVELS, model: Model = DEFAULT_MODEL,
                         opts: FitOptions | None = None) -> LrTestResult:
    """LR test of sigma2_u = 0 against the 50:50 mixture of a point mass at 0 and chi2_1."""
    if fit_unrestricted is None:
        fit_unrestricted = fit_mle(ds, opts, model)
    model = fit_unrestricted.model
    stage1 = first_stage_ols(ds)
    res = fit_no_inefficiency(ds, model, stage1)
    notes = []
    if not fit_unrestricted.two_stage:
        notes.append("restricted model uses the first-stage OLS values")
    stat, raw = _lr(fit_unrestricted.loglik, res.loglik, notes)
    cv = {lv: mixture_critical_value(lv) for lv in levels}
    pv = 0.5 * float(stats.chi2.sf(stat, 1)) if stat > 0 else 1.0
    return LrTestResult(stat, cv, pv, "mixture_chi2_pointmass", fit_unrestricted.loglik,
                        res.loglik, raw, notes,
                        {"restricted": {"beta": res.beta.tolist(), "sigma2_v": res.sigma2_v,
                                        "rho_v": res.rho_v.tolist()}})


def per_obs_scores(ds: Dataset, p, model: Model, mask) -> np.ndarray:
    """n x k central-difference scores of obs_loglik in the entries selected by ``mask``."""
    full = p.to_vector()
    idx = np.flatnonzero(mask)
    h = hessian_steps(full[idx])
    out = np.zeros((ds.n, idx.size))
    for c, (j, hj) in enumerate(zip(idx, h)):
        up, dn = full.copy(), full.copy()
        up[j] += hj
        dn[j] -= hj
        out[:, c] = (obs_loglik(ds, p.from_vector(up), model, enforce_sign=False)
                     - obs_loglik(ds, p.from_vector(dn), model, enforce_sign=False)) / (2 * hj)
    return out


def augmented_hessian_scores(ds: Dataset, p, model: Model) -> np.ndarray:
    """vech of the closed-form rho_u Hessian at 0 with the diagonal halved.

    With tau = vech(rho rho'), l(rho) - l(0) = tau' s + o(|rho|^2) where s is this vector.
    """
    H = hessian_rho_u_at_zero(composite_terms(ds, p, model), p)
    m = p.m
    half = np.array([0.5 if i == j else 1.0 for j in range(m) for i in range(j, m)])
    return vech(H) * half


def _pinv_clipped(mat, tol=1e-10):
    lam, vec = np.linalg.eigh(0.5 * (mat + mat.T))
    keep = lam > tol * max(1.0, lam[-1])
    inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    return (vec * inv) @ vec.T, lam, vec, keep


def lr_test_rho_u_zero(ds: Dataset, fit_unrestricted: FitResult, n_draws: int = 2000,
                       seed: int = 0, levels=DEFAULT_LEVELS,
                       model: Model | None = None) -> LrTestResult:
    """Boundary LR test of rho_u = 0 with critical values simulated by QP projection.

    The limit of the LR statistic is Q(0) - Q(tau_hat), Q(tau) = (tau - Z)'W(tau - Z),
    with Z the rho-block of a normal draw with covariance I1^+ (the pseudo-inverse of
    the augmented information), W = I_rr - I_rt I_tt^-1 I_tr and tau_hat the projection
    of Z onto tau >= 0.
    """
    model = model or fit_unrestricted.model
    p = fit_unrestricted.theta_hat
    m = p.m
    if m == 0:
        raise ContractError("no endogenous coordinates to test")
    res = _restricted_fit(ds, fit_unrestricted, np.zeros(m), model)
    if not res.converged:
        raise EstimationError("restricted fit with rho_u = 0 did not converge")
    notes = []
    stat, raw = _lr(fit_unrestricted.loglik, res.loglik, notes)
    pr = res.theta_hat

    mask = free_mask(res)
    s1 = per_obs_scores(ds, pr, model, mask)
    s2 = augmented_hessian_scores(ds, pr, model)
    scores = np.hstack([s1, s2])
    info = scores.T @ scores / ds.n
    pinv, lam, vec, keep = _pinv_clipped(info)
    if not np.all(keep):
        notes.append(f"information matrix clipped: {int((~keep).sum())} eigenvalues <= 1e-10")
    pinv_resid = float(np.max(np.abs(info @ pinv @ info - info)) / max(1.0, np.abs(info).max()))

    k1 = s1.shape[1]
    i_tt, i_tr, i_rr = info[:k1, :k1], info[:k1, k1:], info[k1:, k1:]
    W = i_rr - i_tr.T @ np.linalg.pinv(i_tt) @ i_tr
    W = 0.5 * (W + W.T)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5150])))
    root = vec * np.sqrt(np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0))
    draws = rng.standard_normal((n_draws, info.shape[0])) @ root.T
    zr = draws[:, k1:]
    func = np.empty(n_draws)
    for i, z in enumerate(zr):
        tau = qp_project_nonneg(z, W)
        func[i] = max(qp_objective(np.zeros_like(z), z, W) - qp_objective(tau, z, W), 0.0)
    cv = {lv: float(np.quantile(func, 1.0 - lv)) for lv in levels}
    pv = float(np.mean(func >= stat))
    return LrTestResult(stat, cv, pv, "simulated_qp", fit_unrestricted.loglik, res.loglik,
                        raw, notes,
                        {"functional": "Q(0) - Q(tau_hat), Q(tau) = (tau - Z)'W(tau - Z), "
                                       "tau >= 0 over vech(rho_u rho_u')",
                         "n_draws": n_draws, "seed": seed, "pinv_residual": pinv_resid,
                         "restricted_converged": res.converged})
