"""First-stage OLS, moment-based starting values and the constrained MLE."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from ._stats import LOG_2PI, ndtr
from .data import Dataset
from .density import (DEFAULT_MODEL, Model, control_function, eps_cond_logpdf, eta_logpdf,
                      obs_loglik, sfa_gradient, terms_from_parts)
from .errors import DataError, EstimationError, SingularDesignError
from .params import ParamVector, lower_from_corr
from .transform import Transform

log = logging.getLogger(__name__)

SIGMA2_U_FLOOR = 1e-3
BOUNDARY_TOL = 1e-6
TIE_TOL = 1e-8


# ---------------------------------------------------------------------------
# first stage

@dataclass(frozen=True)
class FirstStage:
    gamma: np.ndarray
    d_eta: np.ndarray
    c_eta_lower: np.ndarray
    residuals: np.ndarray

    def __iter__(self):
        return iter((self.gamma, self.d_eta, self.c_eta_lower, self.residuals))


def _lstsq(design, target):
    if design.shape[1] and np.linalg.matrix_rank(design) < design.shape[1]:
        raise SingularDesignError("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    return coef


def first_stage_ols(ds: Dataset) -> FirstStage:
    """Least squares of each endogenous column on the first-stage design.

    Scales use divisor n; C_eta is the residual correlation matrix.
    """
    design = ds.first_stage_design()
    m = ds.m
    if m == 0:
        return FirstStage(np.zeros((design.shape[1], 0)), np.zeros(0), np.zeros(0),
                          np.zeros((ds.n, 0)))
    endog = ds.endog_matrix()
    gamma = _lstsq(design, endog)
    resid = endog - design @ gamma
    cov = resid.T @ resid / ds.n
    d = np.sqrt(np.diag(cov))
    if np.any(d <= 1e-12 * (1.0 + np.abs(endog).max())):
        # exact fit: keep the scale strictly positive but report exact residuals
        d = np.maximum(d, 1e-12)
    corr = cov / np.outer(d, d)
    np.fill_diagonal(corr, 1.0)
    return FirstStage(gamma, d, lower_from_corr(corr), resid)


# ---------------------------------------------------------------------------
# starting values

def conditional_mean_u0(eta, p: ParamVector):
    """E[U0 | eta] for the folded normal: 2 s phi(mu/s) + (2 Phi(mu/s) - 1) mu."""
    p.check(normalized=False)
    eta = np.asarray(eta, dtype=float)
    s = np.sqrt(p.sigma2_u * (1.0 - p.quad_u()))
    if p.m:
        mu = np.sqrt(p.sigma2_u) * ((eta / p.d_eta) @ p.c_eta_inv @ p.rho_u)
    else:
        mu = np.zeros(eta.shape[:-1]) if eta.ndim > 1 else 0.0
    r = mu / s
    out = 2.0 * s * np.exp(-0.5 * r * r) / np.sqrt(2.0 * np.pi) + (2.0 * ndtr(r) - 1.0) * mu
    return np.maximum(out, 0.0)


def _unit(m, idx):
    e = np.zeros(m)
    if m:
        e[idx] = 1.0
    return e


def _shrink_to_feasible(rho, cinv, limit=0.95):
    q = float(rho @ cinv @ rho) if rho.size else 0.0
    if q >= limit:
        rho = rho * np.sqrt(limit / q)
    return rho


def starting_values(ds: Dataset, stage1: FirstStage, model: Model = DEFAULT_MODEL,
                    rho_u_start: float = 0.05, norm_index: int = 0) -> ParamVector:
    """Method-of-moments start.

    beta and the eta loadings come from least squares of y on the frontier design
    and eta.  sigma2_u matches the residual third moment to the half-normal one
    (floored at 1e-3 when the skew has the wrong sign); sigma2_v and rho_v follow
    from the residual variance and the eta loadings.  delta = 0.
    """
    n = ds.n
    eta = stage1.residuals
    m = ds.m
    design = model.frontier.design(ds.x) if hasattr(model.frontier, "design") else None
    if design is not None:
        coef = _lstsq(np.hstack([design, eta]), ds.y)
        beta, b = coef[:design.shape[1]], coef[design.shape[1]:]
        resid = ds.y - design @ beta - eta @ b
    else:
        kb = model.frontier.n_params(ds.x.shape[1])

        def res(c):
            return ds.y - model.frontier.value(ds.x, c[:kb]) - eta @ c[kb:]
        sol = optimize.least_squares(res, np.full(kb + m, 0.1))
        beta, b = sol.x[:kb], sol.x[kb:]
        resid = res(sol.x)
    e = resid - resid.mean()
    var_e = float(e @ e / n)
    m3 = float(np.mean(e ** 3))
    hn_skew = np.sqrt(2.0 / np.pi) * (4.0 / np.pi - 1.0)
    sigma2_u = SIGMA2_U_FLOOR
    if m3 < 0:
        sigma2_u = max((-m3 / hn_skew) ** (2.0 / 3.0), SIGMA2_U_FLOOR)
    var_u = sigma2_u * (1.0 - 2.0 / np.pi)
    if var_u > 0.9 * var_e:
        sigma2_u = max(0.9 * var_e / (1.0 - 2.0 / np.pi), SIGMA2_U_FLOOR)
        var_u = sigma2_u * (1.0 - 2.0 / np.pi)
    vt = max(var_e - var_u, 1e-3 * max(var_e, 1e-12), 1e-10)
    beta = np.array(beta, dtype=float)
    if design is not None:
        beta[0] += np.sqrt(sigma2_u) * np.sqrt(2.0 / np.pi)

    if m:
        d, c_lower = stage1.d_eta, stage1.c_eta_lower
        tmp = ParamVector(beta=beta, delta=np.zeros(ds.z.shape[1]), sigma2_v=1.0,
                          sigma2_u=1.0, rho_v=np.zeros(m), rho_u=np.zeros(m),
                          gamma=stage1.gamma, d_eta=d, c_eta_lower=c_lower)
        sig_eta = tmp.sigma_eta
        sigma2_v = vt + float(b @ sig_eta @ b)
        rho_v = tmp.c_eta @ (d * b) / np.sqrt(sigma2_v)
        rho_v = _shrink_to_feasible(rho_v, tmp.c_eta_inv)
        rho_u = _shrink_to_feasible(rho_u_start * _unit(m, norm_index), tmp.c_eta_inv)
    else:
        d, c_lower = np.zeros(0), np.zeros(0)
        sigma2_v, rho_v, rho_u = vt, np.zeros(0), np.zeros(0)
    k = model.scaling.n_params(ds.z.shape[1])
    return ParamVector(beta=beta, delta=np.zeros(k), sigma2_v=sigma2_v, sigma2_u=sigma2_u,
                       rho_v=rho_v, rho_u=rho_u, gamma=stage1.gamma, d_eta=d,
                       c_eta_lower=c_lower, norm_index=norm_index).check()


# ---------------------------------------------------------------------------
# fitting

@dataclass
class FitOptions:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-5
    two_stage: bool = True
    multistart_count: int = 3
    rng_seed: int = 0
    rho_u_start: float = 0.05
    simplex_iterations: int = 0
    norm_index: int = 0

    def __post_init__(self):
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.max_iterations < 1 or self.multistart_count < 1:
            raise ValueError("max_iterations and multistart_count must be at least 1")


@dataclass
class FitResult:
    theta_hat: ParamVector
    loglik: float
    converged: bool
    iterations: int
    gradient_norm: float
    se: np.ndarray | None = None
    ci: np.ndarray | None = None
    notes: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    two_stage: bool = True
    fixed_rho_u: bool = False
    boundary: bool = False
    n: int = 0
    model: Model = DEFAULT_MODEL

    @property
    def mean_loglik(self):
        return self.loglik / self.n if self.n else float("nan")


def n_free_params(ds: Dataset, model: Model = DEFAULT_MODEL) -> int:
    m = ds.m
    q = ds.first_stage_design().shape[1] if m else 0
    return (model.frontier.n_params(ds.x.shape[1]) + model.scaling.n_params(ds.z.shape[1])
            + 2 + 2 * m + q * m + m + m * (m - 1) // 2)


class _Objective:
    """Negative mean log-likelihood over a Transform, with caching and an iterate trace."""

    def __init__(self, ds: Dataset, tr: Transform, model: Model, a=None, eta=None):
        self.ds, self.tr, self.model = ds, tr, model
        self.a, self.eta = a, eta
        self.n = ds.n
        self._last = (None, None, None)
        self.nfev = 0
        if not tr.joint:
            self.eta_part = float(np.sum(eta_logpdf(eta, tr.template))) if ds.m else 0.0

    def value(self, u):
        u = np.asarray(u, dtype=float)
        try:
            p = self.tr.decode(u)
            ll = float(np.sum(obs_loglik(self.ds, p, self.model, enforce_sign=False)))
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            return np.inf
        self.nfev += 1
        return -ll / self.n if np.isfinite(ll) else np.inf

    def value_and_grad(self, u):
        u = np.asarray(u, dtype=float)
        key = u.tobytes()
        if self._last[0] == key:
            return self._last[1], self._last[2]
        self.nfev += 1
        fr, sc = self.model.frontier, self.model.scaling
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                p = self.tr.decode(u)
                eps = self.ds.y - fr.value(self.ds.x, p.beta)
                ct = terms_from_parts(eps, self.a, sc.log_value(self.ds.z, p.delta), p)
                ll = float(np.sum(eps_cond_logpdf(ct))) + self.eta_part
                gn = sfa_gradient(ct, p, fr.jacobian(self.ds.x, p.beta),
                                  sc.grad_log(self.ds.z, p.delta)).sum(axis=0)
                grad = -self.tr.chain_sfa_gradient(u, p, gn) / self.n
        except (np.linalg.LinAlgError, ValueError):
            ll, grad = -np.inf, np.zeros_like(u)
        f = -ll / self.n if np.isfinite(ll) and np.all(np.isfinite(grad)) else np.inf
        if not np.isfinite(f):
            grad = np.zeros_like(u)
        self._last = (key, f, grad)
        return f, grad

    def gradient(self, u):
        if not self.tr.joint:
            return self.value_and_grad(u)[1]
        return _central_grad(self.value, u)

    def __call__(self, u):
        if self.tr.joint:
            return self.value(u)
        return self.value_and_grad(u)


def _central_grad(f, u, steps=None):
    u = np.asarray(u, dtype=float)
    g = np.zeros_like(u)
    for j in range(u.size):
        h = steps[j] if steps is not None else 1e-6 * max(1.0, abs(u[j]))
        e = np.zeros_like(u)
        e[j] = h
        g[j] = (f(u + e) - f(u - e)) / (2 * h)
    return g


def _run_optimizer(obj: _Objective, u0, opts: FitOptions):
    """BFGS (restarted on precision loss) from u0.  Returns (u, iterations, trace)."""
    trace = []
    u = np.asarray(u0, dtype=float)
    f0 = obj.value_and_grad(u)[0] if not obj.tr.joint else obj.value(u)
    trace.append(-f0 * obj.n)
    iters = 0
    if opts.simplex_iterations > 0:
        f = obj.value if obj.tr.joint else (lambda v: obj.value_and_grad(v)[0])
        res = optimize.minimize(f, u, method="Nelder-Mead",
                                options={"maxiter": opts.simplex_iterations, "xatol": 1e-8,
                                         "fatol": 1e-12})
        if res.fun <= f0:
            u = res.x
            trace.append(-res.fun * obj.n)
        iters += res.nit

    jac = True if not obj.tr.joint else (lambda v: _central_grad(obj.value, v))
    fun = obj if not obj.tr.joint else obj.value

    def cb(xk):
        fk = obj.value_and_grad(xk)[0] if not obj.tr.joint else obj.value(xk)
        trace.append(-fk * obj.n)

    for _ in range(4):
        remaining = opts.max_iterations - iters
        if remaining <= 0:
            break
        res = optimize.minimize(fun, u, jac=jac, method="BFGS", callback=cb,
                                options={"maxiter": remaining, "gtol": opts.gradient_tolerance})
        iters += res.nit
        if np.isfinite(res.fun) and res.fun <= (obj.value_and_grad(u)[0] if not obj.tr.joint
                                                else obj.value(u)):
            u = res.x
        if res.status == 0 or res.nit == 0:
            break
    return u, iters, trace


def _grad_norm(obj, u):
    return float(np.max(np.abs(obj.gradient(u)))) if u.size else 0.0


def _fit_once(ds, template, opts, model, fix_rho_u, a, eta, start):
    tr = Transform(template, joint=not opts.two_stage, fix_rho_u=fix_rho_u)
    obj = _Objective(ds, tr, model, a=a, eta=eta)
    u0 = tr.encode(start)
    u, iters, trace = _run_optimizer(obj, u0, opts)
    gnorm = _grad_norm(obj, u)
    p = tr.decode(u)
    ll = float(np.sum(obs_loglik(ds, p, model, enforce_sign=False)))
    return p, ll, iters, gnorm, trace


def _normalize_sign(p: ParamVector, notes: list) -> ParamVector:
    if p.m and p.rho_u[p.norm_index] < 0:
        notes.append("rho_u flipped to satisfy the sign normalization")
        return p.flipped()
    return p


def fit_mle(ds: Dataset, opts: FitOptions | None = None, model: Model = DEFAULT_MODEL,
            start: ParamVector | None = None, fixed_rho_u=None,
            stage1: FirstStage | None = None) -> FitResult:
    """Maximize the full log-likelihood.

    ``start`` warm-starts a single run (no multistart).  ``fixed_rho_u`` holds
    rho_u at the given value (restricted model).  In two-stage mode the first-stage
    parameters are fixed at their OLS values.
    """
    opts = opts or FitOptions()
    if ds.n <= n_free_params(ds, model):
        raise DataError(f"n = {ds.n} does not exceed the parameter count "
                        f"{n_free_params(ds, model)}")
    m = ds.m
    if stage1 is None:
        stage1 = first_stage_ols(ds)
    base = starting_values(ds, stage1, model, opts.rho_u_start, opts.norm_index)
    fix = fixed_rho_u is not None
    if fix:
        fixed_rho_u = np.asarray(fixed_rho_u, dtype=float).reshape(-1)
        base = base.replace(rho_u=fixed_rho_u)
        if not base.is_feasible(normalized=False):
            raise EstimationError("fixed rho_u is infeasible")

    if start is not None:
        starts = [start.replace(rho_u=fixed_rho_u) if fix else start]
        if opts.two_stage:
            # first-stage block always comes from OLS on this sample
            starts = [s.replace(gamma=stage1.gamma, d_eta=stage1.d_eta,
                                c_eta_lower=stage1.c_eta_lower) for s in starts]
            starts = [s if s.is_feasible(normalized=False) else base for s in starts]
    elif fix or m == 0:
        starts = [base]
    else:
        e = _unit(m, opts.norm_index)
        dirs = [opts.rho_u_start * e, 1e-3 * e, 0.5 * e]
        rng = np.random.default_rng(opts.rng_seed)
        while len(dirs) < opts.multistart_count:
            v = rng.normal(size=m)
            v[opts.norm_index] = abs(v[opts.norm_index])
            dirs.append(rng.uniform(0.05, 0.8) * v / np.linalg.norm(v))
        starts = []
        for r in dirs[:opts.multistart_count]:
            starts.append(base.replace(rho_u=_shrink_to_feasible(r, base.c_eta_inv)))

    template = starts[0]
    if opts.two_stage:
        eta = stage1.residuals
        _, a = control_function(ds, template)
    else:
        eta = a = None

    best = None
    for s in starts:
        try:
            res = _fit_once(ds, template, opts, model, fix, a, eta, s)
        except (np.linalg.LinAlgError, ValueError) as exc:
            log.debug("start failed: %s", exc)
            continue
        if not np.isfinite(res[1]):
            continue
        if best is None:
            best = res
            continue
        d = res[1] - best[1]
        if d > TIE_TOL or (abs(d) <= TIE_TOL and
                           np.linalg.norm(res[0].rho_u) < np.linalg.norm(best[0].rho_u)):
            best = res
    if best is None:
        raise EstimationError("every start failed")
    p, ll, iters, gnorm, trace = best
    notes = []
    if not fix:
        p = _normalize_sign(p, notes)
    p.check(normalized=not fix)
    converged = bool(gnorm < opts.gradient_tolerance)
    if not converged:
        notes.append(f"not converged: gradient norm {gnorm:.3g} after {iters} iterations")
    boundary = False
    if m and not fix:
        r = p.rho_u[p.norm_index]
        if r < BOUNDARY_TOL or r > 1 - BOUNDARY_TOL:
            boundary = True
            notes.append("boundary solution: rho_u on the edge of the normalized range")
    if p.sigma2_u <= SIGMA2_U_FLOOR * 1.0001:
        notes.append("sigma2_u at or below the starting floor")
    if not opts.two_stage:
        notes.append("joint maximization over all parameters")
    return FitResult(theta_hat=p, loglik=ll, converged=converged, iterations=iters,
                     gradient_norm=gnorm, notes=notes, trace=trace, two_stage=opts.two_stage,
                     fixed_rho_u=fix, boundary=boundary, n=ds.n, model=model)


def fit_exogenous(ds: Dataset, opts: FitOptions | None = None,
                  model: Model = DEFAULT_MODEL) -> FitResult:
    """Classical model with every regressor treated as exogenous (instruments unused)."""
    return fit_mle(ds.as_exogenous(), opts, model)


# ---------------------------------------------------------------------------
# restricted model without inefficiency

@dataclass
class GaussianFit:
    """sigma2_u = 0 limit: normal regression of y on the frontier and the control function."""

    beta: np.ndarray
    sigma2_v: float
    rho_v: np.ndarray
    loglik: float
    n: int


def fit_no_inefficiency(ds: Dataset, model: Model = DEFAULT_MODEL,
                        stage1: FirstStage | None = None) -> GaussianFit:
    """Closed-form ML of the model with U = 0, given the first-stage estimates."""
    if not hasattr(model.frontier, "design"):
        raise EstimationError("closed-form restricted fit needs a linear frontier")
    stage1 = stage1 or first_stage_ols(ds)
    design = model.frontier.design(ds.x)
    m = ds.m
    if m:
        tmp = ParamVector(beta=np.zeros(design.shape[1]), delta=np.zeros(ds.z.shape[1]),
                          sigma2_v=1.0, sigma2_u=1.0, rho_v=np.zeros(m), rho_u=np.zeros(m),
                          gamma=stage1.gamma, d_eta=stage1.d_eta,
                          c_eta_lower=stage1.c_eta_lower)
        a = (stage1.residuals / stage1.d_eta) @ tmp.c_eta_inv
        eta_ll = float(np.sum(eta_logpdf(stage1.residuals, tmp)))
    else:
        a, eta_ll = np.zeros((ds.n, 0)), 0.0
    coef = _lstsq(np.hstack([design, a]), ds.y)
    beta, c = coef[:design.shape[1]], coef[design.shape[1]:]
    resid = ds.y - np.hstack([design, a]) @ coef
    vt = float(resid @ resid / ds.n)
    if m:
        sigma2_v = vt + float(c @ tmp.c_eta_inv @ c)
        rho_v = c / np.sqrt(sigma2_v)
    else:
        sigma2_v, rho_v = vt, np.zeros(0)
    ll = -0.5 * ds.n * (LOG_2PI + np.log(vt) + 1.0) + eta_ll
    return GaussianFit(beta=beta, sigma2_v=sigma2_v, rho_v=rho_v, loglik=ll, n=ds.n)
