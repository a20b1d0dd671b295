"""Closed-form densities, log-likelihood, and the rho_u score/Hessian.

Notation (per observation):
    a      = C^-1 D^-1 eta                  whitened control function
    omega  = eps - sigma_v rho_v'a          noise residual after the control function
    zeta   = g sigma_u rho_u'a              location of U given eta
    S      = sigma_tilde_v^2 + sigma_tilde_u^2,   sigma = sqrt(S)
    lam    = sigma_tilde_u / sigma_tilde_v
    xi     = zeta / (lam sigma)
    A, B   = +-xi - lam omega / sigma
    psi    = Phi(A) + Phi(B) exp(2 omega zeta / S)

log f(eps | eta) = -log(2 pi)/2 - log(S)/2 - (omega + zeta)^2 / (2S) + log psi.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._stats import LOG_2PI, expit, log_ndtr, log_norm_pdf
from .data import Dataset, Observation
from .errors import ContractError, DimensionError
from .params import ParamVector


# ---------------------------------------------------------------------------
# pluggable frontier and scaling maps

class LinearFrontier:
    """m(x, beta) = beta_0 + x'beta_{1:}."""

    def n_params(self, p: int) -> int:
        return p + 1

    def value(self, x, beta):
        return beta[0] + x @ beta[1:]

    def jacobian(self, x, beta):
        return np.column_stack([np.ones(x.shape[0]), x])

    def design(self, x):
        """Regressor matrix when the frontier is linear in beta (None otherwise)."""
        return np.column_stack([np.ones(x.shape[0]), x])


class ExpScaling:
    """g(z, delta) = exp(z'delta); g(0, delta) = 1."""

    def n_params(self, k: int) -> int:
        return k

    def log_value(self, z, delta):
        return z @ delta

    def grad_log(self, z, delta):
        return z


@dataclass(frozen=True)
class Model:
    frontier: object = LinearFrontier()
    scaling: object = ExpScaling()


DEFAULT_MODEL = Model()


def scaling_g(z, delta, scaling=None) -> float:
    """g(z, delta); exp(z'delta) unless another scaling map is passed."""
    z = np.asarray(z, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if z.shape[-1:] != delta.shape:
        raise DimensionError(f"z has length {z.shape[-1:]}, delta has {delta.shape}")
    scaling = scaling or ExpScaling()
    return np.exp(scaling.log_value(z, delta))


# ---------------------------------------------------------------------------
# composite terms

@dataclass(frozen=True)
class CompositeTerms:
    """Per-observation intermediate quantities.  Arrays of length n, or scalars for one row."""

    eps: np.ndarray
    eta: np.ndarray
    a: np.ndarray
    g: np.ndarray
    sigma_tilde_u: np.ndarray
    sigma_tilde_v: float
    lam: np.ndarray
    sigma: np.ndarray
    omega: np.ndarray
    zeta: np.ndarray
    xi: np.ndarray
    log_phi_a: np.ndarray
    log_phi_b: np.ndarray
    log_psi: np.ndarray

    @property
    def lambda_(self):
        return self.lam

    @property
    def s2(self):
        return self.sigma * self.sigma

    @property
    def psi(self):
        return np.exp(self.log_psi)

    @property
    def arg_a(self):
        return self.xi - self.lam * self.omega / self.sigma

    @property
    def arg_b(self):
        return -self.xi - self.lam * self.omega / self.sigma

    @property
    def e_arg(self):
        return 2.0 * self.omega * self.zeta / self.s2

    def weight_a(self):
        """Phi(A) / psi, the share of the first branch.  Exactly 0.5 at rho_u = 0."""
        return expit(self.log_phi_a - self.log_phi_b - self.e_arg)

    def squeeze(self) -> "CompositeTerms":
        vals = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if isinstance(v, np.ndarray) and v.ndim >= 1 and v.shape[0] == 1:
                v = v[0]
                if v.ndim == 0:
                    v = float(v)
            vals[k] = v
        return CompositeTerms(**vals)


def _rows(obj):
    """Dataset view of an Observation or a Dataset."""
    if isinstance(obj, Observation):
        return obj.as_dataset(), True
    if isinstance(obj, Dataset):
        return obj, False
    raise TypeError(f"expected Observation or Dataset, got {type(obj).__name__}")


def control_function(ds: Dataset, p: ParamVector) -> tuple[np.ndarray, np.ndarray]:
    """(eta, a) with eta the first-stage residuals and a = C^-1 D^-1 eta."""
    design = ds.first_stage_design()
    if p.m != ds.m:
        raise DimensionError(f"parameters have {p.m} endogenous coordinates, data {ds.m}")
    if p.m == 0:
        return np.zeros((ds.n, 0)), np.zeros((ds.n, 0))
    if p.gamma.shape[0] != design.shape[1]:
        raise DimensionError(f"gamma has {p.gamma.shape[0]} rows, first-stage design has "
                             f"{design.shape[1]} columns")
    eta = ds.endog_matrix() - design @ p.gamma
    a = (eta / p.d_eta) @ p.c_eta_inv
    return eta, a


def terms_from_parts(eps, a, log_g, p: ParamVector, eta=None) -> CompositeTerms:
    """Composite terms from residuals, whitened eta and log g.  No feasibility check."""
    g = np.exp(log_g)
    sv, su = np.sqrt(p.sigma2_v), np.sqrt(p.sigma2_u)
    vt = p.sigma2_v * (1.0 - p.quad_v())
    ut = p.sigma2_u * (1.0 - p.quad_u()) * g * g
    s2 = vt + ut
    sigma = np.sqrt(s2)
    stv, stu = np.sqrt(vt), np.sqrt(ut)
    lam = stu / stv
    if p.m:
        omega = eps - sv * (a @ p.rho_v)
        zeta = g * su * (a @ p.rho_u)
    else:
        omega = np.asarray(eps, dtype=float).copy()
        zeta = np.zeros_like(omega)
    xi = zeta / (lam * sigma)
    t = lam * omega / sigma
    la, lb = log_ndtr(xi - t), log_ndtr(-xi - t)
    log_psi = np.logaddexp(la, lb + 2.0 * omega * zeta / s2)
    return CompositeTerms(eps=eps, eta=eta if eta is not None else a, a=a, g=g,
                          sigma_tilde_u=stu, sigma_tilde_v=float(stv), lam=lam, sigma=sigma,
                          omega=omega, zeta=zeta, xi=xi, log_phi_a=la, log_phi_b=lb,
                          log_psi=log_psi)


def composite_terms(obs, p: ParamVector, model: Model = DEFAULT_MODEL,
                    enforce_sign: bool = True) -> CompositeTerms:
    """Composite terms for an Observation (scalars) or a Dataset (arrays)."""
    p.check(normalized=enforce_sign)
    ds, single = _rows(obs)
    if p.beta.size != model.frontier.n_params(ds.x.shape[1]):
        raise DimensionError("beta length does not match the frontier")
    if p.delta.size != model.scaling.n_params(ds.z.shape[1]):
        raise DimensionError("delta length does not match the scaling map")
    eta, a = control_function(ds, p)
    eps = ds.y - model.frontier.value(ds.x, p.beta)
    log_g = model.scaling.log_value(ds.z, p.delta)
    ct = terms_from_parts(eps, a, log_g, p, eta=eta)
    return ct.squeeze() if single else ct


# ---------------------------------------------------------------------------
# densities

def folded_normal_cond_pdf(u, eta, p: ParamVector):
    """Density of U0 given eta: folded normal with location sigma_u rho_u'C^-1 D^-1 eta.

    Zero for u < 0.  Vectorized over ``u``.
    """
    p.check(normalized=False)
    u = np.asarray(u, dtype=float)
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if eta.size != p.m:
        raise DimensionError(f"eta has length {eta.size}, expected {p.m}")
    mu = np.sqrt(p.sigma2_u) * (p.rho_u @ p.c_eta_inv @ (eta / p.d_eta)) if p.m else 0.0
    s = np.sqrt(p.sigma2_u * (1.0 - p.quad_u()))
    dens = (np.exp(log_norm_pdf((u - mu) / s)) + np.exp(log_norm_pdf((u + mu) / s))) / s
    return np.where(u >= 0, dens, 0.0)


def eps_cond_logpdf(ct: CompositeTerms):
    """log f(eps | eta).

    The two branches are combined as a log-sum-exp with the common factor
    exp(-(omega^2 + zeta^2) / 2S) pulled out, which keeps every exponent bounded.
    """
    s2 = ct.sigma * ct.sigma
    h = ct.omega * ct.zeta / s2
    return (-0.5 * LOG_2PI - np.log(ct.sigma) - 0.5 * (ct.omega ** 2 + ct.zeta ** 2) / s2
            + np.logaddexp(ct.log_phi_a - h, ct.log_phi_b + h))


def mixture_weight_arg(ct: CompositeTerms, form: str = "variance"):
    """Argument c of the branch weights Phi(c), Phi(-c).

    ``form="variance"`` uses sigma_tilde_v^2 zeta / (sigma_tilde_u sigma^2);
    ``form="xi"`` uses xi / sqrt(1 + lam^2).  The two are algebraically equal.
    """
    if form == "variance":
        return ct.sigma_tilde_v ** 2 * ct.zeta / (ct.sigma_tilde_u * ct.sigma ** 2)
    if form == "xi":
        return ct.xi / np.sqrt(1.0 + ct.lam ** 2)
    raise ValueError(f"unknown form {form!r}")


def eps_cond_logpdf_mixture(ct: CompositeTerms, form: str = "variance"):
    """log f(eps | eta) via the two-component extended skew-normal mixture.

    Returns (logpdf, weight of the first component, log f1, log f2).
    """
    c = mixture_weight_arg(ct, form)
    s2 = ct.sigma * ct.sigma
    base = -0.5 * LOG_2PI - np.log(ct.sigma)
    log_f1 = base + ct.log_phi_a - log_ndtr(c) - 0.5 * (ct.omega + ct.zeta) ** 2 / s2
    log_f2 = base + ct.log_phi_b - log_ndtr(-c) - 0.5 * (ct.omega - ct.zeta) ** 2 / s2
    lf = np.logaddexp(log_ndtr(c) + log_f1, log_ndtr(-c) + log_f2)
    return lf, np.exp(log_ndtr(c)), log_f1, log_f2


def eta_logpdf(eta, p: ParamVector):
    """Multivariate normal log-density of eta with covariance D C D.  Vectorized over rows."""
    p.check(normalized=False)
    eta = np.asarray(eta, dtype=float)
    if eta.shape[-1:] != (p.m,):
        raise DimensionError(f"eta has trailing dimension {eta.shape[-1:]}, expected {p.m}")
    if p.m == 0:
        return np.zeros(eta.shape[:-1]) if eta.ndim > 1 else 0.0
    _, logdet = np.linalg.slogdet(p.c_eta)
    e = eta / p.d_eta
    quad = np.einsum("...i,ij,...j->...", e, p.c_eta_inv, e)
    return -0.5 * p.m * LOG_2PI - np.sum(np.log(p.d_eta)) - 0.5 * logdet - 0.5 * quad


def obs_loglik(obs, p: ParamVector, model: Model = DEFAULT_MODEL, enforce_sign: bool = True):
    """Full-information log-likelihood contribution(s): log f(eps|eta) + log f(eta)."""
    ct = composite_terms(obs, p, model, enforce_sign=enforce_sign)
    return eps_cond_logpdf(ct) + eta_logpdf(ct.eta, p)


def _obs_loglik_unnormalized(obs, p: ParamVector, model: Model = DEFAULT_MODEL):
    """obs_loglik without the rho_u[norm_index] >= 0 guard; used for symmetry checks."""
    return obs_loglik(obs, p, model, enforce_sign=False)


def loglik(ds: Dataset, p: ParamVector, model: Model = DEFAULT_MODEL,
           enforce_sign: bool = True) -> float:
    """Sample log-likelihood l_n(theta)."""
    return float(np.sum(obs_loglik(ds, p, model, enforce_sign)))


# ---------------------------------------------------------------------------
# derivatives

def _col(v):
    return np.asarray(v, dtype=float)[..., None]


def score_rho_u(ct: CompositeTerms, p: ParamVector):
    """Closed-form gradient of the log-likelihood contribution in rho_u.

    Written with the (omega - zeta) rearrangement of the density,
        (omega - zeta) dzeta / S - ds/(2S) + (omega - zeta)^2 ds / (2S^2)
        - 2 omega [kappa dh + w_A dv],
    where ds = grad sigma^2, dh = grad(lam / sigma), dv = grad(zeta / S),
    kappa = phi(A)/psi and w_A = Phi(A)/psi.  Every term carries either rho_u or
    (1 - 2 w_A), so the result is exactly zero at rho_u = 0.
    """
    m = p.m
    if m == 0:
        return np.zeros(np.shape(ct.omega) + (0,))
    g = _col(ct.g)
    k2 = p.sigma2_u * g * g                          # sigma_u^2 g^2
    ci_rho = p.c_eta_inv @ p.rho_u
    s2 = _col(ct.sigma) ** 2
    sig = _col(ct.sigma)
    om, ze, lam = _col(ct.omega), _col(ct.zeta), _col(ct.lam)
    stu, stv = _col(ct.sigma_tilde_u), ct.sigma_tilde_v

    ds = -2.0 * k2 * ci_rho
    dzeta = g * np.sqrt(p.sigma2_u) * np.asarray(ct.a)
    dlam = -k2 * ci_rho / (stu * stv)
    dh = dlam / sig - lam * ds / (2.0 * sig ** 3)
    u_z = dzeta / s2

    la, lb = np.asarray(ct.log_phi_a), np.asarray(ct.log_phi_b)
    arg_a = np.asarray(ct.arg_a)
    kappa = _col(np.exp(log_norm_pdf(arg_a) - ct.log_psi))
    w_a = _col(expit(la - lb - np.asarray(ct.e_arg)))
    diff = om - ze
    # grad(zeta/S) = u_z - zeta ds/S^2; the u_z part is grouped with (omega - zeta)
    # so that (omega - 2 omega w_A) cancels exactly when w_A = 1/2
    return (u_z * (diff - 2.0 * om * w_a) + 2.0 * om * w_a * ze * ds / s2 ** 2
            - 0.5 * ds / s2 + 0.5 * diff ** 2 * ds / s2 ** 2 - 2.0 * om * kappa * dh)


def hessian_rho_u_at_zero(ct: CompositeTerms, p: ParamVector):
    """Closed-form Hessian of the log-likelihood contribution in rho_u at rho_u = 0.

    With K = sigma_u^2 g^2, z = g sigma_u a, t = lam omega / sigma and the inverse
    Mills ratio r = phi(-t)/Phi(-t):

        H = [K/S - K omega^2/S^2 + omega r lam/sigma - omega r lam K/sigma^3] C^-1
            + [-1/S - omega r/(lam sigma^3) + omega^2/S^2] z z'

    Both brackets have zero mean at the truth, which is the second-order
    identification property.  The result is symmetric by construction.
    """
    if np.any(p.rho_u != 0):
        raise ContractError("hessian_rho_u_at_zero requires rho_u = 0")
    m = p.m
    shape = np.shape(ct.omega)
    if m == 0:
        return np.zeros(shape + (0, 0))
    ci = 0.5 * (p.c_eta_inv + p.c_eta_inv.T)
    om = np.asarray(ct.omega, dtype=float)
    g = np.asarray(ct.g, dtype=float)
    k2 = p.sigma2_u * g * g
    s2 = np.asarray(ct.sigma, dtype=float) ** 2
    sig = np.sqrt(s2)
    lam = np.asarray(ct.lam, dtype=float)
    t = lam * om / sig
    r = np.exp(log_norm_pdf(-t) - log_ndtr(-t))
    # coefficient on C^-1 and on z z'
    c_ci = (k2 / s2 - k2 * om ** 2 / s2 ** 2
            + om * r * lam / sig - om * r * lam * k2 / sig ** 3)
    c_zz = -1.0 / s2 - om * r / (lam * sig ** 3) + om ** 2 / s2 ** 2
    z = (g * np.sqrt(p.sigma2_u))[..., None] * np.asarray(ct.a)
    zz = z[..., :, None] * z[..., None, :]
    return c_ci[..., None, None] * ci + c_zz[..., None, None] * zz


def vech(mat):
    """Half-vectorization (lower triangle, column-major order) over the last two axes."""
    mat = np.asarray(mat)
    m = mat.shape[-1]
    rows, cols = [], []
    for j in range(m):
        for i in range(j, m):
            rows.append(i)
            cols.append(j)
    return mat[..., rows, cols]


def sfa_gradient(ct: CompositeTerms, p: ParamVector, jac_beta, grad_log_g):
    """Per-observation gradient of log f(eps|eta) in (beta, delta, sigma2_v, sigma2_u, rho_v, rho_u).

    ``jac_beta`` is d m(x, beta)/d beta (n x dim beta) and ``grad_log_g`` is
    d log g / d delta (n x dim delta).  Returns an n x P matrix in that order.
    """
    om, ze, s2, sig, lam = ct.omega, ct.zeta, ct.sigma ** 2, ct.sigma, ct.lam
    w_b = expit(ct.log_phi_b + ct.e_arg - ct.log_phi_a)
    kappa = np.exp(log_norm_pdf(ct.arg_a) - ct.log_psi)
    opz = om + ze
    d_om = -opz / s2 - 2.0 * kappa * lam / sig + 2.0 * w_b * ze / s2
    d_ze = -opz / s2 + 2.0 * w_b * om / s2
    d_s = (-0.5 / s2 + 0.5 * opz ** 2 / s2 ** 2 + kappa * lam * om / sig ** 3
           - 2.0 * w_b * om * ze / s2 ** 2)
    d_lam = -2.0 * kappa * om / sig
    vt = ct.sigma_tilde_v ** 2
    ut = ct.sigma_tilde_u ** 2
    g_vt = d_s - d_lam * lam / (2.0 * vt)
    g_ut = d_s + d_lam * lam / (2.0 * ut)

    sv, su = np.sqrt(p.sigma2_v), np.sqrt(p.sigma2_u)
    a = ct.a
    g = ct.g
    cols = [(-d_om)[:, None] * jac_beta,
            (d_ze * ze + 2.0 * g_ut * ut)[:, None] * grad_log_g,
            (-d_om * (a @ p.rho_v if p.m else 0.0) / (2.0 * sv) + g_vt * (1.0 - p.quad_v()))[:, None],
            (d_ze * ze / (2.0 * p.sigma2_u) + g_ut * ut / p.sigma2_u)[:, None]]
    if p.m:
        ci = p.c_eta_inv
        cols.append(-sv * d_om[:, None] * a - 2.0 * p.sigma2_v * g_vt[:, None] * (ci @ p.rho_v))
        cols.append(su * (d_ze * g)[:, None] * a
                    - 2.0 * p.sigma2_u * (g_ut * g * g)[:, None] * (ci @ p.rho_u))
    return np.hstack(cols)
