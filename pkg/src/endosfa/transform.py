"""Maps between ParamVector and an unconstrained optimization vector.

* variances and eta scales: log
* rho vectors: rho = L v / sqrt(1 + |v|^2) with L L' = C_eta, so that
  rho'C^-1 rho = |v|^2 / (1 + |v|^2) < 1 everywhere
* C_eta: canonical partial correlations through tanh (always positive definite)
"""
from __future__ import annotations

import numpy as np

from .params import ParamVector, lower_from_corr


def corr_from_cpc(u: np.ndarray, m: int) -> np.ndarray:
    """Correlation matrix from unconstrained canonical partial correlations."""
    z = np.tanh(np.asarray(u, dtype=float))
    L = np.zeros((m, m))
    if m == 0:
        return L
    L[0, 0] = 1.0
    il = np.tril_indices(m, -1)
    zmat = np.zeros((m, m))
    zmat[il] = z
    for i in range(1, m):
        rem = 1.0
        for j in range(i):
            L[i, j] = zmat[i, j] * np.sqrt(rem)
            rem -= L[i, j] ** 2
        L[i, i] = np.sqrt(rem)
    c = L @ L.T
    np.fill_diagonal(c, 1.0)
    return 0.5 * (c + c.T)


def cpc_from_corr(c: np.ndarray) -> np.ndarray:
    m = c.shape[0]
    L = np.linalg.cholesky(c)
    zmat = np.zeros((m, m))
    for i in range(1, m):
        rem = 1.0
        for j in range(i):
            zmat[i, j] = L[i, j] / np.sqrt(rem)
            rem -= L[i, j] ** 2
    return np.arctanh(zmat[np.tril_indices(m, -1)])


# |v|^2 cap: keeps rho'C^-1 rho <= 1 - 1/(1 + V2_MAX), inside the feasibility margin
V2_MAX = 2.5e8
# log-variance cap, so degenerate samples stop at a finite edge of the closure
LOG_VAR_BOUND = 25.0


def _radial(v):
    """(r, dr/dv) of r = v / sqrt(1 + |v|^2) with |v| capped at sqrt(V2_MAX)."""
    v = np.asarray(v, dtype=float)
    v2 = float(v @ v)
    if v2 <= V2_MAX:
        s = np.sqrt(1.0 + v2)
        r = v / s
        return r, (np.eye(v.size) - np.outer(r, r)) / s
    # beyond the cap only the direction of v matters
    nv = np.sqrt(v2)
    r_max = np.sqrt(V2_MAX / (1.0 + V2_MAX))
    e = v / nv
    return r_max * e, r_max * (np.eye(v.size) - np.outer(e, e)) / nv


def rho_from_free(v, chol):
    return chol @ _radial(v)[0]


def free_from_rho(rho, chol):
    u = np.linalg.solve(chol, np.asarray(rho, dtype=float))
    return u / np.sqrt(1.0 - u @ u)


def rho_free_jacobian(v, chol):
    """d rho / d v."""
    return chol @ _radial(v)[1]


def _log_var(x):
    return float(np.clip(x, -LOG_VAR_BOUND, LOG_VAR_BOUND))


class Transform:
    """Free-parameter layout for one fitting problem.

    ``joint`` frees (gamma, d_eta, C_eta); otherwise they stay at the template values.
    ``fix_rho_u`` keeps rho_u at the template value.
    """

    def __init__(self, template: ParamVector, joint: bool = False, fix_rho_u: bool = False):
        self.template = template
        self.joint = joint
        self.fix_rho_u = fix_rho_u
        self.m = template.m
        self._chol = np.linalg.cholesky(template.c_eta) if self.m else np.zeros((0, 0))
        kb, kd = template.beta.size, template.delta.size
        self.sizes = [("beta", kb), ("delta", kd), ("log_sigma2_v", 1), ("log_sigma2_u", 1),
                      ("v_rho_v", self.m)]
        if not fix_rho_u:
            self.sizes.append(("v_rho_u", self.m))
        if joint:
            self.sizes += [("gamma", template.gamma.size), ("log_d_eta", self.m),
                           ("cpc", template.c_eta_lower.size)]
        self.dim = sum(s for _, s in self.sizes)

    def _split(self, u):
        out, pos = {}, 0
        for name, size in self.sizes:
            out[name] = u[pos:pos + size]
            pos += size
        return out

    def encode(self, p: ParamVector) -> np.ndarray:
        chol = np.linalg.cholesky(p.c_eta) if self.m else self._chol
        parts = [p.beta, p.delta, [np.log(p.sigma2_v)], [np.log(p.sigma2_u)],
                 free_from_rho(p.rho_v, chol) if self.m else []]
        if not self.fix_rho_u:
            parts.append(free_from_rho(p.rho_u, chol) if self.m else [])
        if self.joint:
            parts += [p.gamma.ravel(), np.log(p.d_eta),
                      cpc_from_corr(p.c_eta) if self.m else []]
        return np.concatenate([np.asarray(x, dtype=float).ravel() for x in parts])

    def decode(self, u) -> ParamVector:
        u = np.asarray(u, dtype=float)
        s = self._split(u)
        t = self.template
        if self.joint and self.m:
            c = corr_from_cpc(s["cpc"], self.m)
            chol = np.linalg.cholesky(c)
            gamma, d_eta, c_lower = s["gamma"].reshape(t.gamma.shape), np.exp(s["log_d_eta"]), \
                lower_from_corr(c)
        else:
            chol, gamma, d_eta, c_lower = self._chol, t.gamma, t.d_eta, t.c_eta_lower
        rho_v = rho_from_free(s["v_rho_v"], chol) if self.m else t.rho_v
        if self.fix_rho_u or not self.m:
            rho_u = t.rho_u
        else:
            rho_u = rho_from_free(s["v_rho_u"], chol)
        return ParamVector(beta=s["beta"], delta=s["delta"],
                           sigma2_v=np.exp(_log_var(s["log_sigma2_v"][0])),
                           sigma2_u=np.exp(_log_var(s["log_sigma2_u"][0])), rho_v=rho_v, rho_u=rho_u,
                           gamma=gamma, d_eta=d_eta, c_eta_lower=c_lower,
                           norm_index=t.norm_index)

    def chain_sfa_gradient(self, u, p: ParamVector, grad_nat: np.ndarray) -> np.ndarray:
        """Map the natural-coordinate gradient (beta, delta, s2v, s2u, rho_v, rho_u) to u.

        Valid for the non-joint layout only.
        """
        s = self._split(np.asarray(u, dtype=float))
        kb, kd, m = self.template.beta.size, self.template.delta.size, self.m
        inside = [abs(s[k][0]) < LOG_VAR_BOUND for k in ("log_sigma2_v", "log_sigma2_u")]
        out = [grad_nat[:kb + kd],
               [grad_nat[kb + kd] * p.sigma2_v * inside[0],
                grad_nat[kb + kd + 1] * p.sigma2_u * inside[1]]]
        pos = kb + kd + 2
        if m:
            out.append(rho_free_jacobian(s["v_rho_v"], self._chol).T @ grad_nat[pos:pos + m])
            if not self.fix_rho_u:
                out.append(rho_free_jacobian(s["v_rho_u"], self._chol).T
                           @ grad_nat[pos + m:pos + 2 * m])
        return np.concatenate([np.asarray(x, dtype=float).ravel() for x in out])
