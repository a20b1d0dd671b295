"""The full parameter vector of the endogenous frontier model."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, InfeasibleParameterError

# rho' C^{-1} rho must stay below 1 - FEASIBILITY_MARGIN
FEASIBILITY_MARGIN = 1e-9


def corr_from_lower(c_lower, m: int) -> np.ndarray:
    """Unit-diagonal symmetric matrix from its strict lower triangle (row-major)."""
    c_lower = np.asarray(c_lower, dtype=float)
    if c_lower.shape != (m * (m - 1) // 2,):
        raise DimensionError(f"expected {m * (m - 1) // 2} correlations, got {c_lower.shape}")
    c = np.eye(m)
    il = np.tril_indices(m, -1)
    c[il] = c_lower
    c[(il[1], il[0])] = c_lower
    return c


def lower_from_corr(c: np.ndarray) -> np.ndarray:
    return np.asarray(c)[np.tril_indices(c.shape[0], -1)].copy()


@dataclass(frozen=True)
class ParamVector:
    """theta = (beta, delta, sigma2_v, sigma2_u, rho_v, rho_u, gamma, d_eta, ve(C_eta)).

    ``m`` below is the number of endogenous coordinates (the length of eta).
    ``gamma`` has one column per endogenous variable and one row per column of
    the first-stage design.  ``norm_index`` names the coordinate of ``rho_u``
    restricted to [0, 1].
    """

    beta: np.ndarray
    delta: np.ndarray
    sigma2_v: float
    sigma2_u: float
    rho_v: np.ndarray
    rho_u: np.ndarray
    gamma: np.ndarray
    d_eta: np.ndarray
    c_eta_lower: np.ndarray
    norm_index: int = 0
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        f = lambda v: np.atleast_1d(np.asarray(v, dtype=float)).copy()
        object.__setattr__(self, "beta", f(self.beta))
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=float).reshape(-1).copy())
        object.__setattr__(self, "sigma2_v", float(self.sigma2_v))
        object.__setattr__(self, "sigma2_u", float(self.sigma2_u))
        m = np.asarray(self.rho_v).size
        object.__setattr__(self, "rho_v", np.asarray(self.rho_v, dtype=float).reshape(-1).copy())
        object.__setattr__(self, "rho_u", np.asarray(self.rho_u, dtype=float).reshape(-1).copy())
        object.__setattr__(self, "d_eta", np.asarray(self.d_eta, dtype=float).reshape(-1).copy())
        object.__setattr__(self, "c_eta_lower",
                           np.asarray(self.c_eta_lower, dtype=float).reshape(-1).copy())
        gamma = np.asarray(self.gamma, dtype=float)
        if gamma.ndim == 1:
            gamma = gamma.reshape(-1, m) if m else gamma.reshape(-1, 0)
        object.__setattr__(self, "gamma", gamma.copy())
        for name in ("rho_u", "d_eta"):
            if getattr(self, name).size != m:
                raise DimensionError(f"{name} has length {getattr(self, name).size}, expected {m}")
        if self.gamma.shape[1] != m:
            raise DimensionError(f"gamma has {self.gamma.shape[1]} columns, expected {m}")
        if self.c_eta_lower.size != m * (m - 1) // 2:
            raise DimensionError("c_eta_lower has the wrong length")
        if m and not 0 <= self.norm_index < m:
            raise DimensionError("norm_index out of range")
        for arr in (self.beta, self.delta, self.rho_v, self.rho_u, self.gamma,
                    self.d_eta, self.c_eta_lower):
            arr.setflags(write=False)

    # -- derived quantities -------------------------------------------------
    @property
    def m(self) -> int:
        return self.rho_v.size

    @property
    def c_eta(self) -> np.ndarray:
        if "c" not in self._cache:
            self._cache["c"] = corr_from_lower(self.c_eta_lower, self.m)
        return self._cache["c"]

    @property
    def c_eta_inv(self) -> np.ndarray:
        if "ci" not in self._cache:
            self._cache["ci"] = np.linalg.inv(self.c_eta) if self.m else np.zeros((0, 0))
        return self._cache["ci"]

    @property
    def sigma_eta(self) -> np.ndarray:
        return self.d_eta[:, None] * self.c_eta * self.d_eta[None, :]

    def quad_v(self) -> float:
        return float(self.rho_v @ self.c_eta_inv @ self.rho_v) if self.m else 0.0

    def quad_u(self) -> float:
        return float(self.rho_u @ self.c_eta_inv @ self.rho_u) if self.m else 0.0

    # -- invariants ---------------------------------------------------------
    def check(self, normalized: bool = True) -> "ParamVector":
        """Raise InfeasibleParameterError unless every invariant holds."""
        vals = np.concatenate([self.beta, self.delta, [self.sigma2_v, self.sigma2_u],
                               self.rho_v, self.rho_u, self.gamma.ravel(), self.d_eta,
                               self.c_eta_lower])
        if not np.all(np.isfinite(vals)):
            raise InfeasibleParameterError("non-finite parameter value")
        if not (self.sigma2_v > 0 and self.sigma2_u > 0):
            raise InfeasibleParameterError("variances must be strictly positive")
        if self.m == 0:
            return self
        if np.any(self.d_eta <= 0):
            raise InfeasibleParameterError("d_eta entries must be positive")
        try:
            np.linalg.cholesky(self.c_eta)
        except np.linalg.LinAlgError:
            raise InfeasibleParameterError("C_eta is not positive definite") from None
        if self.quad_v() >= 1 - FEASIBILITY_MARGIN:
            raise InfeasibleParameterError("rho_v' C^-1 rho_v >= 1")
        if self.quad_u() >= 1 - FEASIBILITY_MARGIN:
            raise InfeasibleParameterError("rho_u' C^-1 rho_u >= 1")
        if normalized and not 0.0 <= self.rho_u[self.norm_index] <= 1.0:
            raise InfeasibleParameterError(
                f"rho_u[{self.norm_index}] = {self.rho_u[self.norm_index]} outside [0, 1]")
        return self

    def is_feasible(self, normalized: bool = True) -> bool:
        try:
            self.check(normalized)
        except InfeasibleParameterError:
            return False
        return True

    # -- flat vector in natural coordinates ----------------------------------
    def blocks(self) -> list[tuple[str, int]]:
        return [("beta", self.beta.size), ("delta", self.delta.size), ("sigma2_v", 1),
                ("sigma2_u", 1), ("rho_v", self.m), ("rho_u", self.m),
                ("gamma", self.gamma.size), ("d_eta", self.m),
                ("c_eta_lower", self.c_eta_lower.size)]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.delta, [self.sigma2_v, self.sigma2_u],
                               self.rho_v, self.rho_u, self.gamma.ravel(), self.d_eta,
                               self.c_eta_lower])

    def from_vector(self, vec) -> "ParamVector":
        """New ParamVector with this one's shapes, filled from ``vec``."""
        vec = np.asarray(vec, dtype=float)
        out, pos = {}, 0
        for name, size in self.blocks():
            out[name] = vec[pos:pos + size]
            pos += size
        if pos != vec.size:
            raise DimensionError(f"vector has length {vec.size}, expected {pos}")
        return ParamVector(beta=out["beta"], delta=out["delta"],
                           sigma2_v=out["sigma2_v"][0], sigma2_u=out["sigma2_u"][0],
                           rho_v=out["rho_v"], rho_u=out["rho_u"],
                           gamma=out["gamma"].reshape(self.gamma.shape), d_eta=out["d_eta"],
                           c_eta_lower=out["c_eta_lower"], norm_index=self.norm_index)

    def names(self, beta_names=None, delta_names=None, eta_names=None,
              design_names=None) -> list[str]:
        m = self.m
        beta_names = beta_names or [f"beta_{j}" for j in range(self.beta.size)]
        delta_names = delta_names or [f"delta_{j + 1}" for j in range(self.delta.size)]
        eta_names = eta_names or [f"eta{j + 1}" for j in range(m)]
        design_names = design_names or [str(j) for j in range(self.gamma.shape[0])]
        out = list(beta_names) + list(delta_names) + ["sigma2_v", "sigma2_u"]
        out += [f"rho_v[{e}]" for e in eta_names] + [f"rho_u[{e}]" for e in eta_names]
        out += [f"gamma[{d},{e}]" for d in design_names for e in eta_names]
        out += [f"d_eta[{e}]" for e in eta_names]
        il = np.tril_indices(m, -1)
        out += [f"c_eta[{eta_names[i]},{eta_names[j]}]" for i, j in zip(*il)]
        return out

    def replace(self, **kw) -> "ParamVector":
        return replace(self, **kw)

    def flipped(self) -> "ParamVector":
        """Same parameters with the sign of every rho_u coordinate reversed."""
        return replace(self, rho_u=-self.rho_u)

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "delta": self.delta.tolist(),
                "sigma2_v": self.sigma2_v, "sigma2_u": self.sigma2_u,
                "rho_v": self.rho_v.tolist(), "rho_u": self.rho_u.tolist(),
                "gamma": self.gamma.tolist(), "d_eta": self.d_eta.tolist(),
                "c_eta_lower": self.c_eta_lower.tolist(), "norm_index": self.norm_index}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamVector":
        m = len(d["rho_v"])
        gamma = np.asarray(d["gamma"], dtype=float).reshape(-1, m) if m else \
            np.zeros((len(d["gamma"]), 0))
        return cls(beta=d["beta"], delta=d["delta"], sigma2_v=d["sigma2_v"],
                   sigma2_u=d["sigma2_u"], rho_v=d["rho_v"], rho_u=d["rho_u"], gamma=gamma,
                   d_eta=d["d_eta"], c_eta_lower=d["c_eta_lower"],
                   norm_index=d.get("norm_index", 0))
