"""Observation and dataset containers."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, DimensionError, EmptyDataError


def _as_matrix(a, n, name):
    if a is None:
        return np.zeros((n, 0))
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(n, -1) if a.size else np.zeros((n, 0))
    if a.ndim != 2 or a.shape[0] != n:
        raise DimensionError(f"{name} must have {n} rows, got shape {a.shape}")
    return a


def _flags(flags, ncol, name):
    if flags is None:
        return np.ones(ncol, dtype=bool)
    flags = np.asarray(flags, dtype=bool).reshape(-1)
    if flags.size != ncol:
        raise DimensionError(f"{name} needs {ncol} flags, got {flags.size}")
    return flags


@dataclass(frozen=True)
class Observation:
    """One row (y, x, z, w).  Endogeneity flags default to all True."""

    y: float
    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x_endog: np.ndarray | None = None
    z_endog: np.ndarray | None = None

    def __post_init__(self):
        for name in ("x", "z", "w"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        object.__setattr__(self, "y", float(self.y))
        vals = np.concatenate([[self.y], self.x, self.z, self.w])
        if not np.all(np.isfinite(vals)):
            raise DataError("observation has non-finite entries")

    def as_dataset(self) -> "Dataset":
        return Dataset(y=[self.y], x=self.x[None, :], z=self.z[None, :], w=self.w[None, :],
                       x_endog=self.x_endog, z_endog=self.z_endog, validate=False)


@dataclass(frozen=True)
class Dataset:
    """n observations of the outcome, frontier inputs, environmental variables and instruments.

    ``x`` enters the frontier, ``z`` enters the scaling function and ``w`` holds the
    excluded instruments.  ``x_endog``/``z_endog`` mark which columns are endogenous;
    exogenous columns act as their own instruments in the first stage.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x_endog: np.ndarray | None = None
    z_endog: np.ndarray | None = None
    y_name: str = "y"
    x_names: tuple = ()
    z_names: tuple = ()
    w_names: tuple = ()
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n = y.size
        if n == 0:
            raise EmptyDataError("dataset has no observations")
        x, z, w = (_as_matrix(self.x, n, "x"), _as_matrix(self.z, n, "z"),
                   _as_matrix(self.w, n, "w"))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x_endog", _flags(self.x_endog, x.shape[1], "x_endog"))
        object.__setattr__(self, "z_endog", _flags(self.z_endog, z.shape[1], "z_endog"))
        for attr, mat, pre in (("x_names", x, "x"), ("z_names", z, "z"), ("w_names", w, "w")):
            names = tuple(getattr(self, attr)) or tuple(f"{pre}{j + 1}" for j in range(mat.shape[1]))
            if len(names) != mat.shape[1]:
                raise DimensionError(f"{attr} has {len(names)} names for {mat.shape[1]} columns")
            object.__setattr__(self, attr, names)
        for arr in (y, x, z, w):
            arr.setflags(write=False)
        if self.validate:
            self.check()

    # -- shapes -------------------------------------------------------------
    @property
    def n(self) -> int:
        return self.y.size

    @property
    def m(self) -> int:
        """Number of endogenous coordinates (length of eta)."""
        return int(self.x_endog.sum() + self.z_endog.sum())

    @property
    def eta_names(self) -> list[str]:
        return ([nm for nm, e in zip(self.x_names, self.x_endog) if e]
                + [nm for nm, e in zip(self.z_names, self.z_endog) if e])

    def check(self) -> "Dataset":
        for name in ("y", "x", "z", "w"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{name} contains non-finite values")
        if self.m and self.w.shape[1] < self.m:
            raise DataError(f"{self.w.shape[1]} instruments for {self.m} endogenous variables")
        if self.x.shape[1] and self.z.shape[1]:
            xs = {self.x[:, j].tobytes() for j in range(self.x.shape[1])}
            zs = {self.z[:, j].tobytes() for j in range(self.z.shape[1])}
            if xs == zs:
                raise DataError("x and z must differ in at least one column")
        return self

    # -- derived matrices ---------------------------------------------------
    def endog_matrix(self) -> np.ndarray:
        """n x m matrix of the endogenous columns, x first then z."""
        return np.hstack([self.x[:, self.x_endog], self.z[:, self.z_endog]])

    def first_stage_design(self) -> np.ndarray:
        """[1, exogenous x, exogenous z, w], with exact duplicate columns removed."""
        cols = [np.ones(self.n)]
        cols += list(self.x[:, ~self.x_endog].T) + list(self.z[:, ~self.z_endog].T)
        cols += list(self.w.T)
        seen, out = set(), []
        for c in cols:
            key = c.tobytes()
            if key not in seen:
                seen.add(key)
                out.append(c)
        return np.column_stack(out)

    def first_stage_names(self) -> list[str]:
        cols = [("const", np.ones(self.n))]
        cols += [(nm, self.x[:, j]) for j, nm in enumerate(self.x_names) if not self.x_endog[j]]
        cols += [(nm, self.z[:, j]) for j, nm in enumerate(self.z_names) if not self.z_endog[j]]
        cols += [(nm, self.w[:, j]) for j, nm in enumerate(self.w_names)]
        seen, out = set(), []
        for nm, c in cols:
            if c.tobytes() not in seen:
                seen.add(c.tobytes())
                out.append(nm)
        return out

    def row(self, i: int) -> Observation:
        return Observation(self.y[i], self.x[i], self.z[i], self.w[i], self.x_endog, self.z_endog)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, y=self.y[idx], x=self.x[idx], z=self.z[idx], w=self.w[idx],
                       validate=False)

    def as_exogenous(self) -> "Dataset":
        """Same data with every column treated as exogenous and no instruments."""
        return replace(self, w=np.zeros((self.n, 0)), w_names=(),
                       x_endog=np.zeros(self.x.shape[1], bool),
                       z_endog=np.zeros(self.z.shape[1], bool))
