"""Command-line front end: fit, efficiency, test, simulate, plot-data."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ._parallel import worker_count
from .data import Dataset
from .density import composite_terms, folded_normal_cond_pdf, loglik
from .efficiency import efficiency_scores
from .errors import (ConfigError, DataError, DegenerateCurvatureError, EmptyDataError,
                     InfeasibleParameterError, SFAError)
from .estimation import FitOptions, FitResult, fit_mle
from .inference import (SubsampleOptions, lr_test_interior, lr_test_rho_u_zero,
                        lr_test_sigma_u_zero, subsample_ci, wald_ci, wald_se)
from .params import ParamVector
from .simulation import McCompute, McConfig, _jsonable, run_monte_carlo

log = logging.getLogger("endosfa")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_ERROR = 0, 2, 3, 4, 5
MODES = ("exogenous", "endo-rho-u-zero", "endo-full")


class UsageError(SFAError):
    code = "usage"


# ---------------------------------------------------------------------------
# configuration and data

@dataclass
class ModelConfig:
    y: str
    frontier: list
    environment: list = field(default_factory=list)
    instruments: list = field(default_factory=list)
    endogenous: list = field(default_factory=list)
    normalize: str | None = None
    fit: dict = field(default_factory=dict)
    inference: dict = field(default_factory=dict)

    def __post_init__(self):
        used = [self.y] + list(self.frontier) + list(self.environment)
        for name in self.endogenous:
            if name not in list(self.frontier) + list(self.environment):
                raise ConfigError(f"endogenous variable {name!r} is not a frontier or "
                                  "environmental variable")
        if self.endogenous:
            if self.normalize is None:
                if len(self.endogenous) != 1:
                    raise ConfigError("name exactly one normalized endogenous variable")
                self.normalize = self.endogenous[0]
            if self.normalize not in self.endogenous:
                raise ConfigError(f"normalized variable {self.normalize!r} is not endogenous")
            if len(self.instruments) < len(self.endogenous):
                raise ConfigError(f"{len(self.instruments)} instruments for "
                                  f"{len(self.endogenous)} endogenous variables")
        if len(set(used)) != len(used):
            raise ConfigError("a column is used twice among y, frontier and environment")

    @property
    def columns(self) -> list:
        return [self.y] + list(self.frontier) + list(self.environment) + list(self.instruments)

    def eta_order(self) -> list:
        return ([c for c in self.frontier if c in self.endogenous]
                + [c for c in self.environment if c in self.endogenous])

    def norm_index(self) -> int:
        return self.eta_order().index(self.normalize) if self.endogenous else 0

    def fit_options(self, two_stage=None) -> FitOptions:
        allowed = {"max_iterations", "gradient_tolerance", "two_stage", "multistart_count",
                   "rng_seed", "rho_u_start", "simplex_iterations"}
        extra = set(self.fit) - allowed
        if extra:
            raise ConfigError(f"unknown fit options: {sorted(extra)}")
        kw = dict(self.fit)
        if two_stage is not None:
            kw["two_stage"] = two_stage
        try:
            return FitOptions(norm_index=self.norm_index(), **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def load_config(path) -> ModelConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    for key in ("y", "frontier"):
        if key not in raw:
            raise ConfigError(f"config is missing {key!r}")
    known = set(ModelConfig.__dataclass_fields__)
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    raw = {k: (v if v is not None else []) if k in ("environment", "instruments", "endogenous")
           else v for k, v in raw.items()}
    for key in ("frontier", "environment", "instruments", "endogenous"):
        if key in raw and isinstance(raw[key], str):
            raw[key] = [raw[key]]
    return ModelConfig(**raw)


@dataclass
class DropReport:
    n_read: int
    n_used: int
    dropped_rows: list

    @property
    def n_dropped(self) -> int:
        return self.n_read - self.n_used

    def to_dict(self) -> dict:
        return {"n_read": self.n_read, "n_used": self.n_used, "n_dropped": self.n_dropped}


def _is_number(s: str) -> bool:
    try:
        return math.isfinite(float(s))
    except ValueError:
        return False


def ingest_csv(path, config: ModelConfig):
    """Read the used columns; rows with a missing or non-numeric used field are dropped.

    Returns (Dataset, DropReport, kept row numbers).
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyDataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if header and all(_is_number(h) for h in header if h):
        raise DataError(f"{path} has no header row")
    index = {}
    for j, h in enumerate(header):
        index.setdefault(h, j)
    for col in config.columns:
        if col not in index:
            raise ConfigError(f"column {col!r} not found in {path}")
    cols = [index[c] for c in config.columns]
    body = rows[1:]
    kept, values = [], []
    for i, r in enumerate(body):
        try:
            vals = [float(r[j]) for j in cols]
        except (ValueError, IndexError):
            continue
        if all(math.isfinite(v) for v in vals):
            kept.append(i)
            values.append(vals)
    report = DropReport(len(body), len(kept), sorted(set(range(len(body))) - set(kept)))
    if not kept:
        raise EmptyDataError(f"no usable rows in {path}")
    arr = np.array(values)
    ky = 1
    kx = len(config.frontier)
    kz = len(config.environment)
    ds = Dataset(y=arr[:, 0], x=arr[:, ky:ky + kx], z=arr[:, ky + kx:ky + kx + kz],
                 w=arr[:, ky + kx + kz:],
                 x_endog=[c in config.endogenous for c in config.frontier],
                 z_endog=[c in config.endogenous for c in config.environment],
                 y_name=config.y, x_names=tuple(config.frontier),
                 z_names=tuple(config.environment), w_names=tuple(config.instruments))
    return ds, report, kept


# ---------------------------------------------------------------------------
# artifacts

def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join("" if v is None else (v if isinstance(v, str) else repr(float(v)))
                              for v in r))
    return "\n".join(lines) + "\n"


def _num(v):
    return None if v is None or not np.isfinite(v) else float(v)


def _dataset_for_mode(ds: Dataset, mode: str) -> Dataset:
    return ds.as_exogenous() if mode == "exogenous" else ds


def _param_names(ds: Dataset, p: ParamVector) -> list:
    return p.names(beta_names=["const"] + list(ds.x_names),
                   delta_names=list(ds.z_names), eta_names=ds.eta_names,
                   design_names=ds.first_stage_names())


def fit_record(ds, fit: FitResult, mode, se=None, ci=None, ci_method=None, report=None,
               extra_notes=()) -> dict:
    p = fit.theta_hat
    names = _param_names(ds, p)
    est = p.to_vector()
    params = []
    for j, name in enumerate(names):
        params.append({"name": name, "estimate": float(est[j]),
                       "se": _num(se[j]) if se is not None else None,
                       "ci_low": _num(ci[j, 0]) if ci is not None else None,
                       "ci_high": _num(ci[j, 1]) if ci is not None else None})
    return {"mode": mode, "ci_method": ci_method, "n": ds.n, "loglik": fit.loglik,
            "converged": fit.converged, "iterations": fit.iterations,
            "gradient_norm": fit.gradient_norm, "boundary": fit.boundary,
            "two_stage": fit.two_stage, "notes": list(fit.notes) + list(extra_notes),
            "parameters": params, "theta": p.to_dict(),
            "data": report.to_dict() if report is not None else None}


# ---------------------------------------------------------------------------
# commands

def _mode(args) -> str:
    for m in MODES:
        if getattr(args, m.replace("-", "_"), False):
            return m
    return "endo-full"


def _fit(ds, cfg: ModelConfig, mode: str) -> FitResult:
    opts = cfg.fit_options()
    if mode == "exogenous":
        return fit_mle(ds.as_exogenous(), opts)
    if ds.m == 0:
        raise UsageError(f"--{mode} needs at least one endogenous variable")
    if mode == "endo-rho-u-zero":
        return fit_mle(ds, opts, fixed_rho_u=np.zeros(ds.m))
    return fit_mle(ds, opts)


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    ds, report, _ = ingest_csv(args.data, cfg)
    mode = _mode(args)
    fit = _fit(ds, cfg, mode)
    dsm = _dataset_for_mode(ds, mode)
    notes = [f"dropped {report.n_dropped} rows with missing values"] if report.n_dropped else []
    se = ci = None
    method = args.ci
    if method == "wald":
        try:
            se = wald_se(dsm, fit)
            ci = wald_ci(fit, se, float(cfg.inference.get("level", 0.95)))
            notes.append("standard errors from the joint numeric Hessian")
        except DegenerateCurvatureError as exc:
            notes.append(f"no Wald standard errors: {exc}")
            method = None
    elif method == "subsample":
        inf = cfg.inference
        so = SubsampleOptions(block_size=args.block_size or inf.get("block_size"),
                              n_subsamples=args.subsamples or inf.get("subsamples"),
                              level=float(inf.get("level", 0.95)), rng_seed=args.seed,
                              rate_exponent=float(inf.get("rate_exponent", 0.5)))
        try:
            ci = subsample_ci(dsm, fit, so, workers=worker_count()).intervals
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    rec = fit_record(dsm, fit, mode, se, ci, method, report, notes)
    prefix = Path(args.out_prefix)
    rows = [[r["name"], r["estimate"], r["se"], r["ci_low"], r["ci_high"]]
            for r in rec["parameters"]]
    write_text(prefix.with_name(prefix.name + ".fit.csv"),
               _csv_text(["parameter", "estimate", "se", "ci_low", "ci_high"], rows))
    write_text(prefix.with_name(prefix.name + ".fit.json"), dump_json(rec))
    return EXIT_OK


def _load_fit(path) -> tuple[dict, ParamVector]:
    try:
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read fit artifact {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"fit artifact {path} is not valid JSON: {exc}") from None
    return rec, ParamVector.from_dict(rec["theta"])


def kde_grid(values, n_grid: int = 512, lo=None, hi=None):
    """Gaussian kernel density with Silverman's bandwidth on a regular grid."""
    x = np.asarray(values, dtype=float)
    n = x.size
    sd = x.std(ddof=1) if n > 1 else 0.0
    iqr = np.subtract(*np.quantile(x, [0.75, 0.25])) if n > 1 else 0.0
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    h = 0.9 * spread * n ** (-0.2) if spread > 0 else 1e-3
    lo = x.min() - 4 * h if lo is None else lo
    hi = x.max() + 4 * h if hi is None else hi
    grid = np.linspace(lo, hi, n_grid)
    dens = np.exp(-0.5 * ((grid[:, None] - x[None, :]) / h) ** 2).sum(axis=1)
    dens /= n * h * np.sqrt(2 * np.pi)
    return grid, dens, h


def cmd_efficiency(args) -> int:
    cfg = load_config(args.config)
    ds, _, kept = ingest_csv(args.data, cfg)
    prefix = Path(args.out_prefix)
    fit_path = args.fit or prefix.with_name(prefix.name + ".fit.json")
    rec, p = _load_fit(fit_path)
    dsm = _dataset_for_mode(ds, rec.get("mode", "endo-full"))
    res = efficiency_scores(dsm, p)
    write_text(prefix.with_name(prefix.name + ".te.csv"),
               _csv_text(["row", "te"], [[str(i), s] for i, s in zip(kept, res.scores)]))
    summ = res.summary()
    keys = ["min", "q1", "median", "mean", "q3", "max"]
    write_text(prefix.with_name(prefix.name + ".te_summary.csv"),
               _csv_text(keys, [[summ[k] for k in keys]]))
    grid, dens, _ = kde_grid(res.scores)
    write_text(prefix.with_name(prefix.name + ".density.csv"),
               _csv_text(["te", "density"], list(zip(grid, dens))))
    return EXIT_OK


def _parse_r0(text) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except (AttributeError, ValueError):
        raise ConfigError(f"cannot parse --r0 {text!r}") from None


def cmd_test(args) -> int:
    cfg = load_config(args.config)
    mode = _mode(args)
    if mode == "exogenous" and args.test in ("rho0", "interior"):
        raise UsageError(f"--test {args.test} needs an endogenous model")
    ds, report, _ = ingest_csv(args.data, cfg)
    if args.test in ("rho0", "interior") and ds.m == 0:
        raise UsageError(f"--test {args.test} needs at least one endogenous variable")
    if args.test == "interior" and args.r0 is None:
        raise UsageError("--test interior needs --r0")
    r0 = _parse_r0(args.r0) if args.test == "interior" else None
    fit = _fit(ds, cfg, "exogenous" if mode == "exogenous" else "endo-full")
    dsm = _dataset_for_mode(ds, mode)
    if args.test == "rho0":
        res = lr_test_rho_u_zero(dsm, fit, n_draws=args.draws, seed=args.seed)
    elif args.test == "interior":
        try:
            res = lr_test_interior(dsm, fit, r0)
        except InfeasibleParameterError as exc:
            raise ConfigError(f"infeasible --r0: {exc}") from None
    else:
        res = lr_test_sigma_u_zero(dsm, fit)
    out = res.to_dict()
    out.update(test=args.test, mode=mode, n=dsm.n, data=report.to_dict())
    prefix = Path(args.out_prefix)
    write_text(prefix.with_name(prefix.name + ".test.json"), dump_json(out))
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.reps < 1:
        raise UsageError("--reps must be at least 1")
    flags = {s.strip() for s in (args.compute or "").split(",") if s.strip()}
    unknown = flags - {"wald", "subsample", "lr", "efficiency"}
    if unknown:
        raise UsageError(f"unknown --compute entries: {sorted(unknown)}")
    cfg = McConfig(setting=args.setting, n=args.n, replications=args.reps, seed=args.seed,
                   compute=McCompute(wald_ci="wald" in flags, subsample_ci="subsample" in flags,
                                     lr_tests="lr" in flags, efficiency="efficiency" in flags),
                   subsample=SubsampleOptions(block_size=args.block_size,
                                              n_subsamples=args.subsamples,
                                              rng_seed=args.seed),
                   workers=worker_count())
    rep = run_monte_carlo(cfg)
    prefix = Path(args.out_prefix)
    write_text(prefix.with_name(prefix.name + ".mc.csv"), rep.to_csv())
    write_text(prefix.with_name(prefix.name + ".mc.json"), rep.to_json())
    return EXIT_OK


def cmd_plot_data(args) -> int:
    prefix = Path(args.out_prefix)
    out = prefix.with_name(prefix.name + ".density.csv")
    if args.kind == "cond-density":
        # folded-normal density of U0 along eta = e * (1, ..., 1)
        if args.fit:
            _, p = _load_fit(args.fit)
        else:
            from .simulation import preset
            p = preset("s2")
        us = np.linspace(0.0, 8.0, 81)
        es = np.linspace(-3.0, 3.0, 61)
        rows = []
        for e in es:
            dens = folded_normal_cond_pdf(us, np.full(p.m, e), p)
            rows += [[e, u, d] for u, d in zip(us, dens)]
        write_text(out, _csv_text(["eta", "u", "density"], rows))
        return EXIT_OK
    cfg = load_config(args.config)
    ds, _, _ = ingest_csv(args.data, cfg)
    fit_path = args.fit or prefix.with_name(prefix.name + ".fit.json")
    rec, p = _load_fit(fit_path)
    dsm = _dataset_for_mode(ds, rec.get("mode", "endo-full"))
    if args.kind == "loglik-grid":
        if p.m != 2:
            raise UsageError("loglik-grid needs exactly two endogenous variables")
        grid = np.linspace(-0.95, 0.95, 39)
        rows = []
        for r1 in grid:
            for r2 in grid:
                q = p.replace(rho_u=[r1, r2])
                val = loglik(dsm, q, enforce_sign=False) if q.is_feasible(False) else None
                rows.append([r1, r2, val])
        write_text(out, _csv_text(["rho_u_1", "rho_u_2", "loglik"], rows))
    else:
        res = efficiency_scores(dsm, p)
        grid, dens, _ = kde_grid(res.scores)
        write_text(out, _csv_text(["te", "density"], list(zip(grid, dens))))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="endosfa", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("--config", required=True)
            p.add_argument("--data", required=True)
        p.add_argument("--out-prefix", required=True)
        p.add_argument("--seed", type=int, default=0)

    def modes(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--exogenous", action="store_true")
        g.add_argument("--endo-rho-u-zero", action="store_true")
        g.add_argument("--endo-full", action="store_true")

    p = sub.add_parser("fit", help="estimate the model")
    common(p)
    modes(p)
    p.add_argument("--ci", choices=["wald", "subsample"], default=None)
    p.add_argument("--block-size", type=_positive_int)
    p.add_argument("--subsamples", type=_positive_int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("efficiency", help="technical efficiency scores from a fit")
    common(p)
    p.add_argument("--fit", help="fit JSON (default <out-prefix>.fit.json)")
    p.set_defaults(func=cmd_efficiency)

    p = sub.add_parser("test", help="likelihood-ratio tests")
    common(p)
    modes(p)
    p.add_argument("--test", choices=["rho0", "interior", "sigma-u0"], required=True)
    p.add_argument("--r0", help="comma-separated rho_u under the null (interior test)")
    p.add_argument("--draws", type=_positive_int, default=2000)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("simulate", help="Monte Carlo replication")
    common(p, data=False)
    p.add_argument("--setting", choices=["s1", "s2"], default="s2")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=_positive_int, default=200)
    p.add_argument("--compute", default="", help="comma list of wald,subsample,lr,efficiency")
    p.add_argument("--block-size", type=_positive_int)
    p.add_argument("--subsamples", type=_positive_int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plot-data", help="plot-ready grids")
    p.add_argument("--kind", choices=["cond-density", "loglik-grid", "te-density"],
                   default="te-density")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--fit")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_plot_data)
    return ap


def _exit_code(exc: SFAError) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_ERROR


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "plot-data" and args.kind != "cond-density" and not (
            args.config and args.data):
        print("error[usage]: --config and --data are required for this plot", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except SFAError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except (ValueError, np.linalg.LinAlgError) as exc:
        print(f"error[error]: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
