"""Convergence experiments across a family of lattice periods.

For every period ``eps`` the harness builds the perforated Dirichlet
Laplacian and the hole-free operator ``-Delta + q`` on one common grid and
measures how far apart they are: resolvent differences, low eigenvalues and
the heat semigroup.  Measurements are exact operator norms on small grids
and lower bounds over a fixed bank of right-hand sides otherwise.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np

from .capacity import capacity_ball_analytic
from .closeness import FormPair, IdentificationSet, build_J1, verify_resolvent_bound
from .exceptions import ConfigError, CrushedIceError, DomainError, SizeLimitError
from .geometry import DomainSpec, HoleShape, check_size_rule, place_holes
from .grid import CartesianGrid, NodeMask, assemble_laplacian, restriction_matrix
from .linalg import (CG_TOL, EIG_TOL, EXP_TOL, SeparableOperator, ShiftedSolver,
                     expm_action, lowest_eigenpairs)

__all__ = [
    "ExperimentConfig",
    "ConvergenceRecord",
    "RateFit",
    "delta_formula",
    "hole_radius",
    "rhs_bank",
    "run_family",
    "resolvent_experiment",
    "semigroup_experiment",
    "eigenvalue_experiment",
    "rate_fit",
    "closed_form_box_eigenvalues",
    "records_to_csv",
    "write_outputs",
    "CSV_COLUMNS",
    "failures",
]


def delta_formula(n: int, epsilon: float, d: float, cap: float, q: float,
                  beta: Optional[float] = None, C: float = 1.0) -> float:
    """Predicted closeness ``|cap eps^-n - q| + C r_n(eps)``.

    ``r_n`` is ``eps |ln eps|`` (n = 2), ``eps`` (n = 3), ``eps**(1 - beta)``
    (n = 4, needs ``0 < beta < 1``) and ``max(eps, d/eps)`` (n >= 5).
    """
    if not (epsilon > 0 and d > 0):
        raise DomainError("epsilon and d must be positive")
    first = abs(cap / epsilon ** n - q)
    if n == 2:
        rate = epsilon * abs(math.log(epsilon))
    elif n == 3:
        rate = epsilon
    elif n == 4:
        if beta is None:
            raise ConfigError("n = 4 needs an exponent beta in (0, 1)")
        if not 0 < beta < 1:
            raise ConfigError("beta must lie in (0, 1)")
        rate = epsilon ** (1 - beta)
    elif n >= 5:
        rate = max(epsilon, d / epsilon)
    else:
        raise DomainError("dimension must be at least 2")
    return first + C * rate


@dataclass(frozen=True)
class ExperimentConfig:
    """Family of perforated boxes indexed by the period ``eps``.

    The hole radius is ``d = d_c * eps**d_power`` (``d_power`` defaults to
    ``n/(n-2)``); for n = 2 without ``d_power`` it is ``exp(-1/(d_c eps**2))``.  The grid is
    refined to spacing ``d / h_factor`` around each hole and coarsened
    geometrically (``grading``) up to ``h_coarse``; with ``grid="uniform"``
    the whole box uses ``d / h_factor``.  ``box`` defaults to the unit box.
    """

    n: int = 3
    box: Optional[tuple] = None
    eps: tuple = (0.5, 1 / 3, 0.25)
    d_c: float = 1.0
    d_power: Optional[float] = None
    kappa: float = 0.1
    q_mode: str = "effective"
    q_target: Optional[float] = None
    grid: str = "graded"
    h_factor: float = 8.0
    h_coarse: float = 1 / 32
    grading: float = 1.5
    core_factor: float = 1.25
    beta: Optional[float] = None
    delta_C: float = 1.0
    heuristic: bool = False
    times: tuple = (0.1, 1.0)
    k_eig: int = 5
    bank_random: int = 9
    bank_sines: int = 10
    semigroup_bank: int = 4
    seed: int = 0
    dense_limit: int = 2000
    max_unknowns: int = 5_000_000
    cg_tol: float = CG_TOL
    eig_tol: float = EIG_TOL
    exp_tol: float = EXP_TOL

    def __post_init__(self):
        box = ((0.0, 1.0),) * self.n if self.box is None else self.box
        object.__setattr__(self, "box", tuple(tuple(float(v) for v in b) for b in box))
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        if self.n < 2 or self.n > 4:
            raise ConfigError("n must be 2, 3 or 4")
        if len(self.box) != self.n:
            raise ConfigError("box needs one extent per dimension")
        if not self.eps:
            raise ConfigError("eps list is empty")
        if self.n == 4 and self.beta is None:
            raise ConfigError("n = 4 needs an exponent beta in (0, 1)")
        if self.q_mode not in ("effective", "fixed"):
            raise ConfigError("q_mode must be 'effective' or 'fixed'")
        if self.q_mode == "fixed" and self.q_target is None:
            raise ConfigError("q_mode 'fixed' needs q_target")
        if self.grid not in ("graded", "uniform"):
            raise ConfigError("grid must be 'graded' or 'uniform'")
        if self.h_factor < 8 and not self.heuristic:
            raise ConfigError("h must not exceed d/8 (set heuristic to relax)")
        if not 1 <= self.k_eig <= 10:
            raise ConfigError("k_eig must lie in [1, 10]")
        if self.bank_random + self.bank_sines + 1 < 20:
            raise ConfigError("the right-hand-side bank needs at least 20 vectors")
        if any(t < 0 for t in self.times):
            raise ConfigError("times must be nonnegative")
        for e in self.eps:
            d = hole_radius(self, e)
            if d <= 0 or d >= e:
                raise ConfigError(f"hole radius {d} is not in (0, eps) for eps={e}")
            rule = check_size_rule(self.n, e, d)
            if not rule.satisfied and not self.heuristic:
                raise ConfigError(f"eps={e}: size rule violated (ratio {rule.margin:.3g} > 1)")
            # raises LayoutError when the security distance fails
            place_holes(DomainSpec(self.n, self.box, e), HoleShape.ball(d), self.kappa)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        data = dict(data)
        if "n" in data and "box" not in data:
            data["box"] = tuple((0.0, 1.0) for _ in range(int(data["n"])))
        for key in ("box", "eps", "times"):
            if key in data:
                v = data[key]
                data[key] = tuple(tuple(b) for b in v) if key == "box" else tuple(v)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["box"] = [list(b) for b in self.box]
        out["eps"] = list(self.eps)
        out["times"] = list(self.times)
        return out


def hole_radius(cfg: ExperimentConfig, eps: float) -> float:
    if cfg.n == 2 and cfg.d_power is None:
        return math.exp(-1.0 / (cfg.d_c * eps ** 2))
    p = cfg.d_power if cfg.d_power is not None else cfg.n / (cfg.n - 2)
    return cfg.d_c * eps ** p


def closed_form_box_eigenvalues(box, q: float, k: int) -> np.ndarray:
    """Lowest ``k`` eigenvalues of ``-Delta + q`` with Dirichlet data on a box."""
    L = [hi - lo for lo, hi in box]
    vals = sorted(q + sum((math.pi * m / l) ** 2 for m, l in zip(ms, L))
                  for ms in itertools.product(range(1, k + 1), repeat=len(L)))
    return np.array(vals[:k])


def _sine_modes(n, count):
    modes = sorted(np.ndindex(*(count,) * n), key=lambda m: (sum((i + 1) ** 2 for i in m), m))
    return [tuple(i + 1 for i in m) for m in modes[:count]]


def rhs_bank(cfg: ExperimentConfig, grid: CartesianGrid) -> List[tuple]:
    """Named right-hand sides on the hole-free grid, in nodal values.

    The bank is: the constant 1; the ``bank_sines`` lowest Dirichlet sine
    modes of the box; ``bank_random`` seeded white-noise fields.  Every
    vector is normalized to unit weighted norm.
    """
    pts = grid.points()
    w = grid.weights()
    out = [("const", np.ones(len(pts)))]
    for m in _sine_modes(cfg.n, cfg.bank_sines):
        v = np.ones(len(pts))
        for a, (k, (lo, hi)) in enumerate(zip(m, cfg.box)):
            v = v * np.sin(math.pi * k * (pts[:, a] - lo) / (hi - lo))
        out.append(("sin" + "".join(str(k) for k in m), v))
    rng = np.random.default_rng(cfg.seed)
    for j in range(cfg.bank_random):
        out.append((f"noise{j}", rng.standard_normal(len(pts))))
    return [(name, v / math.sqrt(np.sum(w * v * v))) for name, v in out]


@dataclass
class ConvergenceRecord:
    eps: float
    d: float
    h: float
    n_holes: int
    unknowns_full: int
    unknowns_perf: int
    cap: float
    q: float
    cap_term: float
    delta: float
    measurement: str = ""
    resolvent: float = math.nan
    extension: float = math.nan
    dense_delta: float = math.nan
    dense_bounds_ok: Optional[bool] = None
    eig_perf: list = field(default_factory=list)
    eig_hom: list = field(default_factory=list)
    eig_closed: list = field(default_factory=list)
    semigroup: dict = field(default_factory=dict)
    clean: bool = True
    error: str = ""
    solver: dict = field(default_factory=dict)

    @property
    def gaps(self):
        return [abs(a - b) for a, b in zip(self.eig_perf, self.eig_hom)]

    @property
    def normalized_gaps(self):
        return [g / ((a + 1) * (b + 1) * self.delta)
                for g, a, b in zip(self.gaps, self.eig_perf, self.eig_hom)]

    @property
    def mu_gaps(self):
        return [abs(1 / (a + 1) - 1 / (b + 1)) for a, b in zip(self.eig_perf, self.eig_hom)]

    def c_t(self, t):
        return self.semigroup[t] / self.delta


def _family_member(cfg: ExperimentConfig, eps: float):
    spec = DomainSpec(cfg.n, cfg.box, eps)
    d = hole_radius(cfg, eps)
    layout = place_holes(spec, HoleShape.ball(d), cfg.kappa)
    h = d / cfg.h_factor
    if cfg.grid == "uniform":
        grid = CartesianGrid.uniform(cfg.box, _uniform_step(cfg.box, h))
        h = grid.h
    else:
        centers = [sorted(set(np.round(layout.centers[:, a], 15))) for a in range(cfg.n)]
        grid = CartesianGrid.graded(cfg.box, centers, h, max(cfg.h_coarse, h),
                                    cfg.core_factor * d, cfg.grading)
        if layout.n_holes == 0:
            h = grid.min_spacing
    if grid.size > cfg.max_unknowns:
        raise SizeLimitError(f"eps={eps}: grid has {grid.size} nodes, above max_unknowns")
    return layout, grid, d, h


def _uniform_step(box, h):
    L = [hi - lo for lo, hi in box]
    m = max(int(math.ceil(max(L) / h - 1e-9)), 2)
    step = max(L) / m
    if any(abs(l / step - round(l / step)) > 1e-9 for l in L):
        raise ConfigError("box extents must be commensurate for a uniform grid")
    return step


def _measure(cfg: ExperimentConfig, eps: float, what: Sequence[str]) -> ConvergenceRecord:
    n = cfg.n
    try:
        layout, grid, d, h = _family_member(cfg, eps)
    except CrushedIceError as exc:
        d = hole_radius(cfg, eps)
        cap = capacity_ball_analytic(n, d)
        q = cap / eps ** n if cfg.q_mode == "effective" else float(cfg.q_target)
        rec = ConvergenceRecord(eps, d, d / cfg.h_factor, 0, 0, 0, cap, q,
                                abs(cap / eps ** n - q),
                                delta_formula(n, eps, d, cap, q, cfg.beta, cfg.delta_C))
        rec.clean = False
        rec.error = f"{type(exc).__name__}: {exc}"
        return rec
    cap = capacity_ball_analytic(n, d)
    q = cap / eps ** n if cfg.q_mode == "effective" else float(cfg.q_target)
    cap_term = abs(cap / eps ** n - q)
    delta = delta_formula(n, eps, d, cap, q, cfg.beta, cfg.delta_C)
    full = NodeMask.full(grid)
    perf = NodeMask.from_layout(grid, layout)
    rec = ConvergenceRecord(eps, d, h, layout.n_holes, full.N, perf.N, cap, q, cap_term, delta)
    try:
        Ae = assemble_laplacian(perf, 0.0)
        hom = SeparableOperator(grid, q)
        J = restriction_matrix(full, perf)
        keep = perf.active  # full mask is all-active, so node ids coincide
        dense = max(full.N, perf.N) <= cfg.dense_limit
        rec.measurement = "dense" if dense else "bank-lower-bound"
        if "resolvent" in what:
            _resolvent(cfg, rec, layout, grid, full, perf, Ae, hom, keep, dense)
        if "eigen" in what:
            _eigen(cfg, rec, Ae, hom, dense)
        if "semigroup" in what:
            _semigroup(cfg, rec, grid, Ae, hom, keep, dense)
    except CrushedIceError as exc:
        rec.clean = False
        rec.error = f"{type(exc).__name__}: {exc}"
    return rec


def _resolvent(cfg, rec, layout, grid, full, perf, Ae, hom, keep, dense):
    if dense:
        A = assemble_laplacian(full, hom.q)
        pair = FormPair(A.dense(), Ae.dense(), full.weights(), perf.weights())
        J = restriction_matrix(full, perf)
        j1 = build_J1(layout, full, perf, min_resolution=cfg.h_factor / 2)
        ids = IdentificationSet(J, J.T, j1.matrix(), J.T)
        report = verify_resolvent_bound(pair, ids, dense_limit=cfg.dense_limit)
        rec.resolvent = report.lhs["resolvent"]
        rec.extension = report.lhs["extension"]
        rec.dense_delta = report.delta
        rec.dense_bounds_ok = report.ok
        return
    sw = np.sqrt(grid.weights())
    solver = ShiftedSolver(Ae.matrix, 1.0, cfg.cg_tol, cfg.dense_limit)
    res, ext = 0.0, 0.0
    for name, f in rhs_bank(cfg, grid):
        x = sw * f
        u_hom = hom.apply(lambda lam: 1 / (lam + 1), x)
        u_perf = solver.solve(x[keep])
        res = max(res, float(np.linalg.norm(u_perf - u_hom[keep])))
        jf = np.linalg.norm(x[keep])
        if jf > 0:
            padded = np.zeros_like(x)
            padded[keep] = x[keep]
            back = np.zeros_like(x)
            back[keep] = u_perf
            ext = max(ext, float(np.linalg.norm(back - hom.apply(lambda lam: 1 / (lam + 1), padded)) / jf))
    rec.resolvent, rec.extension = res, ext
    reps = solver.reports
    rec.solver["cg_iterations_max"] = max((r.iterations for r in reps), default=0)
    rec.solver["cg_residual_max"] = max((r.residual for r in reps), default=0.0)
    if rec.solver["cg_residual_max"] > cfg.cg_tol:
        rec.clean = False


def _eigen(cfg, rec, Ae, hom, dense):
    k = min(cfg.k_eig, Ae.N)
    perf = lowest_eigenpairs(Ae, k, tol=cfg.eig_tol, seed=cfg.seed,
                             method="dense" if dense else "lobpcg", dense_limit=cfg.dense_limit)
    hom_vals, _ = hom.lowest(k, vectors=False)
    rec.eig_perf = [float(v) for v in perf.eigenvalues]
    rec.eig_hom = [float(v) for v in hom_vals]
    rec.eig_closed = [float(v) for v in closed_form_box_eigenvalues(cfg.box, hom.q, k)]
    rec.solver["eig_method"] = perf.method
    rec.solver["eig_residual_max"] = float(np.max(perf.residuals))


def _semigroup(cfg, rec, grid, Ae, hom, keep, dense):
    sw = np.sqrt(grid.weights())
    bank = rhs_bank(cfg, grid)[: cfg.semigroup_bank]
    ts = list(cfg.times)
    worst = {t: 0.0 for t in ts}
    shift = SeparableOperator(grid, 0.0).min_eigenvalue()
    if dense:
        lam, Q = np.linalg.eigh(Ae.dense())
    else:
        tpos = [t for t in ts if t > 0]
        pole = 10.0 / min(tpos) if tpos else 1.0
        solver = ShiftedSolver(Ae.matrix, pole - shift, cfg.cg_tol, cfg.dense_limit)
    for name, f in bank:
        u = (sw * f)[keep]
        nu = np.linalg.norm(u)
        if nu == 0:
            continue
        u = u / nu
        if dense:
            c = Q.T @ u
            perf_vals = [u.copy() if t == 0 else Q @ (np.exp(-t * lam) * c) for t in ts]
        else:
            perf_vals = expm_action(Ae.matrix, u, ts, tol=cfg.exp_tol, shift=shift,
                                    pole=pole, solve=solver)
        padded = np.zeros(grid.size)
        padded[keep] = u
        for t, y in zip(ts, perf_vals):
            if t == 0:
                hv = padded
            else:
                hv = hom.apply(lambda l, t=t: np.exp(-t * l), padded)
            worst[t] = max(worst[t], float(np.linalg.norm(y - hv[keep])))
    rec.semigroup = worst


def run_family(cfg: ExperimentConfig, what=("resolvent", "eigen", "semigroup"),
               jobs: int = 1) -> List[ConvergenceRecord]:
    """Measure every family member; records are ordered by ``eps`` descending."""
    eps_list = sorted(cfg.eps, reverse=True)
    if jobs > 1 and len(eps_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            recs = list(pool.map(_measure, [cfg] * len(eps_list), eps_list,
                                 [tuple(what)] * len(eps_list)))
    else:
        recs = [_measure(cfg, e, tuple(what)) for e in eps_list]
    return recs


def resolvent_experiment(cfg: ExperimentConfig, jobs: int = 1):
    return run_family(cfg, ("resolvent",), jobs)


def semigroup_experiment(cfg: ExperimentConfig, jobs: int = 1):
    return run_family(cfg, ("semigroup",), jobs)


def eigenvalue_experiment(cfg: ExperimentConfig, jobs: int = 1):
    return run_family(cfg, ("eigen",), jobs)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual: float
    count: int

    def to_dict(self):
        return asdict(self)


def rate_fit(records, column: str) -> RateFit:
    """Least-squares slope of ``log(column)`` against ``log(eps)`` over clean records."""
    pts = []
    for r in records:
        if isinstance(r, ConvergenceRecord):
            if not r.clean:
                continue
            e, v = r.eps, getattr(r, column)
        else:
            e, v = r["eps"], r[column]
        if v is not None and np.isfinite(v) and v > 0:
            pts.append((e, v))
    if len(pts) < 3:
        raise DomainError(f"rate fit needs at least 3 clean records, got {len(pts)}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    X = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.linalg.norm(X @ coef - y))
    return RateFit(float(coef[0]), float(coef[1]), resid, len(pts))


CSV_COLUMNS = {
    "resolvent": ["eps", "d", "h", "n_holes", "unknowns_full", "unknowns_perf", "cap", "q",
                  "cap_term", "delta", "measurement", "resolvent", "extension",
                  "ratio_resolvent", "dense_delta", "dense_bounds_ok", "clean"],
    "eigen": ["eps", "d", "h", "k", "lambda_perf", "lambda_hom", "lambda_closed_form", "gap",
              "normalized_gap", "mu_gap", "delta", "clean"],
    "semigroup": ["eps", "d", "h", "t", "discrepancy", "c_t", "delta", "clean"],
}


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else f"{float(v):.10e}"
    return str(v)


def _rows(records, kind):
    for r in records:
        base = {"eps": r.eps, "d": r.d, "h": r.h, "delta": r.delta, "clean": r.clean}
        if kind == "resolvent":
            yield {**base, "n_holes": r.n_holes, "unknowns_full": r.unknowns_full,
                   "unknowns_perf": r.unknowns_perf, "cap": r.cap, "q": r.q,
                   "cap_term": r.cap_term, "measurement": r.measurement,
                   "resolvent": r.resolvent, "extension": r.extension,
                   "ratio_resolvent": r.resolvent / r.delta, "dense_delta": r.dense_delta,
                   "dense_bounds_ok": "" if r.dense_bounds_ok is None else r.dense_bounds_ok}
        elif kind == "eigen":
            for k, (a, b, c, g, ng, mg) in enumerate(zip(r.eig_perf, r.eig_hom, r.eig_closed,
                                                        r.gaps, r.normalized_gaps, r.mu_gaps)):
                yield {**base, "k": k + 1, "lambda_perf": a, "lambda_hom": b,
                       "lambda_closed_form": c, "gap": g, "normalized_gap": ng, "mu_gap": mg}
        else:
            for t in sorted(r.semigroup):
                yield {**base, "t": t, "discrepancy": r.semigroup[t], "c_t": r.c_t(t)}


def records_to_csv(records, kind: str) -> str:
    """Deterministic CSV text for one experiment kind."""
    cols = CSV_COLUMNS[kind]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)
    for row in _rows(records, kind):
        wr.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue()


def sidecar(records, fits: dict) -> dict:
    return {
        "measurement_note": ("bank-lower-bound values are maxima over a fixed bank of "
                             "right-hand sides and therefore lower bounds of the operator norm"),
        "records": [{"eps": r.eps, "clean": r.clean, "error": r.error, "solver": r.solver,
                     "measurement": r.measurement} for r in records],
        "fits": {k: v.to_dict() for k, v in fits.items()},
    }


def write_outputs(records, kind: str, out_dir, atomic_write, fits=None) -> list:
    """Write ``<kind>.csv`` and ``<kind>.json``; returns the written paths."""
    import os

    fits = fits or {}
    paths = []
    p = os.path.join(out_dir, f"{kind}.csv")
    atomic_write(p, records_to_csv(records, kind))
    paths.append(p)
    p = os.path.join(out_dir, f"{kind}.json")
    atomic_write(p, json.dumps(sidecar(records, fits), indent=1, sort_keys=True, default=float))
    paths.append(p)
    return paths


def failures(records, kinds=("resolvent", "eigen", "semigroup")) -> list:
    """Human-readable list of failed checks (empty when everything passes)."""
    out = []
    for r in records:
        tag = f"eps={r.eps:.6g}"
        if not r.clean:
            out.append(f"{tag}: {r.error or 'solver tolerance not met'}")
            continue
        vals = []
        if "resolvent" in kinds:
            vals += [r.resolvent, r.extension]
        if "eigen" in kinds:
            vals += r.gaps
        if "semigroup" in kinds:
            vals += list(r.semigroup.values())
        if any(not np.isfinite(v) or v < 0 for v in vals):
            out.append(f"{tag}: non-finite or negative discrepancy")
        if r.dense_bounds_ok is False:
            out.append(f"{tag}: dense resolvent bounds violated")
    return out
