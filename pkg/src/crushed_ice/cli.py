"""Command-line front end.

Every subcommand writes its outputs plus a ``manifest.json`` into
``--out-dir`` and exits with status 1 when any asserted check fails.
Configuration files are JSON.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import math
import os
import re
import sys
import tempfile
from dataclasses import dataclass, field
from importlib import metadata
from typing import List, Optional

import numpy as np

from . import harness
from .capacity import (CapacityProblem, capacity_ball_analytic, capacity_flux,
                       capacity_numeric)
from .closeness import pde_instance, random_instance, verify_resolvent_bound
from .exceptions import ConfigError, CrushedIceError
from .geometry import DomainSpec, HoleLayout, HoleShape, place_holes
from .grid import CartesianGrid, GridFunction, NodeMask, assemble_laplacian, export_function
from .linalg import ShiftedSolver

__all__ = ["main", "parse_config", "RunManifest", "config_hash", "atomic_write"]


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=float)


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    files: List[str] = field(default_factory=list)
    version: str = field(default_factory=_version)
    timestamp: str = field(
        default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))

    @property
    def config_hash(self) -> str:
        return config_hash({"command": self.command, "config": self.config})

    def to_dict(self):
        return {"command": self.command, "config_hash": self.config_hash, "config": self.config,
                "seed": self.seed, "version": self.version, "timestamp": self.timestamp,
                "files": sorted(os.path.basename(f) for f in self.files)}


_D_RULE = re.compile(r"^\s*c\s*\*\s*eps\s*\^\s*\(?\s*([0-9.]+(?:\s*/\s*[0-9.]+)?)\s*\)?\s*$")


def _normalize_experiment(data: dict) -> dict:
    data = dict(data)
    if "d_rule" in data:
        rule = str(data.pop("d_rule"))
        m = _D_RULE.match(rule)
        if m:
            p = m.group(1).replace(" ", "")
            num, _, den = p.partition("/")
            data["d_power"] = float(num) / float(den) if den else float(num)
        elif rule.replace(" ", "") != "exp(-1/(c*eps^2))":
            raise ConfigError(f"d_rule {rule!r} is not of the form 'c*eps^p' or 'exp(-1/(c*eps^2))'")
    if "c" in data:
        data["d_c"] = data.pop("c")
    return data


def parse_config(path: Optional[str], kind: str = "experiment"):
    """Read a JSON config; ``kind`` is ``experiment`` or ``raw``.

    Experiment configs accept the aliases ``d_rule = "c*eps^p"`` and ``c``.
    """
    data = {}
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    if kind == "raw":
        return data
    return harness.ExperimentConfig.from_dict(_normalize_experiment(data))


def _build_parser():
    p = argparse.ArgumentParser(prog="crushed-ice",
                                description="Perforated-domain homogenization laboratory.")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--out-dir", default="out", help="output directory (default: out)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers over eps")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--dense-limit", type=int, default=None,
                   help="largest dimension handled by dense linear algebra")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("capacity", help="capacity of one obstacle")
    c.add_argument("--n", type=int, default=3)
    c.add_argument("--shape", choices=["ball", "axis-box"], default="ball")
    c.add_argument("--d", type=float, default=0.1)
    c.add_argument("--R", type=float, default=None)
    c.add_argument("--h", type=float, default=None, help="grid spacing (default d/16)")
    c.add_argument("--tol", type=float, default=0.02, help="accepted relative error for balls")
    c.add_argument("--grading", type=float, default=None,
                   help="geometric coarsening ratio beyond 2d (default 1.15 for n >= 3, "
                        "uniform for n = 2; 0 forces a uniform grid)")
    c.add_argument("--out", default="report.json")

    s = sub.add_parser("solve", help="solve (A_eps + 1) u = f for one family member")
    s.add_argument("--eps", type=float, default=None)
    s.add_argument("--rhs", default="sin111", help="name of a right-hand side in the bank")

    for name, helptext in (("converge", "resolvent experiment"), ("eigen", "eigenvalue experiment"),
                           ("semigroup", "semigroup experiment")):
        sub.add_parser(name, help=helptext)

    k = sub.add_parser("closeness", help="closeness constants and resolvent bounds")
    k.add_argument("--instance", choices=["random", "pde"], default="random")
    k.add_argument("--count", type=int, default=100)
    k.add_argument("--dims", type=int, default=12, help="largest random dimension")
    k.add_argument("--layout-file", default=None, help="HoleLayout JSON for --instance pde")
    k.add_argument("--h", type=float, default=None, help="grid spacing for --instance pde")
    k.add_argument("--min-resolution", type=float, default=None)
    k.add_argument("--k", type=int, default=2, choices=[1, 2])
    k.add_argument("--out", default="report.json")
    return p


def _finish(args, manifest: RunManifest, ok: bool, messages=()):
    path = os.path.join(args.out_dir, "manifest.json")
    manifest.files.append(path)
    atomic_write(path, json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
    for m in messages:
        print(m, file=sys.stderr)
    return 0 if ok else 1


def _experiment_cfg(args):
    cfg = parse_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.dense_limit is not None:
        over["dense_limit"] = args.dense_limit
    if over:
        cfg = harness.ExperimentConfig.from_dict({**cfg.to_dict(), **over})
    return cfg


def _cmd_capacity(args):
    raw = parse_config(args.config, "raw")
    n = int(raw.get("n", args.n))
    kind = raw.get("shape", args.shape)
    d = float(raw.get("d", args.d))
    R = raw.get("R", args.R)
    h = float(raw.get("h", args.h if args.h is not None else d / 16))
    shape = HoleShape.ball(d) if kind == "ball" else HoleShape.axis_box(d)
    prob = CapacityProblem(n, shape, None if n == 2 else R)
    ratio = raw.get("grading", args.grading)
    if ratio is None:
        ratio = 1.15 if n >= 3 else 0.0
    graded = (float(ratio), 0.05 * prob.R, 2 * d) if ratio else None
    res = capacity_numeric(prob, h, graded=graded)
    report = {"n": n, "shape": kind, "d": d, "R": prob.R, "h": h, **res.to_dict(),
              "cap_flux_field": capacity_flux(res.field)}
    ok = True
    if kind == "ball":
        exact = capacity_ball_analytic(n, d)
        report["cap_analytic_if_ball"] = exact
        report["relative_errors"] = {"corrected": res.cap_corrected / exact - 1,
                                     "flux": res.cap_flux / exact - 1,
                                     "flux_vs_energy": abs(res.cap_flux - res.cap_corrected) / res.cap_corrected}
        ok = bool(abs(res.cap_corrected / exact - 1) <= args.tol)
    else:
        report["cap_analytic_if_ball"] = None
        report["relative_errors"] = {"flux_vs_energy": abs(res.cap_flux - res.cap_corrected) / res.cap_corrected}
    report["ok"] = ok
    out = os.path.join(args.out_dir, args.out)
    atomic_write(out, json.dumps(report, indent=1, sort_keys=True, default=float))
    cfg = {"n": n, "shape": kind, "d": d, "R": prob.R, "h": h, "tol": args.tol,
           "grading": graded}
    return _finish(args, RunManifest("capacity", cfg, 0, [out]), ok)


def _cmd_solve(args):
    cfg = _experiment_cfg(args)
    eps = args.eps if args.eps is not None else max(cfg.eps)
    layout, grid, d, h = harness._family_member(cfg, eps)
    full = NodeMask.full(grid)
    perf = NodeMask.from_layout(grid, layout)
    bank = dict(harness.rhs_bank(cfg, grid))
    if args.rhs not in bank:
        raise ConfigError(f"unknown right-hand side {args.rhs!r}; choose from {sorted(bank)}")
    f = GridFunction(full, bank[args.rhs])
    op = assemble_laplacian(perf)
    solver = ShiftedSolver(op.matrix, 1.0, cfg.cg_tol, cfg.dense_limit)
    x = solver.solve(f.tilde()[perf.active])
    u = GridFunction.from_tilde(perf, x)
    rep = solver.reports[-1]
    sol = os.path.join(args.out_dir, "solution.csv")
    os.makedirs(args.out_dir, exist_ok=True)
    export_function(u, sol)
    info = {"eps": eps, "d": d, "h": h, "rhs": args.rhs, "unknowns": perf.N,
            "solver": rep.to_dict(), "norm": u.norm()}
    js = os.path.join(args.out_dir, "solve.json")
    atomic_write(js, json.dumps(info, indent=1, sort_keys=True, default=float))
    ok = rep.residual <= cfg.cg_tol
    return _finish(args, RunManifest("solve", {**cfg.to_dict(), "eps_solved": eps, "rhs": args.rhs},
                                     cfg.seed, [sol, js]), ok)


_KINDS = {"converge": ("resolvent",), "eigen": ("eigen",), "semigroup": ("semigroup",)}


def _cmd_experiment(args):
    cfg = _experiment_cfg(args)
    what = _KINDS[args.command]
    recs = harness.run_family(cfg, what, jobs=max(1, args.jobs))
    kind = what[0]
    fits = {}
    column = {"resolvent": "resolvent"}.get(kind)
    if column:
        try:
            fits[column] = harness.rate_fit(recs, column)
        except CrushedIceError:
            pass
    files = harness.write_outputs(recs, kind, args.out_dir, atomic_write, fits)
    bad = harness.failures(recs, what)
    return _finish(args, RunManifest(args.command, cfg.to_dict(), cfg.seed, files), not bad, bad)


def _cmd_closeness(args):
    seed = 0 if args.seed is None else args.seed
    dense_limit = args.dense_limit or 2000
    reports = []
    if args.instance == "random":
        rng = np.random.default_rng(seed)
        for _ in range(args.count):
            pair, ids = random_instance(rng, args.dims)
            reports.append(verify_resolvent_bound(pair, ids, dense_limit=dense_limit).to_dict())
        cfg = {"instance": "random", "count": args.count, "dims": args.dims}
    else:
        if args.layout_file:
            with open(args.layout_file) as fh:
                layout = HoleLayout.from_json(fh.read())
            h = args.h
            if h is None:
                raise ConfigError("--h is required with --layout-file")
            min_res = 4.0 if args.min_resolution is None else args.min_resolution
        else:
            layout = place_holes(DomainSpec.unit(3, 1 / 3), HoleShape.ball(0.1), 0.1)
            h = 1 / 12 if args.h is None else args.h
            # the default coarse instance resolves the hole by a single node layer
            min_res = 1.0 if args.min_resolution is None else args.min_resolution
        grid = CartesianGrid.uniform(layout.spec.box, h)
        inst = pde_instance(layout, grid, k=args.k, min_resolution=min_res,
                            dense_limit=dense_limit)
        rep = verify_resolvent_bound(inst.pair, inst.ids, dense_limit=dense_limit).to_dict()
        rep["q"] = inst.q
        rep["cutoff"] = inst.j1.cutoff_mode
        rep["flags"] = list(inst.j1.flags)
        reports.append(rep)
        cfg = {"instance": "pde", "layout": json.loads(layout.to_json()), "h": h, "k": args.k,
               "min_resolution": min_res}
    ok = all(r["ok"] for r in reports)
    worst = {key: max(r["ratios"][key] for r in reports) for key in reports[0]["ratios"]}
    out = os.path.join(args.out_dir, args.out)
    atomic_write(out, json.dumps({"count": len(reports), "all_bound_ok": ok,
                                  "worst_ratios": worst, "reports": reports},
                                 indent=1, sort_keys=True, default=float))
    return _finish(args, RunManifest("closeness", {**cfg, "dense_limit": dense_limit}, seed, [out]), ok)


_COMMANDS = {"capacity": _cmd_capacity, "solve": _cmd_solve, "converge": _cmd_experiment,
             "eigen": _cmd_experiment, "semigroup": _cmd_experiment, "closeness": _cmd_closeness}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except CrushedIceError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
