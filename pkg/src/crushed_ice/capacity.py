"""Capacity of small obstacles and their equilibrium potentials.

For ``n >= 3`` the exterior problem is truncated at a sphere of radius
``R`` and the energy is corrected by the spherical-condenser factor of the
ball with the same truncated capacity (exact for balls).  For ``n = 2`` the potential vanishes
on the unit circle around the obstacle and no correction is needed.

Reflection-symmetric shapes are solved on one orthant with mirror planes
through the center; the energy is then multiplied by ``2**n``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from dataclasses import field as dfield
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.special import gamma

from .exceptions import DomainError, ResolutionError
from .geometry import HoleShape
from .grid import DIRICHLET, MIRROR, CartesianGrid, energy_matrix
from .linalg import CG_TOL, SolveReport, _amg, pcg

__all__ = [
    "sphere_area",
    "capacity_ball_analytic",
    "potential_ball_analytic",
    "CapacityProblem",
    "PotentialField",
    "CapacityResult",
    "capacity_numeric",
    "capacity_flux",
    "decay_check",
    "DecayReport",
    "effective_q",
    "condenser_factor",
    "MIN_RESOLUTION",
]

#: smallest admissible d/h for the grid capacity solver
MIN_RESOLUTION = 8.0


def sphere_area(n: int) -> float:
    """Surface measure of the unit sphere in R^n."""
    return 2 * math.pi ** (n / 2) / gamma(n / 2)


def capacity_ball_analytic(n: int, d: float) -> float:
    """Capacity of a ball of radius ``d`` (relative to the unit ball when n = 2)."""
    if n < 2:
        raise DomainError("dimension must be at least 2")
    if not d > 0:
        raise DomainError("radius must be positive")
    if n == 2:
        if d >= 1:
            raise DomainError("the planar capacity needs d < 1")
        return 2 * math.pi / abs(math.log(d))
    return (n - 2) * sphere_area(n) * d ** (n - 2)


def potential_ball_analytic(n: int, d: float, r):
    """Equilibrium potential of a ball at distance ``r`` from its center."""
    r = np.asarray(r, dtype=float)
    if not d > 0:
        raise DomainError("radius must be positive")
    if np.any(r < d * (1 - 1e-14)):
        raise DomainError("potential is evaluated only outside the ball")
    if n == 2:
        if d >= 1 or np.any(r > 1 + 1e-14):
            raise DomainError("the planar potential needs d < r <= 1")
        return np.log(r) / math.log(d)
    return (d / r) ** (n - 2)


@dataclass(frozen=True)
class CapacityProblem:
    """A single obstacle centered at the origin.

    ``R`` is the truncation radius for ``n >= 3`` (default ``max(10 d, 0.5)``,
    at least ``10 d``); it is fixed to 1 for ``n = 2``.
    """

    n: int
    shape: HoleShape
    R: Optional[float] = None

    def __post_init__(self):
        d = self.shape.d
        if self.n < 2:
            raise DomainError("dimension must be at least 2")
        if self.n == 2:
            if self.R not in (None, 1, 1.0):
                raise DomainError("the planar problem is posed in the unit disk")
            if d >= 1:
                raise DomainError("the obstacle must fit in the unit disk")
            object.__setattr__(self, "R", 1.0)
        else:
            R = max(10 * d, 0.5) if self.R is None else float(self.R)
            if R < 10 * d * (1 - 1e-12):
                raise DomainError(f"truncation radius {R} is below 10 d = {10 * d}")
            object.__setattr__(self, "R", R)

    @property
    def d(self):
        return self.shape.d


@dataclass(frozen=True, eq=False)
class PotentialField:
    """Equilibrium potential, either analytic (balls) or sampled on a grid.

    For grid fields ``values`` holds H on every grid node (1 in the hole, 0
    beyond ``R``) and ``symmetric`` says whether the grid covers one orthant.
    """

    n: int
    d: float
    R: float
    kind: str
    cap: float
    grid: Optional[CartesianGrid] = dfield(default=None, repr=False)
    values: Optional[np.ndarray] = dfield(default=None, repr=False)
    hole: Optional[np.ndarray] = dfield(default=None, repr=False)
    symmetric: bool = False
    shape: Optional[HoleShape] = dfield(default=None, repr=False)

    @classmethod
    def analytic_ball(cls, n, d, R=None):
        R = 1.0 if n == 2 else (math.inf if R is None else float(R))
        return cls(n, float(d), R, "analytic", capacity_ball_analytic(n, d),
                   shape=HoleShape.ball(d))

    def evaluate(self, points):
        """H at points given relative to the obstacle center.

        Values are 1 inside the obstacle and 0 beyond the outer radius.
        """
        pts = np.asarray(points, dtype=float)
        r = np.sqrt(np.sum(pts * pts, axis=-1))
        if self.kind == "analytic":
            out = np.ones(r.shape)
            outside = r > self.d
            if self.n == 2:
                out[r >= 1] = 0.0
                band = outside & (r < 1)
                out[band] = np.log(r[band]) / math.log(self.d)
            else:
                out[outside] = (self.d / r[outside]) ** (self.n - 2)
            return out
        axes = [np.asarray(c) for c in self.grid.coords]
        vals = self.values.reshape(self.grid.shape)
        if self.symmetric:
            pts = np.abs(pts)
            # ghost layer mirrors the first node across the symmetry plane
            axes = [np.concatenate([[-c[0]], c]) for c in axes]
            vals = np.pad(vals, [(1, 0)] * self.n, mode="symmetric")
        axes = [np.concatenate([c, [b[1][1]]]) for c, b in zip(axes, self.grid.bounds)]
        vals = np.pad(vals, [(0, 1)] * self.n, mode="constant")
        interp = RegularGridInterpolator(axes, vals, bounds_error=False, fill_value=0.0)
        out = interp(pts.reshape(-1, self.n)).reshape(r.shape)
        if self.shape is not None:
            out[self.shape.contains(pts)] = 1.0
        out[r >= self.R] = 0.0
        return out

    def node_samples(self):
        """``(points, H)`` at the free grid nodes (grid fields only)."""
        if self.kind != "grid":
            raise DomainError("node samples exist only for grid fields")
        pts = self.grid.points()
        free = ~self.hole & (np.sqrt(np.sum(pts * pts, axis=1)) < self.R)
        return pts[free], self.values[free]


@dataclass
class CapacityResult:
    cap_energy: float
    cap_corrected: float
    cap_flux: float
    field: PotentialField = dfield(repr=False)
    report: SolveReport = dfield(repr=False)
    h: float = 0.0
    unknowns: int = 0

    @property
    def cap(self):
        return self.cap_corrected

    def to_dict(self):
        return {"cap_energy": self.cap_energy, "cap_corrected": self.cap_corrected,
                "cap_flux": self.cap_flux, "h": self.h, "unknowns": self.unknowns,
                "solver": self.report.to_dict()}


def _radial_axis(h, R, graded):
    """Half-integer nodes ``(k + 1/2) h`` outward from a mirror plane at 0."""
    if graded is None:
        m = int(math.ceil(R / h))
        return (np.arange(m) + 0.5) * h, (m + 0.5) * h
    ratio, h_coarse, core = graded
    pts = [h / 2]
    s = h
    while pts[-1] + s <= core:
        pts.append(pts[-1] + s)
    while pts[-1] < R:
        s = min(s * ratio, h_coarse)
        pts.append(pts[-1] + s)
    return np.array(pts), pts[-1] + s


def capacity_numeric(problem: CapacityProblem, h: float, tol: float = CG_TOL,
                     graded=None, symmetric: Optional[bool] = None,
                     min_resolution: float = MIN_RESOLUTION) -> CapacityResult:
    """Capacity from the discrete Dirichlet energy of the equilibrium potential.

    Parameters
    ----------
    problem : CapacityProblem
    h : float
        Grid spacing near the obstacle.
    graded : (ratio, h_coarse, core) or None
        Optional geometric coarsening beyond radius ``core``.
    symmetric : bool or None
        Solve on one orthant (default: whenever the shape is mirror symmetric).

    Returns
    -------
    CapacityResult
        ``cap_energy`` is the truncated energy; ``cap_corrected`` applies
        :func:`condenser_factor` for n >= 3.
    """
    n, d, R, shape = problem.n, problem.d, problem.R, problem.shape
    if d / h < min_resolution * (1 - 1e-12):
        raise ResolutionError(f"d/h = {d / h:.3g} is below {min_resolution}")
    if symmetric is None:
        symmetric = shape.is_reflection_symmetric()
    half, outer = _radial_axis(h, R, graded)
    if symmetric:
        coords = (half,) * n
        bounds = (((MIRROR, 0.0), (DIRICHLET, outer)),) * n
    else:
        axis = np.concatenate([-half[::-1], half])
        coords = (axis,) * n
        bounds = (((DIRICHLET, -outer), (DIRICHLET, outer)),) * n
    grid = CartesianGrid(coords, bounds, h=None if graded else h)
    pts = grid.points()
    r = np.sqrt(np.sum(pts * pts, axis=1))
    hole = shape.contains(pts)
    if not hole.any():
        raise ResolutionError("obstacle masks no grid node")
    free = ~hole & (r < R)
    K = energy_matrix(grid)
    fi = np.flatnonzero(free)
    hi = np.flatnonzero(hole)
    Kff = K[fi][:, fi].tocsr()
    rhs = -(K[fi][:, hi] @ np.ones(len(hi)))
    u, rep = pcg(Kff, rhs, _amg(Kff), tol=tol, maxiter=2000)
    H = np.zeros(grid.size)
    H[hole] = 1.0
    H[fi] = u
    factor = 2.0 ** n if symmetric else 1.0
    energy = factor * float(H @ (K @ H))
    # flux through the faces between hole nodes and their free neighbours
    flux = factor * float(np.sum((K @ H)[hi]))
    corr = condenser_factor(n, energy, R)
    fld = PotentialField(n, d, R, "grid", energy * corr, grid, H, hole, bool(symmetric), shape)
    return CapacityResult(energy, energy * corr, flux * corr, fld, rep, h, len(fi))


def condenser_factor(n: int, cap_R: float, R: float) -> float:
    """Factor turning a capacity truncated at radius ``R`` into the exterior one.

    The obstacle is replaced by the ball of equal truncated capacity, for
    which the spherical condenser gives ``cap = cap_R (1 - (d_e/R)**(n-2))``.
    For a ball resolved exactly, ``d_e = d``.  Returns 1 for n = 2.
    """
    if n == 2:
        return 1.0
    c = (n - 2) * sphere_area(n)
    return 1.0 / (1.0 + cap_R * R ** (2 - n) / c)


def capacity_flux(field: PotentialField) -> float:
    """Capacity as the total outward flux of ``-grad H`` through the obstacle boundary.

    Grid fields sum the one-sided differences across every face between a
    hole node and a free node (with the same truncation factor as the
    energy); analytic ball fields use the closed-form radial derivative.
    """
    if field.kind == "analytic":
        if field.n == 2:
            # -dH/dr * 2 pi r at r = d for H = ln r / ln d
            return 2 * math.pi / abs(math.log(field.d))
        dHdr = -(field.n - 2) / field.d
        return -dHdr * sphere_area(field.n) * field.d ** (field.n - 1)
    K = energy_matrix(field.grid)
    factor = 2.0 ** field.n if field.symmetric else 1.0
    flux = factor * float(np.sum((K @ field.values)[field.hole]))
    return flux * condenser_factor(field.n, flux, field.R)


@dataclass
class DecayReport:
    sup_ratio: float
    samples: int
    threshold: float
    C: float

    @property
    def passed(self):
        return self.sup_ratio <= self.C

    def to_dict(self):
        return {"sup_ratio": self.sup_ratio, "samples": self.samples,
                "threshold": self.threshold, "C": self.C, "passed": self.passed}


def decay_threshold(n: int, d: float, C0: float) -> float:
    """Smallest distance to the enclosing ball at which decay is checked."""
    if n == 2:
        return math.exp(-C0 * math.sqrt(abs(math.log(d))))
    return C0 * d


def decay_check(field: PotentialField, C0: float = 2.0, C: float = 1.1,
                samples: int = 400) -> DecayReport:
    """Largest normalized potential over points far from the obstacle.

    The distance to the enclosing ball is ``rho = r - d``.  The normalized
    quantity is ``H rho**(n-2) / d**(n-2)`` for n >= 3 and
    ``H |ln d| / |ln rho|`` for n = 2 (with ``rho < 1``).
    """
    n, d = field.n, field.d
    lo = decay_threshold(n, d, C0)
    if field.kind == "analytic":
        top = 1.0 if n == 2 else min(field.R, 1e3 * d)
        r = d + np.geomspace(lo, max(top - d, lo * 1.0001), samples)
        Hs = field.evaluate(np.stack([r] + [np.zeros_like(r)] * (n - 1), axis=-1))
    else:
        pts, Hs = field.node_samples()
        r = np.sqrt(np.sum(pts * pts, axis=1))
    rho = r - d
    keep = rho >= lo
    if n == 2:
        keep &= rho < 1
    if not np.any(keep):
        raise DomainError("no samples beyond the decay threshold")
    rho, Hs = rho[keep], np.abs(Hs[keep])
    if n == 2:
        ratio = Hs * abs(math.log(d)) / np.abs(np.log(rho))
    else:
        ratio = Hs * (rho / d) ** (n - 2)
    return DecayReport(float(ratio.max()), int(keep.sum()), float(lo), float(C))


def effective_q(n: int, epsilon: float, cap: float) -> float:
    """Strength of the limiting potential, ``cap / epsilon**n``."""
    if cap < 0 or not epsilon > 0:
        raise DomainError("need cap >= 0 and epsilon > 0")
    return cap / epsilon ** n
