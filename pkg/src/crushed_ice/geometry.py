"""Periodic hole layouts inside an axis-aligned box.

The lattice of period cells is anchored at the lower corner of the box, so
that for the unit box and ``epsilon = 1/m`` the cells tile the box exactly
and the ``(m - 2)**n`` cells not touching the boundary carry a hole.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .exceptions import DomainError, LayoutError

__all__ = [
    "DomainSpec",
    "HoleShape",
    "HoleLayout",
    "SizeRule",
    "enumerate_interior_cells",
    "place_holes",
    "check_size_rule",
    "radial_distance",
]

#: relative tolerance (of the box extent) for "cell strictly inside the box"
INSIDE_TOL = 1e-12


def radial_distance(points, center):
    """Euclidean distance of ``points`` (shape ``(..., n)``) to ``center``.

    Every rasterization and cutoff in the package goes through this helper so
    that "inside the closed ball" means exactly the same thing everywhere.
    """
    off = np.asarray(points, dtype=float) - np.asarray(center, dtype=float)
    return np.sqrt(np.sum(off * off, axis=-1))


@dataclass(frozen=True)
class DomainSpec:
    """The box ``Omega``, its dimension and the lattice period.

    Parameters
    ----------
    n : int
        Space dimension, 2 <= n <= 4.
    box : sequence of (lo, hi)
        Extents of the box per coordinate.
    epsilon : float
        Lattice period.
    """

    n: int
    box: Tuple[Tuple[float, float], ...]
    epsilon: float

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        if not 2 <= self.n <= 4:
            raise DomainError(f"dimension must be 2, 3 or 4, got {self.n}")
        if len(box) != self.n:
            raise DomainError(f"box has {len(box)} extents for n={self.n}")
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        for lo, hi in box:
            if hi - lo < 2 * self.epsilon * (1 - INSIDE_TOL):
                raise DomainError(
                    f"box extent {hi - lo} is below 2*epsilon = {2 * self.epsilon}"
                )

    @classmethod
    def unit(cls, n, epsilon):
        return cls(n, ((0.0, 1.0),) * n, epsilon)

    @property
    def lower(self):
        return np.array([lo for lo, _ in self.box])

    @property
    def upper(self):
        return np.array([hi for _, hi in self.box])

    @property
    def volume(self):
        return float(np.prod(self.upper - self.lower))


@dataclass(frozen=True, eq=False)
class HoleShape:
    """Shape of a single hole, described relative to its center.

    ``d`` is the radius of the smallest ball containing the hole.  For
    ``kind="axis-box"`` the hole is the cube of half-width ``d / sqrt(n)``
    (so that its circumscribed ball has radius ``d``).  For
    ``kind="rasterized"`` the hole is the union of the ``True`` voxels of
    ``voxels``, a boolean array of cubes of side ``voxel_size`` centered on
    the origin.
    """

    kind: str
    d: float
    voxels: Optional[np.ndarray] = field(default=None, repr=False)
    voxel_size: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "d", float(self.d))
        if self.kind not in ("ball", "axis-box", "rasterized"):
            raise DomainError(f"unknown hole kind {self.kind!r}")
        if not self.d > 0:
            raise DomainError("hole radius d must be positive")
        if self.kind == "rasterized":
            if self.voxels is None or self.voxel_size is None:
                raise DomainError("rasterized shapes need voxels and voxel_size")
            vox = np.asarray(self.voxels, dtype=bool)
            object.__setattr__(self, "voxels", vox)
            centers = self._voxel_centers(vox, float(self.voxel_size))
            if len(centers) == 0:
                raise DomainError("rasterized shape has no voxels")
            rmax = radial_distance(centers, np.zeros(vox.ndim)).max()
            if rmax > self.d * (1 + 1e-12):
                raise DomainError(
                    f"rasterized shape reaches radius {rmax} > d = {self.d}"
                )

    @staticmethod
    def _voxel_centers(vox, size):
        idx = np.argwhere(vox).astype(float)
        return (idx - (np.array(vox.shape) - 1) / 2.0) * size

    @classmethod
    def ball(cls, d):
        return cls("ball", d)

    @classmethod
    def axis_box(cls, d):
        return cls("axis-box", d)

    def half_width(self, n):
        return self.d / math.sqrt(n)

    def contains(self, offsets):
        """Closed-set membership test for points given relative to the center."""
        offsets = np.asarray(offsets, dtype=float)
        n = offsets.shape[-1]
        if self.kind == "ball":
            return radial_distance(offsets, np.zeros(n)) <= self.d
        if self.kind == "axis-box":
            return np.all(np.abs(offsets) <= self.half_width(n), axis=-1)
        vox = self.voxels
        if vox.ndim != n:
            raise DomainError(f"voxel field is {vox.ndim}-dimensional, points are {n}-dimensional")
        h = float(self.voxel_size)
        idx = np.floor(offsets / h + np.array(vox.shape) / 2.0).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(vox.shape)), axis=-1)
        out = np.zeros(offsets.shape[:-1], dtype=bool)
        sel = idx[inside]
        out[inside] = vox[tuple(sel.T)]
        return out

    def is_reflection_symmetric(self):
        if self.kind != "rasterized":
            return True
        vox = self.voxels
        return all(np.array_equal(vox, np.flip(vox, axis=a)) for a in range(vox.ndim))

    def to_dict(self):
        out = {"kind": self.kind, "d": self.d}
        if self.kind == "rasterized":
            out["voxels"] = self.voxels.astype(int).tolist()
            out["voxel_size"] = float(self.voxel_size)
        return out

    @classmethod
    def from_dict(cls, data):
        if data["kind"] == "rasterized":
            return cls("rasterized", data["d"], np.array(data["voxels"], dtype=bool),
                       float(data["voxel_size"]))
        return cls(data["kind"], data["d"])

    def __eq__(self, other):
        if not isinstance(other, HoleShape):
            return NotImplemented
        if (self.kind, self.d, self.voxel_size) != (other.kind, other.d, other.voxel_size):
            return False
        if self.voxels is None or other.voxels is None:
            return self.voxels is other.voxels
        return np.array_equal(self.voxels, other.voxels)

    def __hash__(self):
        return hash((self.kind, self.d, self.voxel_size))


def enumerate_interior_cells(spec: DomainSpec) -> list:
    """Lattice indices of the period cells lying strictly inside the box.

    Cell ``i`` is ``lo + epsilon * (i + [0, 1]^n)``.  A cell is interior when
    its closure stays at positive distance (``INSIDE_TOL`` times the extent)
    from the box boundary.  Indices are returned in lexicographic order.
    """
    eps = spec.epsilon
    per_axis = []
    for lo, hi in spec.box:
        ext = hi - lo
        tol = INSIDE_TOL * ext
        kmax = int(math.ceil(ext / eps)) + 1
        ks = [k for k in range(-1, kmax + 1) if k * eps > tol and (k + 1) * eps < ext - tol]
        per_axis.append(ks)
    return [tuple(i) for i in itertools.product(*per_axis)]


@dataclass(frozen=True, eq=False)
class HoleLayout:
    """One hole per interior cell, all translated copies of ``shape``."""

    spec: DomainSpec
    shape: HoleShape
    kappa: float
    indices: Tuple[Tuple[int, ...], ...]
    centers: np.ndarray = field(repr=False)

    @property
    def n_holes(self):
        return len(self.indices)

    @property
    def d(self):
        return self.shape.d

    @property
    def epsilon(self):
        return self.spec.epsilon

    def cell_bounds(self, k):
        """``(lo, hi)`` corner arrays of the k-th cell of the layout."""
        lo = self.spec.lower + self.spec.epsilon * np.asarray(self.indices[k], dtype=float)
        return lo, lo + self.spec.epsilon

    @property
    def cells(self):
        return [self.cell_bounds(k) for k in range(self.n_holes)]

    def contains(self, points):
        """Closed-hole membership over the whole layout; returns (mask, hole id)."""
        points = np.asarray(points, dtype=float)
        mask = np.zeros(points.shape[:-1], dtype=bool)
        owner = np.full(points.shape[:-1], -1, dtype=np.int64)
        for k, c in enumerate(self.centers):
            inside = self.shape.contains(points - c)
            owner[inside & ~mask] = k
            mask |= inside
        return mask, owner

    def to_json(self):
        doc = {
            "n": self.spec.n,
            "box": [list(b) for b in self.spec.box],
            "epsilon": self.spec.epsilon,
            "kappa": self.kappa,
            "shape": self.shape.to_dict(),
            "indices": [list(i) for i in self.indices],
            "centers": self.centers.tolist(),
        }
        # repr-based float encoding round-trips exactly
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        spec = DomainSpec(int(doc["n"]), tuple(tuple(b) for b in doc["box"]), doc["epsilon"])
        centers = np.array(doc["centers"], dtype=float).reshape(-1, spec.n)
        return cls(spec, HoleShape.from_dict(doc["shape"]), float(doc["kappa"]),
                   tuple(tuple(int(v) for v in i) for i in doc["indices"]), centers)

    def __eq__(self, other):
        if not isinstance(other, HoleLayout):
            return NotImplemented
        return (self.spec == other.spec and self.shape == other.shape
                and self.kappa == other.kappa and self.indices == other.indices
                and np.array_equal(self.centers, other.centers))


def place_holes(spec: DomainSpec, shape: HoleShape, kappa: float,
                offset: Optional[Sequence[float]] = None) -> HoleLayout:
    """Put one copy of ``shape`` in every interior cell.

    Holes sit at the cell centers, shifted by ``offset`` when given.  Raises
    :class:`LayoutError` naming the first cell whose enclosing ball comes
    closer than ``kappa * epsilon`` to the cell boundary.
    """
    if not 0 < kappa < 0.5:
        raise DomainError(f"kappa must lie in (0, 1/2), got {kappa}")
    eps = spec.epsilon
    off = np.zeros(spec.n) if offset is None else np.asarray(offset, dtype=float)
    if off.shape != (spec.n,):
        raise DomainError("offset must have one entry per dimension")
    indices = enumerate_interior_cells(spec)
    d = shape.d
    slack = 1e-12 * eps
    if not indices and d + kappa * eps + np.abs(off).max() > eps / 2 + slack:
        raise LayoutError(
            f"security distance violated: d + kappa*eps = {d + kappa * eps} > eps/2 = {eps / 2}"
        )
    centers = np.empty((len(indices), spec.n))
    for k, i in enumerate(indices):
        lo = spec.lower + eps * np.asarray(i, dtype=float)
        c = lo + eps / 2 + off
        gap = np.minimum(c - d - lo, lo + eps - c - d)
        if gap.min() < kappa * eps - slack:
            raise LayoutError(
                f"cell {i}: enclosing ball is {gap.min()} from the cell boundary, "
                f"less than kappa*eps = {kappa * eps}"
            )
        centers[k] = c
    centers.setflags(write=False)
    return HoleLayout(spec, shape, float(kappa), tuple(indices), centers)


@dataclass(frozen=True)
class SizeRule:
    satisfied: bool
    margin: float


def check_size_rule(n: int, epsilon: float, d: float, C: float = 1.0) -> SizeRule:
    """Check the hole-size rule ``d**(n-2) <= C eps**n`` (``|ln d|**-1 <= C eps**2`` for n=2).

    ``margin`` is the dimensionless ratio of the left side to ``eps**n``
    (resp. ``eps**2``); the rule is satisfied iff ``margin <= C``.
    """
    if not 0 < d < epsilon:
        raise DomainError(f"need 0 < d < epsilon, got d={d}, epsilon={epsilon}")
    if n >= 3:
        ratio = d ** (n - 2) / epsilon ** n
    elif n == 2:
        ratio = 1.0 / (abs(math.log(d)) * epsilon ** 2)
    else:
        raise DomainError(f"dimension must be >= 2, got {n}")
    return SizeRule(bool(ratio <= C * (1 + 1e-12)), float(ratio))
