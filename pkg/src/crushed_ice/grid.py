"""Finite-volume Laplacian on tensor-product grids with masked Dirichlet nodes.

Unknowns sit at the nodes of a tensor-product grid.  Each node carries the
volume of its dual box (the product of per-axis dual widths), and the
discrete space is weighted-l2 with those volumes.  Operators are stored in
orthonormal coordinates ``u_tilde = sqrt(w) * u``, in which the Laplacian is
the symmetric matrix ``W^{-1/2} K W^{-1/2}`` with ``K`` the (unweighted)
Dirichlet-energy matrix.  On a uniform grid of spacing ``h`` this matrix is
the classical 2n+1-point stencil: off-diagonals ``-1/h**2`` and diagonal
``2n/h**2``.  Restriction and extension by zero are node selection and
padding in both coordinate systems, so they are exact adjoints.

Holes are imposed by removing every node that lies in a closed hole; the
edge to a removed node then acts as a Dirichlet condition at that node.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .exceptions import DomainError, GridMismatchError, ResolutionError
from .geometry import HoleLayout

__all__ = [
    "CartesianGrid",
    "NodeMask",
    "GridOperator",
    "GridFunction",
    "assemble_laplacian",
    "axis_laplacian",
    "energy_matrix",
    "graded_axis",
    "restrict",
    "extend_zero",
    "restriction_matrix",
    "cell_mean",
    "cell_mean_weights",
    "export_coo",
    "export_function",
    "read_function",
]

DIRICHLET = "dirichlet"
MIRROR = "mirror"


def graded_axis(lo, hi, centers, h_fine, h_coarse, core, ratio=1.25):
    """Node positions on ``(lo, hi)`` refined around the points ``centers``.

    Within distance ``core`` of a center the spacing is ``h_fine``; beyond it
    the spacing grows geometrically by ``ratio`` until it reaches
    ``h_coarse``, and the remaining gaps are filled uniformly.  Each center
    is itself a node.  The end points ``lo`` and ``hi`` are not returned.
    """
    if not (h_fine > 0 and h_coarse >= h_fine and ratio >= 1):
        raise DomainError("need 0 < h_fine <= h_coarse and ratio >= 1")
    centers = sorted(float(c) for c in centers)

    def grow(gap):
        offs, x, s = [], 0.0, h_fine
        while x + s <= core + 1e-15 and x + s < gap:
            x += s
            offs.append(x)
        while s * ratio <= h_coarse and x + s * ratio < gap:
            s *= ratio
            x += s
            offs.append(x)
        return np.array(offs)

    pts = [lo, hi] + centers
    anchors = [lo] + centers + [hi]
    for a, b in zip(anchors[:-1], anchors[1:]):
        half = (b - a) / 2
        left = grow(half) if a in centers else np.array([])
        right = grow(half) if b in centers else np.array([])
        x0 = a + (left[-1] if len(left) else 0.0)
        x1 = b - (right[-1] if len(right) else 0.0)
        smax = h_coarse
        for side in (left, right):
            if len(side) > 1:
                smax = min(smax, max(side[-1] - side[-2], h_fine) * ratio)
        k = max(1, int(math.ceil((x1 - x0) / smax - 1e-9)))
        pts += list(a + left) + list(np.linspace(x0, x1, k + 1)) + list(b - right)
    pts = np.unique(np.round(np.array(pts, dtype=float), 14))
    return pts[(pts > lo) & (pts < hi)]


@dataclass(frozen=True, eq=False)
class CartesianGrid:
    """Tensor-product node set with per-axis boundary conditions.

    Parameters
    ----------
    coords : sequence of 1-D arrays
        Strictly increasing node positions per axis (unknowns only).
    bounds : sequence of ((kind, pos), (kind, pos))
        Lower and upper boundary per axis.  ``kind`` is ``"dirichlet"`` (an
        edge from the outermost node to a zero value at ``pos``) or
        ``"mirror"`` (a reflecting plane at ``pos``: no edge, and the
        outermost dual box extends up to ``pos``).
    """

    coords: Tuple[np.ndarray, ...]
    bounds: Tuple[Tuple[Tuple[str, float], Tuple[str, float]], ...]
    h: Optional[float] = None

    def __post_init__(self):
        coords = tuple(np.asarray(c, dtype=float).copy() for c in self.coords)
        for c in coords:
            c.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        bounds = tuple(((str(a[0]), float(a[1])), (str(b[0]), float(b[1])))
                       for a, b in self.bounds)
        object.__setattr__(self, "bounds", bounds)
        if len(coords) != len(bounds):
            raise DomainError("one boundary pair per axis is required")
        for c, ((k0, p0), (k1, p1)) in zip(coords, bounds):
            if c.ndim != 1 or len(c) == 0:
                raise DomainError("each axis needs at least one node")
            if np.any(np.diff(c) <= 0):
                raise DomainError("node positions must be strictly increasing")
            for k in (k0, k1):
                if k not in (DIRICHLET, MIRROR):
                    raise DomainError(f"unknown boundary kind {k!r}")
            if p0 > c[0] or p1 < c[-1] or (k0 == DIRICHLET and p0 == c[0]) or (
                    k1 == DIRICHLET and p1 == c[-1]):
                raise DomainError("boundary positions must enclose the nodes")
        duals = []
        for c, ((k0, p0), (k1, p1)) in zip(coords, bounds):
            gaps = np.diff(c)
            w = np.zeros(len(c))
            w[:-1] += gaps / 2
            w[1:] += gaps / 2
            w[0] += (c[0] - p0) if k0 == MIRROR else (c[0] - p0) / 2
            w[-1] += (p1 - c[-1]) if k1 == MIRROR else (p1 - c[-1]) / 2
            if np.any(w <= 0):
                raise DomainError("degenerate dual cell")
            w.setflags(write=False)
            duals.append(w)
        object.__setattr__(self, "_duals", tuple(duals))

    @classmethod
    def uniform(cls, box: Sequence[Tuple[float, float]], h: float) -> "CartesianGrid":
        """Dirichlet box grid with spacing ``h``; box extents must be multiples of ``h``."""
        coords = []
        for lo, hi in box:
            m = (hi - lo) / h
            if abs(m - round(m)) > 1e-12 * max(1.0, m) or round(m) < 2:
                raise DomainError(f"box extent {hi - lo} is not a multiple of h={h}")
            m = int(round(m))
            coords.append(lo + h * np.arange(1, m))
        return cls(tuple(coords), tuple(((DIRICHLET, lo), (DIRICHLET, hi)) for lo, hi in box), h=float(h))

    @classmethod
    def graded(cls, box, centers_per_axis, h_fine, h_coarse, core, ratio=1.25):
        """Dirichlet box grid refined to ``h_fine`` around the given centers."""
        coords = [graded_axis(lo, hi, c, h_fine, h_coarse, core, ratio)
                  for (lo, hi), c in zip(box, centers_per_axis)]
        return cls(tuple(coords), tuple(((DIRICHLET, lo), (DIRICHLET, hi)) for lo, hi in box))

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(len(c) for c in self.coords)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def duals(self):
        """Per-axis dual widths."""
        return self._duals

    @property
    def min_spacing(self) -> float:
        out = math.inf
        for c, ((k0, p0), (k1, p1)) in zip(self.coords, self.bounds):
            gaps = list(np.diff(c))
            if k0 == DIRICHLET:
                gaps.append(c[0] - p0)
            if k1 == DIRICHLET:
                gaps.append(p1 - c[-1])
            if gaps:
                out = min(out, min(gaps))
        return out

    def weights(self) -> np.ndarray:
        """Node volumes, flattened in C order."""
        w = np.ones(self.shape)
        for a, d in enumerate(self.duals):
            sh = [1] * self.n
            sh[a] = -1
            w = w * d.reshape(sh)
        return w.ravel()

    def points(self) -> np.ndarray:
        """Node coordinates as an ``(size, n)`` array in C order."""
        mesh = np.meshgrid(*self.coords, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def same_as(self, other) -> bool:
        return self is other or (
            self.bounds == other.bounds
            and len(self.coords) == len(other.coords)
            and all(np.array_equal(a, b) for a, b in zip(self.coords, other.coords)))

    def describe(self) -> dict:
        return {
            "n": self.n,
            "shape": list(self.shape),
            "h": self.h,
            "bounds": [[list(a), list(b)] for a, b in self.bounds],
        }


def axis_laplacian(coords, bounds) -> sp.csr_matrix:
    """Symmetric 1-D Laplacian ``D^{-1/2} K D^{-1/2}`` of one grid axis."""
    grid = CartesianGrid((coords,), (bounds,))
    c = grid.coords[0]
    (k0, p0), (k1, p1) = grid.bounds[0]
    dual = grid.duals[0]
    m = len(c)
    inv = 1.0 / np.diff(c)
    diag = np.zeros(m)
    diag[:-1] += inv
    diag[1:] += inv
    if k0 == DIRICHLET:
        diag[0] += 1.0 / (c[0] - p0)
    if k1 == DIRICHLET:
        diag[-1] += 1.0 / (p1 - c[-1])
    s = 1.0 / np.sqrt(dual)
    off = -inv * s[:-1] * s[1:]
    return sp.diags([off, diag * s * s, off], [-1, 0, 1], shape=(m, m), format="csr")


def _kron_sum(mats):
    n = len(mats)
    sizes = [m.shape[0] for m in mats]
    total = None
    for a, m in enumerate(mats):
        left = sp.identity(int(np.prod(sizes[:a])), format="csr")
        right = sp.identity(int(np.prod(sizes[a + 1:])), format="csr")
        term = sp.kron(sp.kron(left, m, format="csr"), right, format="csr")
        total = term if total is None else total + term
    return total.tocsr()


def _symmetric_full(grid: CartesianGrid) -> sp.csr_matrix:
    return _kron_sum([axis_laplacian(c, b) for c, b in zip(grid.coords, grid.bounds)])


def energy_matrix(grid: CartesianGrid) -> sp.csr_matrix:
    """Unweighted Dirichlet-energy matrix ``K`` over all grid nodes.

    ``u @ K @ u`` is the discrete ``int |grad u|^2`` for nodal values ``u``
    with zero data on Dirichlet sides.
    """
    s = np.sqrt(grid.weights())
    D = sp.diags(s)
    return (D @ _symmetric_full(grid) @ D).tocsr()


@dataclass(frozen=True, eq=False)
class NodeMask:
    """Active (unknown) nodes of a grid; inactive nodes carry zero Dirichlet data."""

    grid: CartesianGrid
    active: np.ndarray = field(repr=False)
    hole_counts: Optional[np.ndarray] = field(default=None, repr=False)
    layout: Optional[HoleLayout] = field(default=None, repr=False)

    def __post_init__(self):
        act = np.asarray(self.active, dtype=bool).ravel().copy()
        if act.size != self.grid.size:
            raise GridMismatchError("mask size does not match grid")
        act.setflags(write=False)
        object.__setattr__(self, "active", act)
        index = np.full(act.size, -1, dtype=np.int64)
        index[act] = np.arange(int(act.sum()))
        index.setflags(write=False)
        object.__setattr__(self, "_index", index)

    @classmethod
    def full(cls, grid: CartesianGrid) -> "NodeMask":
        return cls(grid, np.ones(grid.size, dtype=bool))

    @classmethod
    def from_layout(cls, grid: CartesianGrid, layout: HoleLayout) -> "NodeMask":
        """Mask every node lying in a closed hole of ``layout``."""
        if layout.spec.n != grid.n:
            raise GridMismatchError("layout and grid dimensions differ")
        hole = np.zeros(grid.shape, dtype=bool)
        counts = np.zeros(layout.n_holes, dtype=np.int64)
        d = layout.d
        for k, c in enumerate(layout.centers):
            sl = []
            for ax, x in enumerate(grid.coords):
                i0 = int(np.searchsorted(x, c[ax] - d * (1 + 1e-12), side="left"))
                i1 = int(np.searchsorted(x, c[ax] + d * (1 + 1e-12), side="right"))
                sl.append(slice(i0, i1))
            sub = np.meshgrid(*[x[s] for x, s in zip(grid.coords, sl)], indexing="ij")
            off = np.stack([s_ - c[ax] for ax, s_ in enumerate(sub)], axis=-1)
            inside = layout.shape.contains(off)
            counts[k] = int(inside.sum())
            hole[tuple(sl)] |= inside
        counts.setflags(write=False)
        return cls(grid, ~hole.ravel(), counts, layout)

    @property
    def N(self) -> int:
        return int(self.active.sum())

    @property
    def index(self) -> np.ndarray:
        """Map grid node -> active index (``-1`` for masked nodes)."""
        return self._index

    def weights(self) -> np.ndarray:
        return self.grid.weights()[self.active]

    def points(self) -> np.ndarray:
        return self.grid.points()[self.active]

    def check_resolved(self):
        if self.hole_counts is not None and np.any(self.hole_counts == 0):
            k = int(np.argmin(self.hole_counts))
            raise ResolutionError(
                f"hole {k} at {self.layout.centers[k].tolist()} masks no grid node")

    def contains(self, other: "NodeMask") -> bool:
        """True when every node active in ``other`` is active here."""
        return bool(np.all(self.active[other.active]))


@dataclass(frozen=True, eq=False)
class GridOperator:
    """Discrete ``-Delta + q`` on the active nodes of a mask.

    ``matrix`` is symmetric in orthonormal coordinates (see module notes).
    """

    mask: NodeMask
    matrix: sp.csr_matrix = field(repr=False)
    q: float = 0.0

    @property
    def N(self) -> int:
        return self.matrix.shape[0]

    @property
    def grid(self) -> CartesianGrid:
        return self.mask.grid

    def weights(self) -> np.ndarray:
        return self.mask.weights()

    def shifted(self, q: float) -> "GridOperator":
        """Same Laplacian with the potential replaced by ``q``."""
        I = sp.identity(self.N, format="csr")
        return GridOperator(self.mask, (self.matrix + (q - self.q) * I).tocsr(), float(q))

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def apply(self, f: "GridFunction") -> "GridFunction":
        """Apply the operator to nodal values (not orthonormal coordinates)."""
        _same_mask(f.mask, self.mask)
        s = np.sqrt(self.weights())
        return GridFunction(self.mask, (self.matrix @ (s * f.values)) / s)


def assemble_laplacian(mask: NodeMask, q: float = 0.0) -> GridOperator:
    """Assemble ``-Delta + q`` on the active nodes of ``mask``."""
    mask.check_resolved()
    full = _symmetric_full(mask.grid)
    if mask.N < mask.grid.size:
        idx = np.flatnonzero(mask.active)
        full = full[idx][:, idx]
    if q:
        full = full + float(q) * sp.identity(full.shape[0], format="csr")
    full = full.tocsr()
    full.sort_indices()
    return GridOperator(mask, full, float(q))


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Nodal values on the active nodes of a mask."""

    mask: NodeMask
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mask.N,):
            raise GridMismatchError(f"expected {self.mask.N} values, got {v.shape}")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, mask: NodeMask, fn) -> "GridFunction":
        pts = mask.points()
        return cls(mask, np.asarray(fn(*pts.T), dtype=float) * np.ones(len(pts)))

    def tilde(self) -> np.ndarray:
        """Orthonormal coordinates ``sqrt(w) * values``."""
        return np.sqrt(self.mask.weights()) * self.values

    @classmethod
    def from_tilde(cls, mask, x) -> "GridFunction":
        return cls(mask, np.asarray(x) / np.sqrt(mask.weights()))

    def inner(self, other: "GridFunction") -> float:
        _same_mask(self.mask, other.mask)
        return float(np.sum(self.mask.weights() * self.values * other.values))

    def norm(self) -> float:
        return math.sqrt(max(self.inner(self), 0.0))


def _same_mask(a: NodeMask, b: NodeMask):
    if a is not b and not (a.grid.same_as(b.grid) and np.array_equal(a.active, b.active)):
        raise GridMismatchError("functions live on different masks")


def restriction_matrix(source: NodeMask, target: NodeMask) -> sp.csr_matrix:
    """Selection matrix ``source -> target`` (valid in both coordinate systems)."""
    if not source.grid.same_as(target.grid):
        raise GridMismatchError("masks live on different grids")
    if not source.contains(target):
        raise GridMismatchError("target mask has nodes that are inactive in the source")
    cols = source.index[target.active]
    M = target.N
    return sp.csr_matrix((np.ones(M), (np.arange(M), cols)), shape=(M, source.N))


def restrict(f: GridFunction, target: NodeMask) -> GridFunction:
    """Restriction to the nodes active in ``target``."""
    R = restriction_matrix(f.mask, target)
    return GridFunction(target, R @ f.values)


def extend_zero(u: GridFunction, target: NodeMask) -> GridFunction:
    """Extension by zero onto the (larger) mask ``target``."""
    R = restriction_matrix(target, u.mask)
    return GridFunction(target, R.T @ u.values)


def _overlap_1d(coords, dual_lo, dual_hi, a, b):
    lo = np.maximum(dual_lo, a)
    hi = np.minimum(dual_hi, b)
    return np.clip(hi - lo, 0.0, None)


def _dual_edges(grid: CartesianGrid):
    out = []
    for c, d, ((k0, p0), _) in zip(grid.coords, grid.duals, grid.bounds):
        lo = np.empty(len(c))
        lo[1:] = (c[:-1] + c[1:]) / 2
        lo[0] = p0 if k0 == MIRROR else (c[0] + p0) / 2
        out.append((lo, lo + d))
    return out


def cell_mean_weights(mask: NodeMask, lo, hi):
    """Quadrature for the mean over the box ``[lo, hi]``.

    Returns ``(idx, wts)`` with active-node indices and weights summing to 1:
    each node is weighted by the overlap of its dual box with the cell, and
    the weights are normalized by the total overlap of active nodes.
    """
    grid = mask.grid
    per_axis = []
    for (dlo, dhi), c, a, b in zip(_dual_edges(grid), grid.coords, lo, hi):
        ov = _overlap_1d(c, dlo, dhi, a, b)
        nz = np.flatnonzero(ov > 0)
        per_axis.append((nz, ov[nz]))
    if any(len(nz) == 0 for nz, _ in per_axis):
        raise DomainError("cell contains no grid nodes")
    sub_idx = np.ravel_multi_index(
        np.meshgrid(*[nz for nz, _ in per_axis], indexing="ij"), grid.shape).ravel()
    vol = np.ones(1)
    for _, ov in per_axis:
        vol = np.multiply.outer(vol, ov)
    vol = vol.ravel()
    act = mask.active[sub_idx]
    if not np.any(act):
        raise DomainError("cell contains no active grid nodes")
    wts = vol[act]
    return mask.index[sub_idx[act]], wts / wts.sum()


def cell_mean(f: GridFunction, cell) -> float:
    """Mean value of ``f`` over the box ``cell = (lo, hi)``."""
    idx, wts = cell_mean_weights(f.mask, *cell)
    return float(np.dot(wts, f.values[idx]))


def export_coo(op: GridOperator, path) -> None:
    """Write ``row col value`` lines (0-based, orthonormal coordinates)."""
    coo = op.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"% {op.N} {op.N} {coo.nnz}\n")
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {float(v)!r}\n")


def export_function(f: GridFunction, path) -> None:
    """CSV export: one JSON header line, then ``node,coords...,value`` rows."""
    grid = f.mask.grid
    header = grid.describe()
    header["active_count"] = f.mask.N
    header["masked_nodes"] = np.flatnonzero(~f.mask.active).tolist()
    pts = f.mask.points()
    nodes = np.flatnonzero(f.mask.active)
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        fh.write("node," + ",".join(f"x{a}" for a in range(grid.n)) + ",value\n")
        for k in range(f.mask.N):
            fh.write(f"{nodes[k]}," + ",".join(repr(float(x)) for x in pts[k])
                     + f",{float(f.values[k])!r}\n")


def read_function(path):
    """Read back ``(header, nodes, values)`` written by :func:`export_function`."""
    with open(path) as fh:
        header = json.loads(fh.readline()[2:])
        fh.readline()
        rows = [line.strip().split(",") for line in fh if line.strip()]
    nodes = np.array([int(r[0]) for r in rows], dtype=np.int64)
    values = np.array([float(r[-1]) for r in rows])
    return header, nodes, values
