"""Closeness of two self-adjoint operators acting in different spaces.

Given PSD forms ``A`` (full space, dimension N) and ``A_eps`` (perforated
space, dimension M) and four identification maps ``J, J' , J1, J1'``, the
eight best constants below quantify how nearly the pair is unitarily
equivalent.  They control the resolvent differences:

=================================  ===========
``||R_eps J - J R||``              ``4 delta``
``||J' R_eps - R J'||``            ``6 delta``
``||J' R_eps J - R||``             ``9 delta``
``||R_eps - J R J'||``             ``13 delta``
=================================  ===========

with ``R = (A + 1)^{-1}``, ``R_eps = (A_eps + 1)^{-1}``.

Internally everything is converted to orthonormal coordinates
(``x_tilde = W^{1/2} x``) so that all norms are spectral norms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .capacity import (CapacityProblem, PotentialField, capacity_ball_analytic,
                       capacity_numeric)
from .exceptions import DomainError, NotPSDError, ResolutionError, SizeLimitError, SpectralGapError
from .geometry import HoleLayout
from .grid import (CartesianGrid, NodeMask, assemble_laplacian, cell_mean_weights,
                   restriction_matrix)
from .linalg import DENSE_LIMIT, hausdorff_distance

__all__ = [
    "FormPair",
    "IdentificationSet",
    "ClosenessConstants",
    "ClosenessReport",
    "J1Map",
    "smooth_cutoff",
    "build_J1",
    "condition_constants",
    "verify_resolvent_bound",
    "verify_functional_calculus",
    "verify_spectral_hausdorff",
    "random_instance",
    "pde_instance",
    "BOUND_FACTORS",
    "SLACK",
]

#: multiples of delta bounding the four resolvent differences
BOUND_FACTORS = {"resolvent": 4.0, "extension": 6.0, "sandwich": 9.0, "reverse": 13.0}
SLACK = 1e-9
SYM_TOL = 1e-12


def _dense(M):
    return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)


def _check_psd(A, name):
    A = _dense(A)
    scale = max(np.abs(A).max(), 1e-300)
    if np.abs(A - A.T).max() > SYM_TOL * scale:
        raise NotPSDError(f"{name} is not symmetric")
    lam = sla.eigvalsh((A + A.T) / 2)
    if lam.size and lam[0] < -1e-10 * max(scale, 1.0):
        raise NotPSDError(f"{name} has a negative eigenvalue {lam[0]:.3e}")
    return (A + A.T) / 2


@dataclass(frozen=True, eq=False)
class FormPair:
    """Two PSD forms in orthonormal coordinates plus the space weights.

    ``A`` and ``A_eps`` are symmetric matrices of the forms with respect to
    the weighted inner products; ``w`` and ``w_eps`` are the weights that
    turn nodal values into orthonormal coordinates.
    """

    A: np.ndarray = field(repr=False)
    A_eps: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    w_eps: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "A", _check_psd(self.A, "A"))
        object.__setattr__(self, "A_eps", _check_psd(self.A_eps, "A_eps"))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))
        object.__setattr__(self, "w_eps", np.asarray(self.w_eps, dtype=float))
        if self.w.shape != (self.N,) or self.w_eps.shape != (self.M,):
            raise DomainError("weights do not match the form dimensions")
        if np.any(self.w <= 0) or np.any(self.w_eps <= 0):
            raise DomainError("weights must be positive")

    @classmethod
    def from_natural(cls, S, S_eps, w, w_eps):
        """Build from energy matrices ``S`` with ``a[u, v] = u @ S @ v`` in nodal values."""
        w = np.asarray(w, dtype=float)
        w_eps = np.asarray(w_eps, dtype=float)
        a = 1 / np.sqrt(w)
        b = 1 / np.sqrt(w_eps)
        return cls(a[:, None] * _dense(S) * a[None, :], b[:, None] * _dense(S_eps) * b[None, :],
                   w, w_eps)

    @property
    def N(self):
        return self.A.shape[0]

    @property
    def M(self):
        return self.A_eps.shape[0]

    def rescaled(self, c):
        """Same pair with both weights multiplied by ``c``."""
        return FormPair(self.A, self.A_eps, c * self.w, c * self.w_eps)


@dataclass(frozen=True, eq=False)
class IdentificationSet:
    """``J: full -> perforated``, ``Jp: perforated -> full`` and their form versions.

    Maps act on nodal values (not orthonormal coordinates).
    """

    J: np.ndarray = field(repr=False)
    Jp: np.ndarray = field(repr=False)
    J1: np.ndarray = field(repr=False)
    J1p: np.ndarray = field(repr=False)
    k: int = 2

    def __post_init__(self):
        for name in ("J", "Jp", "J1", "J1p"):
            object.__setattr__(self, name, _dense(getattr(self, name)))
        if self.k not in (1, 2):
            raise DomainError("order k must be 1 or 2")
        M, N = self.J.shape
        if self.J1.shape != (M, N) or self.Jp.shape != (N, M) or self.J1p.shape != (N, M):
            raise DomainError("identification maps have inconsistent shapes")

    def tilde(self, pair: FormPair):
        """The four maps in orthonormal coordinates."""
        sw, swe = np.sqrt(pair.w), np.sqrt(pair.w_eps)
        fwd = lambda X: swe[:, None] * X / sw[None, :]
        bwd = lambda X: sw[:, None] * X / swe[None, :]
        return fwd(self.J), bwd(self.Jp), fwd(self.J1), bwd(self.J1p)


@dataclass(frozen=True)
class ClosenessConstants:
    c1a: float
    c1b: float
    c2: float
    c3a: float
    c3b: float
    c4a: float
    c4b: float
    c5: float
    k: int = 2

    NAMES = ("c1a", "c1b", "c2", "c3a", "c3b", "c4a", "c4b", "c5")

    @property
    def delta(self) -> float:
        return max(getattr(self, n) for n in self.NAMES)

    def as_dict(self):
        out = {n: getattr(self, n) for n in self.NAMES}
        out["delta"] = self.delta
        out["k"] = self.k
        return out


@dataclass
class ClosenessReport:
    constants: ClosenessConstants
    lhs: dict
    slack: float = SLACK

    @property
    def delta(self):
        return self.constants.delta

    @property
    def bound_ok(self) -> dict:
        d = self.delta
        return {key: bool(v <= BOUND_FACTORS[key] * d + self.slack) for key, v in self.lhs.items()}

    @property
    def ok(self) -> bool:
        return all(self.bound_ok.values())

    @property
    def ratios(self) -> dict:
        d = self.delta
        return {key: (v / d if d > 0 else (0.0 if v == 0 else math.inf))
                for key, v in self.lhs.items()}

    def to_dict(self):
        return {"constants": self.constants.as_dict(), "lhs": dict(self.lhs),
                "ratios": self.ratios, "bound_ok": self.bound_ok, "ok": self.ok,
                "slack": self.slack}


def _spec_fn(A, fn):
    lam, Q = sla.eigh(A)
    return (Q * fn(lam)) @ Q.T


def _norm(X) -> float:
    return float(sla.svdvals(X)[0]) if X.size else 0.0


def _check_size(pair, dense_limit):
    if max(pair.N, pair.M) > dense_limit:
        raise SizeLimitError(f"dimensions {pair.N}, {pair.M} exceed the dense limit {dense_limit}")


def condition_constants(pair: FormPair, ids: IdentificationSet,
                        dense_limit: int = DENSE_LIMIT) -> ClosenessConstants:
    """Exact best constants of the eight closeness conditions (dense SVD)."""
    _check_size(pair, dense_limit)
    J, Jp, J1, J1p = ids.tilde(pair)
    A, Ae = pair.A, pair.A_eps
    N, M = pair.N, pair.M
    Ah = _spec_fn(A, lambda l: (np.maximum(l, 0) + 1) ** -0.5)
    Aeh = _spec_fn(Ae, lambda l: (np.maximum(l, 0) + 1) ** -0.5)
    Ak = Ah if ids.k == 1 else _spec_fn(A, lambda l: 1 / (np.maximum(l, 0) + 1))
    return ClosenessConstants(
        c1a=_norm((J - J1) @ Ah),
        c1b=_norm((Jp - J1p) @ Aeh),
        c2=_norm(J.T - Jp),
        c3a=max(0.0, _norm(J) - 1.0),
        c3b=max(0.0, _norm(Jp) - 1.0),
        c4a=_norm((np.eye(N) - Jp @ J) @ Ah),
        c4b=_norm((np.eye(M) - J @ Jp) @ Aeh),
        c5=_norm(Ak @ (J1.T @ Ae - A @ J1p) @ Aeh),
        k=ids.k,
    )


def resolvent_differences(pair: FormPair, ids: IdentificationSet) -> dict:
    """The four resolvent-difference norms bounded by multiples of delta."""
    J, Jp, _, _ = ids.tilde(pair)
    R = _spec_fn(pair.A, lambda l: 1 / (l + 1))
    Re = _spec_fn(pair.A_eps, lambda l: 1 / (l + 1))
    return {
        "resolvent": _norm(Re @ J - J @ R),
        "extension": _norm(Jp @ Re - R @ Jp),
        "sandwich": _norm(Jp @ Re @ J - R),
        "reverse": _norm(Re - J @ R @ Jp),
    }


def verify_resolvent_bound(pair: FormPair, ids: IdentificationSet,
                           constants: Optional[ClosenessConstants] = None,
                           slack: float = SLACK, dense_limit: int = DENSE_LIMIT) -> ClosenessReport:
    """Measure the four resolvent differences and compare with 4/6/9/13 delta."""
    _check_size(pair, dense_limit)
    if constants is None:
        constants = condition_constants(pair, ids, dense_limit)
    return ClosenessReport(constants, resolvent_differences(pair, ids), slack)


@dataclass
class CalculusReport:
    psi: str
    delta: float
    intertwining: float
    sandwich: float
    rank: Optional[tuple] = None

    @property
    def ratios(self):
        d = self.delta
        f = lambda v: v / d if d > 0 else (0.0 if v == 0 else math.inf)
        return {"intertwining": f(self.intertwining), "sandwich": f(self.sandwich)}

    def to_dict(self):
        return {"psi": self.psi, "delta": self.delta, "intertwining": self.intertwining,
                "sandwich": self.sandwich, "ratios": self.ratios,
                "rank": list(self.rank) if self.rank else None}


def verify_functional_calculus(pair: FormPair, ids: IdentificationSet,
                               constants: Optional[ClosenessConstants] = None,
                               psi: str = "heat", t: float = 1.0, interval=None,
                               gap_tol: float = 1e-6,
                               dense_limit: int = DENSE_LIMIT) -> CalculusReport:
    """Compare ``psi(A_eps)`` with ``psi(A)`` through the identification maps.

    ``psi`` is ``"heat"`` (``exp(-t lam)``) or ``"projection"`` (indicator of
    the open ``interval``).  Reports ``||psi(A_eps) J - J psi(A)||`` and
    ``||psi(A_eps) - J psi(A) J'||``; for projections also both ranks.
    """
    _check_size(pair, dense_limit)
    if constants is None:
        constants = condition_constants(pair, ids, dense_limit)
    J, Jp, _, _ = ids.tilde(pair)
    lam, Q = sla.eigh(pair.A)
    lame, Qe = sla.eigh(pair.A_eps)
    rank = None
    if psi == "heat":
        if t < 0:
            raise DomainError("t must be nonnegative")
        fn = lambda l: np.exp(-t * l)
    elif psi == "projection":
        a, b = interval
        for end in (a, b):
            for spec, name in ((lam, "A"), (lame, "A_eps")):
                if np.any(np.abs(spec - end) < gap_tol):
                    raise SpectralGapError(f"interval end {end} lies on the spectrum of {name}")
        fn = lambda l: ((l > a) & (l < b)).astype(float)
        rank = (int(fn(lam).sum()), int(fn(lame).sum()))
    else:
        raise DomainError(f"unknown function {psi!r}")
    P = (Q * fn(lam)) @ Q.T
    Pe = (Qe * fn(lame)) @ Qe.T
    return CalculusReport(psi, constants.delta, _norm(Pe @ J - J @ P),
                          _norm(Pe - J @ P @ Jp), rank)


@dataclass
class HausdorffReport:
    distance: float
    delta: float

    def to_dict(self):
        return {"distance": self.distance, "delta": self.delta}


def verify_spectral_hausdorff(pair: FormPair, ids: Optional[IdentificationSet] = None,
                              constants: Optional[ClosenessConstants] = None,
                              dense_limit: int = DENSE_LIMIT) -> HausdorffReport:
    """Hausdorff distance between ``1/(1 + spec A)`` and ``1/(1 + spec A_eps)``."""
    _check_size(pair, dense_limit)
    if constants is None and ids is not None:
        constants = condition_constants(pair, ids, dense_limit)
    lam = sla.eigvalsh(pair.A)
    lame = sla.eigvalsh(pair.A_eps)
    dist = hausdorff_distance(1 / (1 + np.maximum(lam, 0)), 1 / (1 + np.maximum(lame, 0)))
    return HausdorffReport(dist, constants.delta if constants is not None else math.nan)


# ---------------------------------------------------------------- J1 on grids

def smooth_cutoff(t):
    """1 for ``t <= 1``, 0 for ``t >= 2``, cubic smoothstep in between."""
    t = np.asarray(t, dtype=float)
    s = np.clip(t - 1.0, 0.0, 1.0)
    return 1.0 - 3 * s * s + 2 * s ** 3


def _log_cutoff(r, d, eps):
    out = np.ones_like(r)
    out[r >= eps * eps] = 0.0
    band = (r > d) & (r < eps * eps)
    out[band] = (np.log(r[band]) - 2 * math.log(eps)) / (math.log(d) - 2 * math.log(eps))
    return out


@dataclass(frozen=True, eq=False)
class _HoleTerms:
    support: np.ndarray      # full-grid node ids where a cutoff is nonzero
    chi: np.ndarray
    coef: np.ndarray         # chi - H * chi_hat on the support
    mean_idx: np.ndarray     # full-grid node ids of the cell-mean stencil
    mean_w: np.ndarray


@dataclass(frozen=True, eq=False)
class J1Map:
    """Form-domain identification ``f - sum_i P_i f - sum_i Q_i f``.

    ``P_i f = (f - f_i) chi_i`` and ``Q_i f = f_i H_i chi_hat_i`` where
    ``f_i`` is the mean of ``f`` over cell ``i``, ``chi_i`` a cutoff at the
    hole scale, ``chi_hat_i`` a cutoff at the security-distance scale and
    ``H_i`` the equilibrium potential.  Works on nodal values of the full
    mask and returns nodal values on the perforated mask.
    """

    full: NodeMask
    perforated: NodeMask
    terms: tuple = field(repr=False)
    cutoff_mode: str = "smooth"
    flags: tuple = ()

    def apply_full(self, f):
        f = np.asarray(f, dtype=float)
        g = f.copy()
        for t in self.terms:
            fi = float(np.dot(t.mean_w, f[t.mean_idx]))
            g[t.support] -= t.chi * (f[t.support] - fi) + fi * (t.chi - t.coef)
        return g

    def apply(self, f):
        """``J1 f`` restricted to the perforated mask."""
        return self.apply_full(f)[self.perforated.active[self.full.active]]

    def full_matrix(self) -> sp.csr_matrix:
        """Matrix on the full mask, before restriction (rows of hole nodes are zero)."""
        N = self.full.N
        rows, cols, vals = [np.arange(N)], [np.arange(N)], [np.ones(N)]
        for t in self.terms:
            rows.append(t.support)
            cols.append(t.support)
            vals.append(-t.chi)
            rr, cc = np.meshgrid(t.support, t.mean_idx, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(np.outer(t.coef, t.mean_w).ravel())
        M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(N, N)).tocsr()
        M.sum_duplicates()
        return M

    def matrix(self) -> sp.csr_matrix:
        keep = np.flatnonzero(self.perforated.active[self.full.active])
        return self.full_matrix()[keep]


def _local_spacing(grid: CartesianGrid, center, radius):
    h = 0.0
    for x, c in zip(grid.coords, center):
        i0 = max(int(np.searchsorted(x, c - radius)) - 1, 0)
        i1 = min(int(np.searchsorted(x, c + radius, side="right")) + 1, len(x))
        seg = x[i0:i1]
        if len(seg) > 1:
            h = max(h, float(np.diff(seg).max()))
    return h


def _ball_nodes(mask: NodeMask, center, radius):
    grid = mask.grid
    sl = []
    for x, c in zip(grid.coords, center):
        sl.append(np.arange(int(np.searchsorted(x, c - radius, side="left")),
                            int(np.searchsorted(x, c + radius, side="right"))))
    ids = np.ravel_multi_index(np.meshgrid(*sl, indexing="ij"), grid.shape).ravel()
    pts = np.stack(np.meshgrid(*[x[s] for x, s in zip(grid.coords, sl)], indexing="ij"),
                   axis=-1).reshape(-1, grid.n)
    off = pts - np.asarray(center)
    r = np.sqrt(np.sum(off * off, axis=1))
    keep = (r <= radius) & mask.active[ids]
    return ids[keep], off[keep], r[keep]


def build_J1(layout: HoleLayout, full: NodeMask, perforated: NodeMask,
             potential: Optional[PotentialField] = None, n2_cutoff: str = "auto",
             min_resolution: float = 4.0) -> J1Map:
    """Assemble the form-domain identification for a perforated grid.

    Parameters
    ----------
    layout : HoleLayout
    full, perforated : NodeMask
        Hole-free and perforated masks on the same grid.
    potential : PotentialField, optional
        Equilibrium potential of one hole (centered at the origin).  Balls use
        the closed form; other shapes default to a grid solve at ``h = d/8``.
    n2_cutoff : {"auto", "log", "fallback"}
        Planar cutoff: logarithmic on ``(d, eps**2)``, or the smooth cutoff at
        scale ``2 d``.  ``"auto"`` falls back when the logarithmic band holds
        no grid node; ``"log"`` raises :class:`ResolutionError` instead.
    min_resolution : float
        Smallest admissible ``d / h`` near each hole.
    """
    n, d, eps, kappa = layout.spec.n, layout.d, layout.epsilon, layout.kappa
    if n2_cutoff not in ("auto", "log", "fallback"):
        raise DomainError(f"unknown planar cutoff {n2_cutoff!r}")
    if d + kappa * eps > eps / 2 * (1 + 1e-12):
        raise DomainError("security distance violated")
    if full.N != full.grid.size:
        raise DomainError("the full mask must be hole-free")
    if not full.contains(perforated):
        raise DomainError("perforated mask must be a subset of the full mask")
    if potential is None:
        if layout.shape.kind == "ball":
            potential = PotentialField.analytic_ball(n, d)
        else:
            potential = capacity_numeric(CapacityProblem(n, layout.shape), d / 8).field
    mode = "smooth"
    flags = []
    if n == 2 and n2_cutoff != "fallback":
        mode = "log"
    terms = []
    for k, c in enumerate(layout.centers):
        h_loc = _local_spacing(full.grid, c, 2 * d)
        if d < min_resolution * h_loc * (1 - 1e-12):
            raise ResolutionError(f"hole {k}: d/h = {d / h_loc:.3g} below {min_resolution}")
        if mode == "log":
            _, _, rb = _ball_nodes(full, c, eps * eps)
            if not np.any((rb > d) & (rb < eps * eps)):
                if n2_cutoff == "log":
                    raise ResolutionError(
                        f"hole {k}: no grid node in the logarithmic band ({d:.3g}, {eps * eps:.3g})")
                mode = "smooth"
                flags.append("cutoff fallback")
        r_chi = eps * eps if mode == "log" else 2 * d
        ids, off, r = _ball_nodes(full, c, max(r_chi, d + kappa * eps))
        chi = _log_cutoff(r, d, eps) if mode == "log" else smooth_cutoff(r / d)
        chi_hat = smooth_cutoff((2.0 / kappa) * (r - d) / eps)
        H = potential.evaluate(off)
        H[layout.shape.contains(off)] = 1.0
        coef = chi - H * chi_hat
        nz = (chi != 0) | (coef != 0)
        lo, hi = layout.cell_bounds(k)
        midx, mw = cell_mean_weights(full, lo, hi)
        terms.append(_HoleTerms(ids[nz], chi[nz], coef[nz], midx, mw))
    if n == 2 and mode == "log" and "cutoff fallback" in flags:
        mode = "mixed"
    return J1Map(full, perforated, tuple(terms), mode, tuple(sorted(set(flags))))


@dataclass
class PDEInstance:
    pair: FormPair
    ids: IdentificationSet
    layout: HoleLayout
    q: float
    j1: J1Map = field(repr=False)
    full: NodeMask = field(repr=False)
    perforated: NodeMask = field(repr=False)


def pde_instance(layout: HoleLayout, grid: CartesianGrid, q: Optional[float] = None,
                 k: int = 2, min_resolution: float = 4.0, n2_cutoff: str = "auto",
                 dense_limit: int = DENSE_LIMIT, potential=None) -> PDEInstance:
    """Perforated Dirichlet Laplacian versus ``-Delta + q`` on the same grid.

    ``q`` defaults to the effective value ``cap / eps**n`` of a ball of
    radius ``d`` (analytic capacity).
    """
    full = NodeMask.full(grid)
    perf = NodeMask.from_layout(grid, layout)
    if max(full.N, perf.N) > dense_limit:
        raise SizeLimitError(f"{full.N} unknowns exceed the dense limit {dense_limit}")
    if q is None:
        n = layout.spec.n
        q = capacity_ball_analytic(n, layout.d) / layout.epsilon ** n
    A = assemble_laplacian(full, q)
    Ae = assemble_laplacian(perf, 0.0)
    pair = FormPair(A.dense(), Ae.dense(), full.weights(), perf.weights())
    J = restriction_matrix(full, perf)
    j1 = build_J1(layout, full, perf, potential=potential, n2_cutoff=n2_cutoff,
                  min_resolution=min_resolution)
    ids = IdentificationSet(J, J.T, j1.matrix(), J.T, k)
    return PDEInstance(pair, ids, layout, float(q), j1, full, perf)


def random_instance(rng: np.random.Generator, max_dim: int = 12, k: Optional[int] = None):
    """A random pair with random identification maps and random weights.

    Mixes near-identical pairs (same dimension, maps close to the identity)
    with unrelated ones so that delta ranges over several decades.
    """
    N = int(rng.integers(1, max_dim + 1))
    near = rng.random() < 0.4
    M = N if near else int(rng.integers(1, max_dim + 1))
    if k is None:
        k = int(rng.integers(1, 3))

    def rpsd(m, scale):
        X = rng.standard_normal((m, m)) * scale
        return X @ X.T

    A = rpsd(N, rng.uniform(0.1, 3.0))
    if near:
        E = rng.standard_normal((N, N)) * rng.uniform(0.0, 0.3)
        Ae = A + 0.1 * E @ E.T
        J = np.eye(N) + rng.standard_normal((N, N)) * rng.uniform(0.0, 0.1)
        Jp = J.T + rng.standard_normal((N, N)) * rng.uniform(0.0, 0.05)
    else:
        Ae = rpsd(M, rng.uniform(0.1, 3.0))
        J = rng.standard_normal((M, N)) * rng.uniform(0.1, 1.0)
        Jp = J.T.copy() if rng.random() < 0.5 else rng.standard_normal((N, M))
    J1 = J + rng.standard_normal(J.shape) * rng.uniform(0.0, 0.1)
    J1p = Jp + rng.standard_normal(Jp.shape) * rng.uniform(0.0, 0.1)
    w = rng.uniform(0.5, 2.0, N)
    we = rng.uniform(0.5, 2.0, M)
    pair = FormPair(A, Ae, w, we)
    # the random maps above are orthonormal-coordinate maps; express in nodal values
    sw, swe = np.sqrt(w), np.sqrt(we)
    to_nat_f = lambda X: X * sw[None, :] / swe[:, None]
    to_nat_b = lambda X: X * swe[None, :] / sw[:, None]
    ids = IdentificationSet(to_nat_f(J), to_nat_b(Jp), to_nat_f(J1), to_nat_b(J1p), k)
    return pair, ids
