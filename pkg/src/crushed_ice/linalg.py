"""Solvers and spectral tools for the symmetric grid operators.

All routines work in orthonormal coordinates (see :mod:`crushed_ice.grid`),
so "symmetric" means plain matrix symmetry and norms are Euclidean.  The
GridFunction-level wrappers convert to and from nodal values.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import ConvergenceError, DomainError, SizeLimitError, NotPSDError
from .grid import GridFunction, GridOperator, axis_laplacian

__all__ = [
    "SolveReport",
    "EigReport",
    "pcg",
    "ShiftedSolver",
    "cg_solve",
    "SeparableOperator",
    "lowest_eigenpairs",
    "semigroup_apply",
    "expm_action",
    "dense_opnorm",
    "dense_function",
    "hausdorff_distance",
    "DENSE_LIMIT",
]

CG_TOL = 1e-10
EIG_TOL = 1e-8
EXP_TOL = 1e-8
DENSE_LIMIT = 2000


@dataclass
class SolveReport:
    iterations: int
    residual: float
    wall_time: float
    converged: bool = True
    history: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {"iterations": self.iterations, "residual": self.residual,
                "converged": self.converged}


def pcg(A, b, M=None, tol=CG_TOL, maxiter=1000, x0=None):
    """Preconditioned conjugate gradients for SPD ``A``.

    Stops when ``||b - A x|| <= tol * ||b||``.  On failure raises
    :class:`ConvergenceError` carrying the iterate with the smallest residual.

    Returns
    -------
    x : ndarray
    report : SolveReport
    """
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b), SolveReport(0, 0.0, time.perf_counter() - t0, True, [0.0])
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    hist = [np.linalg.norm(r) / bnorm]
    best, best_res = x.copy(), hist[0]
    if hist[0] <= tol:
        return x, SolveReport(0, hist[0], time.perf_counter() - t0, True, hist)
    z = r if M is None else M @ r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise NotPSDError("matrix is not positive definite along the search direction")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        hist.append(res)
        if res < best_res:
            best, best_res = x.copy(), res
        if res <= tol:
            # guard against drift of the recursive residual
            true_res = np.linalg.norm(b - A @ x) / bnorm
            if true_res <= tol:
                return x, SolveReport(it, true_res, time.perf_counter() - t0, True, hist)
            r = b - A @ x
        z = r if M is None else M @ r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"CG stopped after {maxiter} iterations at relative residual {best_res:.3e}",
        best=best, residual=best_res)


def _amg(matrix):
    import pyamg

    ml = pyamg.ruge_stuben_solver(sp.csr_matrix(matrix), max_coarse=500)
    return ml.aspreconditioner(cycle="V")


class ShiftedSolver:
    """Reusable solver for ``(matrix + shift * I) x = b``.

    Small systems are factorized directly; larger ones use CG with an
    algebraic multigrid preconditioner built once.
    """

    def __init__(self, matrix, shift=1.0, tol=CG_TOL, direct_limit=DENSE_LIMIT,
                 maxiter=1000):
        self.A = (sp.csr_matrix(matrix) + shift * sp.identity(matrix.shape[0], format="csr")).tocsr()
        self.tol = tol
        self.maxiter = maxiter
        self.reports = []
        N = self.A.shape[0]
        if N <= direct_limit:
            self._lu = spla.splu(self.A.tocsc())
            self._M = None
        else:
            self._lu = None
            self._M = _amg(self.A)

    def solve(self, b):
        t0 = time.perf_counter()
        if self._lu is not None:
            x = self._lu.solve(np.asarray(b, dtype=float))
            bn = np.linalg.norm(b)
            res = float(np.linalg.norm(b - self.A @ x) / bn) if bn else 0.0
            rep = SolveReport(0, res, time.perf_counter() - t0, True)
        else:
            x, rep = pcg(self.A, b, self._M, self.tol, self.maxiter)
        self.reports.append(rep)
        return x

    __call__ = solve


def cg_solve(op: GridOperator, rhs: GridFunction, tol: float = CG_TOL, shift: float = 1.0,
             solver: Optional[ShiftedSolver] = None):
    """Solve ``(A + shift) u = f`` for a grid operator.

    The residual is measured in the weighted norm of the grid space.

    Returns
    -------
    u : GridFunction
    report : SolveReport
    """
    if solver is None:
        solver = ShiftedSolver(op.matrix, shift, tol)
    x = solver.solve(rhs.tilde())
    return GridFunction.from_tilde(op.mask, x), solver.reports[-1]


class SeparableOperator:
    """Exact functional calculus for ``-Delta + q`` on a hole-free tensor grid.

    The orthonormal-coordinate Laplacian is a Kronecker sum of 1-D matrices,
    so one small eigendecomposition per axis diagonalizes it.
    """

    def __init__(self, grid, q=0.0):
        self.grid = grid
        self.q = float(q)
        self.shape = grid.shape
        self.evals, self.evecs = [], []
        for c, b in zip(grid.coords, grid.bounds):
            lam, Q = sla.eigh(axis_laplacian(c, b).toarray())
            self.evals.append(lam)
            self.evecs.append(Q)

    @classmethod
    def from_operator(cls, op: GridOperator):
        if op.mask.N != op.grid.size:
            raise DomainError("separable calculus needs a hole-free operator")
        return cls(op.grid, op.q)

    def spectrum_grid(self):
        """All eigenvalues arranged on the tensor index grid."""
        total = np.full(self.shape, self.q)
        for a, lam in enumerate(self.evals):
            sh = [1] * len(self.shape)
            sh[a] = -1
            total = total + lam.reshape(sh)
        return total

    def _transform(self, X, inverse=False):
        for a, Q in enumerate(self.evecs):
            M = Q if inverse else Q.T
            X = np.moveaxis(np.tensordot(M, X, axes=(1, a)), 0, a)
        return X

    def apply(self, fn: Callable, x):
        """``fn(A) x`` for vectors in orthonormal coordinates (shape ``(N,)`` or ``(N, m)``)."""
        x = np.asarray(x, dtype=float)
        cols = x.reshape(x.shape[0], -1)
        lam = self.spectrum_grid()
        out = np.empty_like(cols)
        for j in range(cols.shape[1]):
            X = self._transform(cols[:, j].reshape(self.shape))
            out[:, j] = self._transform(fn(lam) * X, inverse=True).ravel()
        return out.reshape(x.shape)

    def lowest(self, k, vectors=True):
        """The ``k`` smallest eigenvalues (with multiplicity) and their vectors."""
        k = int(k)
        cand = [np.arange(min(k, len(l))) for l in self.evals]
        mesh = np.meshgrid(*cand, indexing="ij")
        idx = np.stack([m.ravel() for m in mesh], axis=-1)
        vals = self.q + sum(self.evals[a][idx[:, a]] for a in range(len(self.evals)))
        order = np.lexsort((np.arange(len(vals)), vals))[:k]
        if not vectors:
            return vals[order], None
        vecs = []
        for i in order:
            v = np.ones(1)
            for a in range(len(self.evals)):
                v = np.kron(v, self.evecs[a][:, idx[i, a]])
            vecs.append(v)
        return vals[order], np.array(vecs).T

    def min_eigenvalue(self):
        return float(self.q + sum(l[0] for l in self.evals))


@dataclass
class EigReport:
    k: int
    eigenvalues: np.ndarray
    residuals: np.ndarray
    method: str
    iterations: int = 0
    vectors: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def mu(self):
        return 1.0 / (self.eigenvalues + 1.0)

    def to_dict(self):
        return {"k": self.k, "eigenvalues": [float(v) for v in self.eigenvalues],
                "residuals": [float(v) for v in self.residuals], "method": self.method,
                "iterations": self.iterations}


def _matrix_of(op):
    return op.matrix if isinstance(op, GridOperator) else sp.csr_matrix(op)


def lowest_eigenpairs(op, k: int, tol: float = EIG_TOL, seed: int = 0, method: str = "auto",
                      dense_limit: int = DENSE_LIMIT, maxiter: int = 500, guard: int = 3,
                      keep_vectors: bool = False) -> EigReport:
    """The ``k`` smallest eigenvalues of a symmetric PSD operator.

    ``method`` is ``"dense"``, ``"separable"`` (hole-free grid operators),
    ``"lobpcg"`` (AMG-preconditioned, seeded start block) or ``"auto"``.
    Residuals are ``||A x - lam x|| / max(lam, 1)`` for unit ``x``.
    """
    A = _matrix_of(op)
    N = A.shape[0]
    if not 1 <= k <= N:
        raise DomainError(f"k must lie in [1, {N}]")
    if method == "auto":
        if isinstance(op, GridOperator) and op.mask.N == op.grid.size:
            method = "separable"
        elif N <= dense_limit:
            method = "dense"
        else:
            method = "lobpcg"
    if method == "separable":
        vals, vecs = SeparableOperator.from_operator(op).lowest(k)
        A_vecs = A @ vecs
    elif method == "dense":
        if N > dense_limit:
            raise SizeLimitError(f"{N} unknowns exceed the dense limit {dense_limit}")
        vals, vecs = sla.eigh(A.toarray(), subset_by_index=[0, k - 1])
        A_vecs = A @ vecs
    elif method == "lobpcg":
        m = min(k + guard, N // 5)
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((N, m))
        M = _amg(A)
        with warnings.catch_warnings():
            # residuals are certified below against ``tol`` itself
            warnings.simplefilter("ignore", UserWarning)
            vals, vecs, hist = spla.lobpcg(A, X, M=M, largest=False, tol=tol * 0.1,
                                           maxiter=maxiter, retResidualNormsHistory=True)
        order = np.argsort(vals)
        vals, vecs = vals[order][:k], vecs[:, order][:, :k]
        res = np.linalg.norm(A @ vecs - vecs * vals, axis=0) / np.maximum(np.abs(vals), 1.0)
        ok = res <= tol
        if not np.all(ok):
            raise ConvergenceError(
                f"LOBPCG: {int(ok.sum())} of {k} eigenpairs converged",
                best=vals[ok], residual=float(res.max()))
        return EigReport(k, vals, res, "lobpcg", len(hist),
                         vecs if keep_vectors else None)
    else:
        raise DomainError(f"unknown eigen method {method!r}")
    res = np.linalg.norm(A_vecs - vecs * vals, axis=0) / np.maximum(np.abs(vals), 1.0)
    return EigReport(k, np.asarray(vals), res, method, 0, vecs if keep_vectors else None)


def dense_function(A, fn) -> np.ndarray:
    """``fn(A)`` for a dense symmetric matrix via eigendecomposition."""
    lam, Q = sla.eigh(np.asarray(A, dtype=float))
    return (Q * fn(lam)) @ Q.T


def expm_action(A, v, ts: Sequence[float], tol: float = EXP_TOL, shift: float = 0.0,
                pole: Optional[float] = None, maxm: int = 80, solve=None,
                solver_tol: float = CG_TOL):
    """``exp(-t A) v`` for several ``t`` by shift-and-invert Lanczos.

    The Krylov space of ``B = (A - shift + pole)^{-1}`` is built once and
    reused for every ``t``.  ``shift`` must not exceed the smallest
    eigenvalue of ``A``; the result is computed as
    ``exp(-t shift) exp(-t (A - shift)) v``, which keeps full relative
    accuracy when ``exp(-t A) v`` is tiny.  Iteration stops once successive
    approximations agree to ``tol`` relative to their own norm for every
    ``t``.

    Returns
    -------
    list of ndarray, one per ``t``
    """
    v = np.asarray(v, dtype=float)
    ts = [float(t) for t in ts]
    if any(t < 0 for t in ts):
        raise DomainError("t must be nonnegative")
    beta = np.linalg.norm(v)
    out = [v.copy() if t == 0 else np.zeros_like(v) for t in ts]
    live = [i for i, t in enumerate(ts) if t > 0]
    if not live or beta == 0:
        return out
    tpos = np.array([ts[i] for i in live])
    if pole is None:
        # the clamp keeps the pole finite for vanishing t
        pole = 10.0 / max(tpos.min(), 1e-12)
    if solve is None:
        solve = ShiftedSolver(A, pole - shift, solver_tol)
    N = v.shape[0]
    mmax = min(maxm, N)
    V = np.zeros((N, mmax + 1))
    H = np.zeros((mmax + 1, mmax + 1))
    V[:, 0] = v / beta
    prev = None
    for j in range(mmax):
        w = solve(V[:, j])
        for _ in range(2):
            c = V[:, : j + 1].T @ w
            w -= V[:, : j + 1] @ c
            H[: j + 1, j] += c
        b = np.linalg.norm(w)
        H[j + 1, j] = b
        m = j + 1
        T = (H[:m, :m] + H[:m, :m].T) / 2
        theta, Q = sla.eigh(T)
        theta = np.maximum(theta, 1e-300)
        lam = 1.0 / theta - pole
        coef = Q[0, :]
        cur = []
        for t in tpos:
            y = Q @ (np.exp(-t * lam) * coef)
            cur.append(beta * math.exp(-t * shift) * (V[:, :m] @ y))
        done = b <= 1e-12 * np.abs(theta).max()
        if prev is not None and not done:
            err = max(np.linalg.norm(c - p) / max(np.linalg.norm(c), 1e-300)
                      for c, p in zip(cur, prev))
            done = err <= tol
        if done:
            for i, c in zip(live, cur):
                out[i] = c
            return out
        V[:, m] = w / b
        prev = cur
    raise ConvergenceError(f"exponential action did not reach tol {tol} in {mmax} steps",
                           best=prev, residual=float("nan"))


def semigroup_apply(op, t, v, tol: float = EXP_TOL, method: str = "auto",
                    dense_limit: int = DENSE_LIMIT, shift: Optional[float] = None, **kw):
    """``exp(-t A) v`` for a grid operator (nodal values in and out).

    ``t`` may be a scalar or a sequence; a list of GridFunctions is returned
    for a sequence.  ``method`` is ``"dense"``, ``"separable"``, ``"krylov"``
    or ``"auto"``.  For the Krylov path ``shift`` defaults to a certified
    lower bound of the spectrum: the ground energy of the hole-free grid
    (removing nodes never lowers an eigenvalue) plus ``q``.
    """
    scalar = np.isscalar(t)
    ts = [float(t)] if scalar else [float(s) for s in t]
    if any(s < 0 for s in ts):
        raise DomainError("t must be nonnegative")
    x = v.tilde()
    A = op.matrix
    if method == "auto":
        if op.mask.N == op.grid.size:
            method = "separable"
        elif op.N <= dense_limit:
            method = "dense"
        else:
            method = "krylov"
    if method == "separable":
        S = SeparableOperator.from_operator(op)
        ys = [x.copy() if s == 0 else S.apply(lambda lam, s=s: np.exp(-s * lam), x) for s in ts]
    elif method == "dense":
        if op.N > dense_limit:
            raise SizeLimitError(f"{op.N} unknowns exceed the dense limit {dense_limit}")
        lam, Q = sla.eigh(A.toarray())
        c = Q.T @ x
        ys = [x.copy() if s == 0 else Q @ (np.exp(-s * lam) * c) for s in ts]
    elif method == "krylov":
        if shift is None:
            shift = SeparableOperator(op.grid, op.q).min_eigenvalue()
        ys = expm_action(A, x, ts, tol=tol, shift=shift, **kw)
    else:
        raise DomainError(f"unknown exponential method {method!r}")
    outs = [GridFunction.from_tilde(op.mask, y) for y in ys]
    return outs[0] if scalar else outs


def dense_opnorm(M, w_in=None, w_out=None, dense_limit: int = DENSE_LIMIT) -> float:
    """Operator norm of ``M`` between weighted spaces.

    ``M`` maps nodal values with weights ``w_in`` to nodal values with
    weights ``w_out``; the norm is the largest singular value of
    ``diag(w_out)^{1/2} M diag(w_in)^{-1/2}``.
    """
    M = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DomainError("expected a matrix")
    if max(M.shape) > dense_limit:
        raise SizeLimitError(f"matrix of shape {M.shape} exceeds the dense limit {dense_limit}")
    if M.size == 0:
        return 0.0
    if w_in is not None:
        M = M / np.sqrt(np.asarray(w_in))[None, :]
    if w_out is not None:
        M = np.sqrt(np.asarray(w_out))[:, None] * M
    return float(sla.svdvals(M)[0])


def hausdorff_distance(X, Y) -> float:
    """Hausdorff distance between two finite sets of reals."""
    X = np.unique(np.asarray(X, dtype=float).ravel())
    Y = np.unique(np.asarray(Y, dtype=float).ravel())
    if X.size == 0 or Y.size == 0:
        raise DomainError("Hausdorff distance needs two nonempty sets")

    def one_sided(P, S):
        pos = np.clip(np.searchsorted(S, P), 1, len(S) - 1) if len(S) > 1 else np.zeros(len(P), int)
        if len(S) == 1:
            return float(np.abs(P - S[0]).max())
        d = np.minimum(np.abs(P - S[pos - 1]), np.abs(P - S[pos]))
        return float(d.max())

    return max(one_sided(X, Y), one_sided(Y, X))
