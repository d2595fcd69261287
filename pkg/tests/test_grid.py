import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from crushed_ice.exceptions import DomainError, GridMismatchError, ResolutionError
from crushed_ice.geometry import DomainSpec, HoleShape, place_holes
from crushed_ice.grid import (DIRICHLET, MIRROR, CartesianGrid, GridFunction, NodeMask,
                              assemble_laplacian, cell_mean, energy_matrix, export_coo,
                              export_function, extend_zero, read_function, restrict,
                              restriction_matrix)
from crushed_ice.linalg import SeparableOperator

TOL = 1e-12
CELL_TOL = 0.02


def fd_eigenvalue(ks, h):
    return sum(2 * (1 - math.cos(math.pi * k * h)) / h ** 2 for k in ks)


def unit(n, h):
    return CartesianGrid.uniform(((0.0, 1.0),) * n, h)


def test_uniform_grid_shape_and_weights():
    g = unit(2, 0.25)
    assert g.shape == (3, 3)
    np.testing.assert_allclose(g.weights(), 0.25 ** 2, rtol=TOL)
    with pytest.raises(DomainError):
        CartesianGrid.uniform(((0.0, 1.0),), 0.3)


def test_uniform_stencil_entries():
    h = 1 / 8
    op = assemble_laplacian(NodeMask.full(unit(3, h)))
    A = op.matrix.toarray()
    np.testing.assert_allclose(A, A.T, atol=0)
    off = A[~np.eye(len(A), dtype=bool)]
    assert set(np.round(off[off != 0] * h ** 2, 12)) == {-1.0}
    np.testing.assert_allclose(np.diag(A), 6 / h ** 2, rtol=TOL)


def test_lowest_eigenvalue_quarter_grid():
    op = assemble_laplacian(NodeMask.full(unit(2, 0.25)))
    lam = np.linalg.eigvalsh(op.dense())
    assert op.N == 9
    expected = 2 * 16 * (2 - 2 * math.cos(math.pi / 4))
    assert lam[0] == pytest.approx(expected, rel=TOL)
    assert lam[0] == pytest.approx(18.745166004060955, rel=1e-12)


def test_fd_eigenvalues_approach_box_spectrum():
    vals = []
    for m in (8, 16, 32):
        lam = SeparableOperator(unit(2, 1 / m)).min_eigenvalue()
        assert lam == pytest.approx(fd_eigenvalue((1, 1), 1 / m), rel=TOL)
        vals.append(abs(lam - 2 * math.pi ** 2))
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] / vals[1] == pytest.approx(0.25, rel=0.02)


def test_potential_shifts_every_eigenvalue():
    mask = NodeMask.full(unit(2, 0.125))
    a = np.linalg.eigvalsh(assemble_laplacian(mask).dense())
    b = np.linalg.eigvalsh(assemble_laplacian(mask, 5.0).dense())
    np.testing.assert_allclose(b - a, 5.0, atol=1e-9)


def test_single_masked_node_drops_dimension():
    g = unit(2, 0.125)
    lay = place_holes(DomainSpec.unit(2, 1 / 3), HoleShape.ball(0.01), 0.1)
    lay = type(lay)(lay.spec, lay.shape, lay.kappa, lay.indices, np.array([[0.5, 0.5]]))
    mask = NodeMask.from_layout(g, lay)
    assert assemble_laplacian(mask).N == g.size - 1


def test_unresolved_hole_is_rejected():
    g = unit(2, 0.125)
    lay = place_holes(DomainSpec.unit(2, 0.2), HoleShape.ball(0.01), 0.1)
    mask = NodeMask.from_layout(g, lay)
    assert mask.hole_counts.tolist().count(1) == 1
    with pytest.raises(ResolutionError):
        assemble_laplacian(mask)


def test_mask_is_closed_hole_membership():
    g = unit(3, 1 / 16)
    lay = place_holes(DomainSpec.unit(3, 0.25), HoleShape.ball(0.0625), 0.1)
    mask = NodeMask.from_layout(g, lay)
    pts = g.points()
    brute = np.zeros(len(pts), dtype=bool)
    for c in lay.centers:
        brute |= np.linalg.norm(pts - c, axis=1) <= 0.0625
    np.testing.assert_array_equal(~mask.active, brute)
    assert np.all(mask.hole_counts == 7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_perforated_spectrum_dominates_full(seed):
    rng = np.random.default_rng(seed)
    g = unit(2, 1 / 12)
    full = NodeMask.full(g)
    drop = rng.random(g.size) < 0.2
    perf = NodeMask(g, ~drop)
    a = np.linalg.eigvalsh(assemble_laplacian(full).dense())
    b = np.linalg.eigvalsh(assemble_laplacian(perf).dense())
    assert np.all(b >= a[: len(b)] - 1e-9)


def test_positive_definite_with_holes():
    g = unit(2, 1 / 8)
    perf = NodeMask(g, np.arange(g.size) != 24)
    lam = np.linalg.eigvalsh(assemble_laplacian(perf).dense())
    assert lam[0] > 0


def test_restriction_of_constant():
    g = unit(2, 1 / 8)
    full = NodeMask.full(g)
    perf = NodeMask(g, np.arange(g.size) != 24)
    f = GridFunction(full, np.ones(full.N))
    r = restrict(f, perf)
    np.testing.assert_array_equal(r.values, 1.0)
    assert r.norm() ** 2 == pytest.approx(f.norm() ** 2 - (1 / 8) ** 2, rel=TOL)


def test_restriction_without_holes_is_identity():
    g = unit(2, 1 / 8)
    full = NodeMask.full(g)
    f = GridFunction(full, np.random.default_rng(0).standard_normal(full.N))
    np.testing.assert_array_equal(restrict(f, full).values, f.values)
    np.testing.assert_array_equal(extend_zero(f, full).values, f.values)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_restriction_contracts_and_extension_is_isometric(seed):
    rng = np.random.default_rng(seed)
    g = CartesianGrid.uniform(((0.0, 1.0), (0.0, 1.0)), 1 / 11)
    full = NodeMask.full(g)
    perf = NodeMask(g, rng.random(g.size) > 0.3)
    f = GridFunction(full, rng.standard_normal(full.N))
    if rng.random() < 0.3:
        f = GridFunction(full, np.where(perf.active, f.values, 0.0))
    r = restrict(f, perf)
    assert r.norm() <= f.norm() * (1 + TOL)
    vanishes = np.all(f.values[~perf.active] == 0)
    assert (abs(r.norm() - f.norm()) <= TOL * f.norm()) == vanishes
    u = GridFunction(perf, rng.standard_normal(perf.N))
    e = extend_zero(u, full)
    assert e.norm() == pytest.approx(u.norm(), rel=TOL)
    np.testing.assert_array_equal(e.values[~perf.active], 0.0)
    np.testing.assert_array_equal(restrict(e, perf).values, u.values)
    # weighted adjointness of restriction and extension
    assert r.inner(u) == pytest.approx(f.inner(e), rel=1e-12, abs=1e-14)


def test_grid_mismatch_is_rejected():
    a, b = NodeMask.full(unit(2, 1 / 8)), NodeMask.full(unit(2, 1 / 4))
    with pytest.raises(GridMismatchError):
        restriction_matrix(a, b)
    with pytest.raises(GridMismatchError):
        GridFunction(a, np.ones(3))


def test_cell_mean_constant_and_linear():
    g = unit(2, 1 / 32)
    mask = NodeMask.full(g)
    cell = (np.array([0.25, 0.25]), np.array([0.5, 0.5]))
    assert cell_mean(GridFunction(mask, np.full(mask.N, 3.5)), cell) == pytest.approx(3.5, rel=TOL)
    lin = GridFunction.from_callable(mask, lambda x, y: 2 * x - y)
    assert cell_mean(lin, cell) == pytest.approx(2 * 0.375 - 0.375, rel=1e-12)


def test_cell_mean_quadratic_second_order():
    errs = []
    eps = 0.25
    for m in (16, 32, 64):
        mask = NodeMask.full(unit(2, 1 / m))
        f = GridFunction.from_callable(mask, lambda x, y: (x - 0.25) ** 2)
        v = cell_mean(f, (np.array([0.25, 0.25]), np.array([0.5, 0.5])))
        errs.append(abs(v - eps ** 2 / 3))
    assert errs[0] > errs[1] > errs[2]
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.05)


def test_cell_mean_outside_grid():
    mask = NodeMask.full(unit(2, 1 / 8))
    with pytest.raises(DomainError):
        cell_mean(GridFunction(mask, np.ones(mask.N)), (np.array([2.0, 2.0]), np.array([3.0, 3.0])))


def cell_grid(n, eps, m, kind):
    if kind == DIRICHLET:
        coords = [eps / m * np.arange(1, m)] * n
    else:
        coords = [eps / m * (np.arange(m) + 0.5)] * n
    return CartesianGrid(tuple(coords), (((kind, 0.0), (kind, eps)),) * n)


@pytest.mark.parametrize("n", [2, 3])
def test_cell_friedrichs_constant(n):
    eps = 0.2
    lam = SeparableOperator(cell_grid(n, eps, 64, DIRICHLET)).min_eigenvalue()
    assert abs(lam / (n * (math.pi / eps) ** 2) - 1) <= CELL_TOL


@pytest.mark.parametrize("n", [2, 3])
def test_cell_poincare_constant(n):
    eps = 0.2
    vals, _ = SeparableOperator(cell_grid(n, eps, 64, MIRROR)).lowest(2, vectors=False)
    assert abs(vals[0]) <= 1e-9
    assert abs(vals[1] / (math.pi / eps) ** 2 - 1) <= CELL_TOL


def test_separable_matches_assembled_on_graded_grid():
    g = CartesianGrid.graded(((0.0, 1.0),) * 2, [[0.5], [0.5]], 0.02, 0.1, 0.05, 1.5)
    A = assemble_laplacian(NodeMask.full(g), 2.0).dense()
    np.testing.assert_allclose(A, A.T, atol=0)
    lam = np.linalg.eigvalsh(A)
    sep = np.sort(SeparableOperator(g, 2.0).spectrum_grid().ravel())
    np.testing.assert_allclose(lam, sep, rtol=1e-10)


def test_weighted_operator_matches_energy_matrix():
    g = CartesianGrid.graded(((0.0, 1.0),) * 2, [[0.3], [0.6]], 0.03, 0.12, 0.05, 1.4)
    K = energy_matrix(g).toarray()
    w = g.weights()
    A = assemble_laplacian(NodeMask.full(g)).dense()
    np.testing.assert_allclose(A, K / np.sqrt(np.outer(w, w)), rtol=1e-12, atol=1e-9)
    x = np.random.default_rng(1).standard_normal(g.size)
    # energy of a function equals the sum of squared differences over edges
    e = 0.0
    X = x.reshape(g.shape)
    for ax, c in enumerate(g.coords):
        other = [g.duals[a] for a in range(2) if a != ax][0]
        dif = np.diff(X, axis=ax) / np.diff(c).reshape([-1 if a == ax else 1 for a in range(2)])
        area = other.reshape([1 if a == ax else -1 for a in range(2)])
        gaps = np.diff(c).reshape([-1 if a == ax else 1 for a in range(2)])
        e += np.sum(dif ** 2 * gaps * area)
        lo = c[0] - 0.0
        hi = 1.0 - c[-1]
        first = np.take(X, 0, axis=ax) / lo
        last = np.take(X, -1, axis=ax) / hi
        e += np.sum(first ** 2 * lo * other) + np.sum(last ** 2 * hi * other)
    assert x @ K @ x == pytest.approx(e, rel=1e-10)


def test_export_round_trip(tmp_path):
    g = unit(2, 1 / 4)
    mask = NodeMask(g, np.arange(g.size) != 4)
    op = assemble_laplacian(mask)
    export_coo(op, tmp_path / "a.txt")
    lines = (tmp_path / "a.txt").read_text().splitlines()
    assert lines[0] == f"% 8 8 {op.matrix.nnz}"
    rows = np.array([[float(v) for v in l.split()] for l in lines[1:]])
    B = np.zeros((8, 8))
    B[rows[:, 0].astype(int), rows[:, 1].astype(int)] = rows[:, 2]
    np.testing.assert_array_equal(B, op.dense())
    f = GridFunction(mask, np.arange(8) / 3.0)
    export_function(f, tmp_path / "f.csv")
    header, nodes, values = read_function(tmp_path / "f.csv")
    assert header["active_count"] == 8 and header["masked_nodes"] == [4]
    np.testing.assert_array_equal(values, f.values)
    np.testing.assert_array_equal(nodes, np.flatnonzero(mask.active))
