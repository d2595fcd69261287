import math

import numpy as np
import pytest
import scipy.linalg as sla

from crushed_ice.capacity import potential_ball_analytic
from crushed_ice.closeness import (BOUND_FACTORS, ClosenessConstants, FormPair,
                                   IdentificationSet, build_J1, condition_constants,
                                   pde_instance, random_instance, smooth_cutoff,
                                   verify_functional_calculus, verify_resolvent_bound,
                                   verify_spectral_hausdorff)
from crushed_ice.exceptions import (DomainError, NotPSDError, ResolutionError, SizeLimitError,
                                    SpectralGapError)
from crushed_ice.geometry import DomainSpec, HoleShape, place_holes
from crushed_ice.grid import CartesianGrid, NodeMask

TOL = 1e-12
ORACLE_TOL = 1e-9
SAMPLE_TOL = 1e-3
SLACK = 1e-9
SCALE_TOL = 1e-12


# ------------------------------------------------------------------ oracles

def natural_forms(pair):
    """Energy matrices and Gram matrices in nodal values."""
    sw, swe = np.sqrt(pair.w), np.sqrt(pair.w_eps)
    S = sw[:, None] * pair.A * sw[None, :]
    Se = swe[:, None] * pair.A_eps * swe[None, :]
    return S, Se, np.diag(pair.w), np.diag(pair.w_eps)


def gram_sets(pair, k):
    S, Se, W, We = natural_forms(pair)
    G1 = S + W
    G1e = Se + We
    Gk = G1 if k == 1 else G1 @ np.linalg.solve(W, G1)
    return S, Se, W, We, G1, G1e, Gk


def bilinear_sup(B, G_left, G_right):
    """sup |f^T B u| / (|f|_G_left |u|_G_right) by Cholesky whitening."""
    Ll = np.linalg.cholesky(G_left)
    Lr = np.linalg.cholesky(G_right)
    X = sla.solve_triangular(Ll, B, lower=True)
    X = sla.solve_triangular(Lr, X.T, lower=True).T
    return float(np.linalg.svd(X, compute_uv=False)[0]) if X.size else 0.0


def oracle_terms(pair, ids):
    """Every constant written as a bilinear supremum in nodal values."""
    S, Se, W, We, G1, G1e, Gk = gram_sets(pair, ids.k)
    J, Jp, J1, J1p = ids.J, ids.Jp, ids.J1, ids.J1p
    N, M = pair.N, pair.M
    return {
        "c1a": ((J - J1).T @ We, G1, We),
        "c1b": ((Jp - J1p).T @ W, G1e, W),
        "c2": (J.T @ We - W @ Jp, W, We),
        "c3a": (J.T @ We, W, We),
        "c3b": (Jp.T @ W, We, W),
        "c4a": ((np.eye(N) - Jp @ J).T @ W, G1, W),
        "c4b": ((np.eye(M) - J @ Jp).T @ We, G1e, We),
        "c5": (J1.T @ Se - S @ J1p, Gk, G1e),
    }


def oracle_constants(pair, ids):
    out = {}
    for name, (B, Gl, Gr) in oracle_terms(pair, ids).items():
        v = bilinear_sup(B, Gl, Gr)
        out[name] = max(0.0, v - 1.0) if name in ("c3a", "c3b") else v
    return out


def sampled_sup(B, Gl, Gr, rng, count):
    F = rng.standard_normal((count, B.shape[0]))
    U = rng.standard_normal((count, B.shape[1]))
    num = np.abs(np.einsum("ij,jk,ik->i", F, B, U))
    den = np.sqrt(np.einsum("ij,jk,ik->i", F, Gl, F) * np.einsum("ij,jk,ik->i", U, Gr, U))
    ratio = num / den
    best = int(np.argmax(ratio))
    return float(ratio[best]), F[best], U[best]


def ascend(B, Gl, Gr, f, u, steps=2000):
    """Alternating maximization of the bilinear ratio from a starting pair."""
    for _ in range(steps):
        f = np.linalg.solve(Gl, B @ u)
        f /= math.sqrt(f @ Gl @ f)
        u = np.linalg.solve(Gr, B.T @ f)
        u /= math.sqrt(u @ Gr @ u)
    return abs(f @ B @ u)


def natural_resolvent_lhs(pair, ids):
    S, Se, W, We = natural_forms(pair)
    R = np.linalg.solve(S + W, W)
    Re = np.linalg.solve(Se + We, We)
    J, Jp = ids.J, ids.Jp

    def norm(T, w_in, w_out):
        return math.sqrt(max(sla.eigh(T.T @ np.diag(w_out) @ T, np.diag(w_in), eigvals_only=True)))

    return {"resolvent": norm(Re @ J - J @ R, pair.w, pair.w_eps),
            "extension": norm(Jp @ Re - R @ Jp, pair.w_eps, pair.w),
            "sandwich": norm(Jp @ Re @ J - R, pair.w, pair.w),
            "reverse": norm(Re - J @ R @ Jp, pair.w_eps, pair.w_eps)}


# ------------------------------------------------------------------ abstract framework

def test_identity_instance_has_zero_constants():
    A = np.diag([0.0, 1.0, 4.0])
    w = np.array([1.0, 2.0, 0.5])
    pair = FormPair(A, A, w, w)
    I = np.eye(3)
    ids = IdentificationSet(I, I, I, I)
    c = condition_constants(pair, ids)
    assert c.delta <= TOL
    rep = verify_resolvent_bound(pair, ids, c)
    assert all(v <= TOL for v in rep.lhs.values())
    assert rep.ok


@pytest.mark.parametrize("seed", range(20))
def test_constants_match_whitened_oracle(seed):
    pair, ids = random_instance(np.random.default_rng(seed), 12)
    c = condition_constants(pair, ids).as_dict()
    for name, v in oracle_constants(pair, ids).items():
        assert c[name] == pytest.approx(v, rel=ORACLE_TOL, abs=ORACLE_TOL)


@pytest.mark.parametrize("seed", range(20))
def test_lhs_match_natural_oracle(seed):
    pair, ids = random_instance(np.random.default_rng(100 + seed), 12)
    rep = verify_resolvent_bound(pair, ids)
    for key, v in natural_resolvent_lhs(pair, ids).items():
        assert rep.lhs[key] == pytest.approx(v, rel=1e-8, abs=1e-12)


def test_constants_certified_by_sampling():
    rng = np.random.default_rng(7)
    while True:
        pair, ids = random_instance(rng, 12)
        if pair.N == 10 and pair.M == 7:
            break
    c = condition_constants(pair, ids).as_dict()
    for name, (B, Gl, Gr) in oracle_terms(pair, ids).items():
        target = c[name] + 1.0 if name in ("c3a", "c3b") else c[name]
        if name in ("c3a", "c3b") and c[name] == 0:
            continue
        best, f, u = sampled_sup(B, Gl, Gr, rng, 100_000)
        assert best <= target + SLACK
        assert ascend(B, Gl, Gr, f, u) >= target - SAMPLE_TOL


def test_bounds_on_random_batch():
    rng = np.random.default_rng(2024)
    worst = {k: 0.0 for k in BOUND_FACTORS}
    for _ in range(200):
        rep = verify_resolvent_bound(*random_instance(rng, 12))
        assert rep.ok, rep.to_dict()
        for k, v in rep.ratios.items():
            worst[k] = max(worst[k], v)
    for k, v in worst.items():
        assert v <= BOUND_FACTORS[k]


def test_scaling_covariance():
    pair, ids = random_instance(np.random.default_rng(3), 12)
    a = verify_resolvent_bound(pair, ids)
    b = verify_resolvent_bound(pair.rescaled(3.7), ids)
    for k, v in a.constants.as_dict().items():
        assert b.constants.as_dict()[k] == pytest.approx(v, rel=SCALE_TOL, abs=SCALE_TOL)
    for k, v in a.lhs.items():
        assert b.lhs[k] == pytest.approx(v, rel=SCALE_TOL, abs=SCALE_TOL)


def test_form_pair_validation():
    with pytest.raises(NotPSDError):
        FormPair(np.diag([1.0, -1.0]), np.eye(1), np.ones(2), np.ones(1))
    with pytest.raises(NotPSDError):
        FormPair(np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(1), np.ones(2), np.ones(1))
    with pytest.raises(DomainError):
        FormPair(np.eye(2), np.eye(1), np.ones(3), np.ones(1))
    with pytest.raises(DomainError):
        IdentificationSet(np.eye(2), np.eye(2), np.eye(2), np.eye(2), k=3)


def test_dense_limit_on_constants():
    pair, ids = random_instance(np.random.default_rng(0), 12)
    with pytest.raises(SizeLimitError):
        condition_constants(pair, ids, dense_limit=0)


def test_delta_is_max_of_constants():
    c = ClosenessConstants(0.1, 0.2, 0.0, 0.0, 0.05, 0.3, 0.0, 0.25)
    assert c.delta == 0.3
    assert all(c.delta >= v for k, v in c.as_dict().items() if k.startswith("c"))


def near_pair(s, seed=0, N=8):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, N))
    A = X @ X.T
    E = rng.standard_normal((N, N))
    Ae = A + s * (E @ E.T)
    J = np.eye(N) + s * rng.standard_normal((N, N))
    w = rng.uniform(0.5, 2, N)
    return FormPair(A, Ae, w, w), IdentificationSet(J, J.T, J, J.T)


def test_heat_calculus_ratio_bounded_along_family():
    ratios, lhs = [], []
    for s in (1e-1, 1e-2, 1e-3):
        rep = verify_functional_calculus(*near_pair(s), psi="heat", t=1.0)
        ratios.append(max(rep.ratios.values()))
        lhs.append(rep.sandwich)
    assert lhs[0] > lhs[1] > lhs[2]
    assert max(ratios) <= 10 * min(ratios)


def test_calculus_vanishes_for_identical_pairs():
    pair, ids = near_pair(0.0)
    for kw in ({"psi": "heat", "t": 0.5}, {"psi": "projection", "interval": (-1.0, 1e6)}):
        rep = verify_functional_calculus(pair, ids, **kw)
        assert rep.intertwining <= TOL and rep.sandwich <= TOL


def test_projection_ranks_agree_on_near_pair():
    pair, ids = near_pair(1e-4)
    lam = np.sort(np.linalg.eigvalsh(pair.A))
    interval = ((lam[2] + lam[3]) / 2, (lam[3] + lam[4]) / 2)
    rep = verify_functional_calculus(pair, ids, psi="projection", interval=interval)
    assert rep.rank == (1, 1)
    assert rep.sandwich < 1e-2


def test_projection_endpoint_on_spectrum():
    pair, ids = near_pair(1e-3)
    lam = np.linalg.eigvalsh(pair.A)
    with pytest.raises(SpectralGapError):
        verify_functional_calculus(pair, ids, psi="projection", interval=(lam[1], lam[1] + 1))


def test_hausdorff_two_point_example():
    e = 0.37
    pair = FormPair(np.diag([1.0, 2.0]), np.diag([1.0, 2.0 + e]), np.ones(2), np.ones(2))
    I = np.eye(2)
    rep = verify_spectral_hausdorff(pair, IdentificationSet(I, I, I, I))
    assert rep.distance == pytest.approx(abs(1 / 3 - 1 / (3 + e)), rel=TOL)
    same = FormPair(np.diag([1.0, 2.0]), np.diag([1.0, 2.0]), np.ones(2), np.ones(2))
    assert verify_spectral_hausdorff(same).distance == 0


# ------------------------------------------------------------------ grid instances

def small_pde(eps=0.25, h=1 / 16, d=0.0625, n=2, **kw):
    lay = place_holes(DomainSpec.unit(n, eps), HoleShape.ball(d), 0.1)
    return pde_instance(lay, CartesianGrid.uniform(((0.0, 1.0),) * n, h), **kw)


def test_pde_exact_zero_constants():
    inst = small_pde(min_resolution=1.0)
    c = condition_constants(inst.pair, inst.ids)
    for name in ("c2", "c3a", "c3b", "c4b"):
        assert getattr(c, name) <= TOL
    assert c.delta == max(c.c1a, c.c4a, c.c5, c.c1b)
    assert c.c1b == 0.0
    assert verify_resolvent_bound(inst.pair, inst.ids, c).ok


def test_j1_rows_of_hole_nodes_vanish():
    inst = small_pde(min_resolution=1.0)
    F = inst.j1.full_matrix()
    hole = ~inst.perforated.active
    assert hole.sum() == 4 * 5
    assert abs(F[np.flatnonzero(hole)]).sum() == 0.0


def test_j1_without_holes_is_identity():
    g = CartesianGrid.uniform(((0.0, 1.0),) * 2, 0.125)
    lay = place_holes(DomainSpec.unit(2, 0.5), HoleShape.ball(0.05), 0.1)
    full = NodeMask.full(g)
    j1 = build_J1(lay, full, NodeMask.from_layout(g, lay))
    assert lay.n_holes == 0
    assert (j1.matrix() != sp_identity(full.N)).nnz == 0


def sp_identity(n):
    import scipy.sparse as sp
    return sp.identity(n, format="csr")


def test_j1_profile_of_constant_3d():
    eps, d, h = 1 / 3, 0.1, 1 / 48
    lay = place_holes(DomainSpec.unit(3, eps), HoleShape.ball(d), 0.1)
    g = CartesianGrid.uniform(((0.0, 1.0),) * 3, h)
    full, perf = NodeMask.full(g), NodeMask.from_layout(g, lay)
    j1 = build_J1(lay, full, perf)
    out = j1.apply_full(np.ones(full.N))
    pts = full.points()
    r = np.linalg.norm(pts - lay.centers[0], axis=1)
    outside = r > d
    expected = np.zeros_like(r)
    H = potential_ball_analytic(3, d, r[outside])
    chi_hat = smooth_cutoff((2 / lay.kappa) * (r[outside] - d) / eps)
    expected[outside] = 1 - H * chi_hat
    np.testing.assert_allclose(out, expected, atol=1e-10, rtol=0)
    assert out[~perf.active].max() == 0.0


def test_j1_non_ball_shape_uses_numeric_potential():
    lay = place_holes(DomainSpec.unit(2, 0.25), HoleShape.axis_box(0.06), 0.1)
    g = CartesianGrid.uniform(((0.0, 1.0),) * 2, 1 / 128)
    full, perf = NodeMask.full(g), NodeMask.from_layout(g, lay)
    j1 = build_J1(lay, full, perf, n2_cutoff="fallback")
    F = j1.full_matrix()
    assert abs(F[np.flatnonzero(~perf.active)]).sum() == 0.0
    out = j1.apply_full(np.ones(full.N))
    assert out.min() >= -1e-9 and out.max() <= 1 + 1e-9


def test_planar_cutoff_modes():
    eps, d = 0.25, 0.01
    lay = place_holes(DomainSpec.unit(2, eps), HoleShape.ball(d), 0.1)
    fine = CartesianGrid.uniform(((0.0, 1.0),) * 2, 1 / 400)
    full, perf = NodeMask.full(fine), NodeMask.from_layout(fine, lay)
    j1 = build_J1(lay, full, perf, min_resolution=1.0)
    assert j1.cutoff_mode == "log" and j1.flags == ()
    # no node distance on the 1/40 lattice falls in the band (0.06, 0.0625)
    coarse = CartesianGrid.uniform(((0.0, 1.0),) * 2, 1 / 40)
    cf = NodeMask.full(coarse)
    lay2 = place_holes(DomainSpec.unit(2, eps), HoleShape.ball(0.06), 0.1)
    cp2 = NodeMask.from_layout(coarse, lay2)
    fb = build_J1(lay2, cf, cp2, min_resolution=1.0)
    assert fb.cutoff_mode == "smooth" and "cutoff fallback" in fb.flags
    with pytest.raises(ResolutionError):
        build_J1(lay2, cf, cp2, n2_cutoff="log", min_resolution=1.0)
    for j in (j1, fb):
        F = j.full_matrix()
        hole = ~j.perforated.active
        assert abs(F[np.flatnonzero(hole)]).sum() == 0.0


def test_j1_resolution_guard():
    lay = place_holes(DomainSpec.unit(2, 0.25), HoleShape.ball(0.02), 0.1)
    g = CartesianGrid.uniform(((0.0, 1.0),) * 2, 1 / 64)
    with pytest.raises(ResolutionError):
        build_J1(lay, NodeMask.full(g), NodeMask.from_layout(g, lay))


def test_pde_size_limit():
    with pytest.raises(SizeLimitError):
        small_pde(h=1 / 64, d=0.05, min_resolution=1.0)


def test_spectral_distance_decreases_with_eps():
    dists = []
    for m in (3, 4, 5, 6):
        eps = 1 / m
        h = eps / 2
        inst = small_pde(eps=eps, h=h, d=0.45 * h, n=3, min_resolution=0.4)
        assert inst.perforated.N == inst.full.N - (m - 2) ** 3
        dists.append(verify_spectral_hausdorff(inst.pair).distance)
    assert all(b < a for a, b in zip(dists, dists[1:]))
