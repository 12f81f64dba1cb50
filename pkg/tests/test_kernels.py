"""Geometry/valency kernels: brute-force oracles, backend agreement, and
the strict sequential-summation contract for valency accumulation."""

import math

import numpy as np
import pytest

from moldiff import kernels


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    old = kernels.backend_name()
    try:
        kernels.set_backend(request.param)
    except RuntimeError:
        pytest.skip(f"{request.param} backend unavailable")
    yield request.param
    kernels.set_backend(old)


def brute_distances(pos):
    n = len(pos)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d[i, j] = math.sqrt(sum((pos[i, k] - pos[j, k]) ** 2 for k in range(3)))
    return d


def brute_angles(pos):
    n = len(pos)
    a = np.zeros((n, n, n))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                u, v = pos[j] - pos[i], pos[k] - pos[i]
                nu, nv = np.linalg.norm(u), np.linalg.norm(v)
                if nu <= kernels.COINCIDENT_TOL or nv <= kernels.COINCIDENT_TOL:
                    continue
                c = np.dot(u, v) / (nu * nv)
                c = min(max(c, -1.0 + kernels.COS_CLIP), 1.0 - kernels.COS_CLIP)
                a[i, j, k] = math.acos(c)
    return a


# -- pairwise distances ------------------------------------------------------


def test_pairwise_dist_against_brute_force(backend):
    rng = np.random.default_rng(0)
    pos = rng.standard_normal((7, 3)) * 2
    d = kernels.pairwise_dist_fwd(pos)
    assert np.allclose(d, brute_distances(pos), atol=1e-12)
    assert np.allclose(d, d.T) and np.all(np.diag(d) == 0)


def test_pairwise_dist_gradient_fd(backend):
    rng = np.random.default_rng(1)
    pos = rng.standard_normal((5, 3))
    g_out = rng.standard_normal((5, 5))
    np.fill_diagonal(g_out, 0.0)
    grad = kernels.pairwise_dist_bwd(pos, kernels.pairwise_dist_fwd(pos), g_out)
    h = 1e-6
    num = np.zeros_like(pos)
    for i in range(pos.shape[0]):
        for c in range(3):
            pp, pm = pos.copy(), pos.copy()
            pp[i, c] += h
            pm[i, c] -= h
            num[i, c] = (
                (kernels.pairwise_dist_fwd(pp) * g_out).sum()
                - (kernels.pairwise_dist_fwd(pm) * g_out).sum()
            ) / (2 * h)
    assert np.abs(grad - num).max() < 1e-7


# -- triplet angles ------------------------------------------------------------


def test_angles_against_brute_force(backend):
    rng = np.random.default_rng(2)
    pos = rng.standard_normal((6, 3)) * 1.5
    ang = kernels.angles_fwd(pos)
    assert np.allclose(ang, brute_angles(pos), atol=1e-10)


def test_angles_known_values(backend):
    # right angle at the origin vertex; equilateral triangle gives pi/3
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    ang = kernels.angles_fwd(pos)
    assert abs(ang[0, 1, 2] - math.pi / 2) < 1e-9
    tri = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.5, math.sqrt(3) / 2, 0]])
    assert abs(kernels.angles_fwd(tri)[0, 1, 2] - math.pi / 3) < 1e-9


def test_angles_coincident_legs_are_zero_with_zero_grad(backend):
    pos = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
    ang = kernels.angles_fwd(pos)
    # legs of zero length (atoms 0 and 1 coincide) give exactly zero
    assert ang[0, 1, 2] == 0.0 and ang[1, 0, 2] == 0.0
    # identical ray directions with nonzero legs give ~0 (cosine clamp)
    assert 0.0 <= ang[2, 0, 1] < 1e-3
    g = np.ones((3, 3, 3))
    grad = kernels.angles_bwd(pos, g)
    assert np.all(np.isfinite(grad))


def test_angles_collinear_is_finite(backend):
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    ang = kernels.angles_fwd(pos)
    # angle at the middle atom is pi (up to the cosine clamp)
    assert abs(ang[1, 0, 2] - math.pi) < 1e-3
    grad = kernels.angles_bwd(pos, np.ones((3, 3, 3)))
    assert np.all(np.isfinite(grad))


def test_angles_gradient_fd(backend):
    rng = np.random.default_rng(3)
    pos = rng.standard_normal((5, 3)) * 2
    g_out = rng.standard_normal((5, 5, 5))
    grad = kernels.angles_bwd(pos, g_out)
    h = 1e-6
    num = np.zeros_like(pos)
    for i in range(5):
        for c in range(3):
            pp, pm = pos.copy(), pos.copy()
            pp[i, c] += h
            pm[i, c] -= h
            num[i, c] = (
                (kernels.angles_fwd(pp) * g_out).sum()
                - (kernels.angles_fwd(pm) * g_out).sum()
            ) / (2 * h)
    assert np.abs(grad - num).max() < 1e-5


# -- radial basis -----------------------------------------------------------------


def test_rbf_against_direct_formula(backend):
    rng = np.random.default_rng(4)
    x = rng.random(20) * 10
    centers = np.linspace(0, 10, 8)
    widths = np.full(8, centers[1] - centers[0])
    out = kernels.rbf_fwd(x, centers, widths)
    expect = np.exp(-((x[:, None] - centers[None]) ** 2) / (2 * widths[None] ** 2))
    assert np.allclose(out, expect, atol=1e-12)


def test_rbf_gradient_fd(backend):
    rng = np.random.default_rng(5)
    x = rng.random(10) * 6
    centers = np.linspace(0, 6, 5)
    widths = np.full(5, 1.1)
    g_out = rng.standard_normal((10, 5))
    grad = kernels.rbf_bwd(x, centers, widths, g_out)
    h = 1e-6
    num = np.array(
        [
            (
                (kernels.rbf_fwd(x + h * e, centers, widths) * g_out).sum()
                - (kernels.rbf_fwd(x - h * e, centers, widths) * g_out).sum()
            )
            / (2 * h)
            for e in np.eye(10)
        ]
    )
    assert np.abs(grad - num).max() < 1e-6


# -- bond decisions -----------------------------------------------------------------


def test_decide_bonds_highest_takes_highest_negative_margin(backend):
    margins = np.full((2, 2, 1, 1, 3), np.inf)
    margins[0, 1, 0, 0] = [-0.6, -0.2, 0.1]
    isbond, order = kernels.decide_bonds_kernel(margins, kernels.RULE_HIGHEST)
    assert isbond[0, 1, 0, 0] and order[0, 1, 0, 0] == 2


def test_decide_bonds_argmin_is_literal_signed_argmin(backend):
    # same margins: the most negative entry is order 1
    margins = np.full((2, 2, 1, 1, 3), np.inf)
    margins[0, 1, 0, 0] = [-0.6, -0.2, 0.1]
    isbond, order = kernels.decide_bonds_kernel(margins, kernels.RULE_ARGMIN)
    assert isbond[0, 1, 0, 0] and order[0, 1, 0, 0] == 1


def test_decide_bonds_no_negative_margin_means_no_bond(backend):
    margins = np.full((2, 2, 1, 1, 3), np.inf)
    margins[0, 1, 0, 0] = [0.4, 0.6, 0.9]
    for rule in (kernels.RULE_HIGHEST, kernels.RULE_ARGMIN):
        isbond, order = kernels.decide_bonds_kernel(margins, rule)
        assert not isbond[0, 1, 0, 0] and order[0, 1, 0, 0] == 0


def test_decide_bonds_absent_entries_never_bond(backend):
    margins = np.full((2, 2, 1, 1, 3), np.inf)
    isbond, order = kernels.decide_bonds_kernel(margins, kernels.RULE_HIGHEST)
    assert not isbond.any() and not order.any()


def test_decide_bonds_rules_agree_for_single_candidate(backend):
    # when exactly one order is below threshold the rules coincide
    rng = np.random.default_rng(6)
    margins = np.full((3, 3, 2, 2, 3), np.inf)
    for _ in range(20):
        i, j = rng.integers(3, size=2)
        a, b = rng.integers(2, size=2)
        o = rng.integers(3)
        margins[i, j, a, b] = [0.5, 0.5, 0.5]
        margins[i, j, a, b, o] = -0.3
    hi = kernels.decide_bonds_kernel(margins, kernels.RULE_HIGHEST)
    am = kernels.decide_bonds_kernel(margins, kernels.RULE_ARGMIN)
    assert np.array_equal(hi[0], am[0]) and np.array_equal(hi[1], am[1])


# -- valency accumulation ---------------------------------------------------------


def quadruple_loop_valencies(p_pair, w):
    n, _, nf, _ = p_pair.shape
    v = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            if i == j:
                continue
            for a in range(nf):
                for b in range(nf):
                    acc += p_pair[i, j, a, b] * w[i, j, a, b]
        v[i] = acc
    return v


def test_valency_sum_equals_scalar_loop_exactly(backend):
    rng = np.random.default_rng(7)
    for _ in range(10):
        n, nf = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        p = rng.random((n, nf))
        p /= p.sum(axis=1, keepdims=True)
        p_pair = np.einsum("ia,jb->ijab", p, p)
        w = rng.integers(0, 4, size=(n, n, nf, nf)).astype(np.float64)
        got = kernels.valency_sum(p_pair, w)
        want = quadruple_loop_valencies(p_pair, w)
        assert np.array_equal(got, want), "must match the scalar loop bitwise"


def test_valency_sum_zero_weights(backend):
    p_pair = np.random.default_rng(8).random((3, 3, 2, 2))
    assert np.array_equal(kernels.valency_sum(p_pair, np.zeros((3, 3, 2, 2))), np.zeros(3))


# -- triplet mask ------------------------------------------------------------------


def test_triplet_mask_excludes_degenerate_indices(backend):
    rng = np.random.default_rng(9)
    pos = rng.standard_normal((5, 3))
    mask = kernels.triplet_mask(kernels.pairwise_dist_fwd(pos))
    for i in range(5):
        for j in range(5):
            for k in range(5):
                expect = len({i, j, k}) == 3
                assert mask[i, j, k] == expect


def test_triplet_mask_excludes_coincident_atoms(backend):
    pos = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    mask = kernels.triplet_mask(kernels.pairwise_dist_fwd(pos))
    # legs i-j or i-k with zero length are masked out; a j-k coincidence
    # with sound legs stays in (the angle is well defined, ~0)
    assert not mask[0, 1, 2] and not mask[1, 0, 2]
    assert mask[2, 0, 1] and mask[3, 1, 0] and mask[0, 2, 3]


# -- backend agreement ----------------------------------------------------------------


def test_backends_agree_on_all_kernels():
    try:
        kernels.set_backend("numba")
    except RuntimeError:
        pytest.skip("numba backend unavailable")
    rng = np.random.default_rng(10)
    pos = rng.standard_normal((9, 3)) * 2
    g2, g3 = rng.standard_normal((9, 9)), rng.standard_normal((9, 9, 9))
    centers = np.linspace(0, 8, 6)
    widths = np.full(6, 1.3)
    p = rng.random((9, 4))
    p /= p.sum(axis=1, keepdims=True)
    p_pair = np.einsum("ia,jb->ijab", p, p)
    w = rng.integers(0, 4, (9, 9, 4, 4)).astype(np.float64)
    margins = rng.standard_normal((9, 9, 4, 4, 3))
    g_rbf = rng.standard_normal((81, 6))

    results = {}
    for name in ("numpy", "numba"):
        kernels.set_backend(name)
        dist = kernels.pairwise_dist_fwd(pos)
        results[name] = {
            "dist": dist,
            "dist_bwd": kernels.pairwise_dist_bwd(pos, dist, g2),
            "ang": kernels.angles_fwd(pos),
            "ang_bwd": kernels.angles_bwd(pos, g3),
            "rbf": kernels.rbf_fwd(dist.ravel(), centers, widths),
            "rbf_bwd": kernels.rbf_bwd(dist.ravel(), centers, widths, g_rbf),
            "mask": kernels.triplet_mask(dist),
            "val": kernels.valency_sum(p_pair, w),
            "bonds": kernels.decide_bonds_kernel(margins, kernels.RULE_HIGHEST),
        }
    a, b = results["numpy"], results["numba"]
    for key in a:
        if key == "bonds":
            assert np.array_equal(a[key][0], b[key][0])
            assert np.array_equal(a[key][1], b[key][1])
        elif key in ("mask",):
            assert np.array_equal(a[key], b[key])
        elif key == "val":
            assert np.array_equal(a[key], b[key]), "valency sums must agree bitwise"
        else:
            assert np.allclose(a[key], b[key], rtol=1e-9, atol=1e-9), key


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("gpu")
