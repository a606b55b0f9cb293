import numpy as np
import pytest

from conftest import random_model, scalar_net
from oracles import brute_force_points, dense_sign_patterns, linear_lgssm_model
from lorasmc.errors import ShapeError
from lorasmc.fixed_points import (Degenerate, approximate_search, brute_force_fixed_points, candidate_regions,
                                  classify, consistency_check, expand_basis, find_all_fixed_points,
                                  match_point_sets, region_bound, solve_region, vector_field,
                                  vector_field_expanded)
from lorasmc.model import PiecewiseLinearSpec


def _sorted(z):
    z = np.asarray(z).reshape(len(z), -1)
    return z[np.lexsort(z.T[::-1])] if len(z) else z


# -- expansion ----------------------------------------------------------

def test_expand_identity_for_relu(rng):
    M, Nc = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    spec = PiecewiseLinearSpec.relu(rng.normal(size=5))
    ex = expand_basis(M, Nc, spec)
    np.testing.assert_array_equal(ex.M, M)
    np.testing.assert_array_equal(ex.N, Nc)
    np.testing.assert_array_equal(ex.h, spec.thresholds[:, 0])


def test_expand_clipped(rng):
    h = rng.uniform(0.5, 2, 4)
    M, Nc = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    ex = expand_basis(M, Nc, PiecewiseLinearSpec.clipped(h))
    assert ex.M.shape == (8, 2)
    np.testing.assert_array_equal(ex.h.reshape(4, 2), np.stack([-h, np.zeros(4)], 1))
    np.testing.assert_array_equal(ex.N[0::2], Nc)
    np.testing.assert_array_equal(ex.N[1::2], -Nc)


@pytest.mark.parametrize("D", [1, 2, 3])
def test_expanded_vector_field_agrees(rng, D):
    m = random_model(rng, N=7, R=3, D=D)
    ex = expand_basis(m.M, m.N_cont, m.activation)
    z = rng.normal(size=(1000, 3)) * 3
    diff = vector_field(m.M, m.N_cont, m.activation, z) - vector_field_expanded(ex, z)
    assert np.max(np.abs(diff)) < 1e-12


def test_expand_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        expand_basis(rng.normal(size=(4, 2)), rng.normal(size=(3, 2)), PiecewiseLinearSpec.relu(np.zeros(4)))


# -- single regions -----------------------------------------------------

def test_solve_region_examples():
    M, Nc, h = np.array([[1.0]]), np.array([[2.0]]), np.array([1.0])
    assert solve_region(Nc, M, h, [0]) == pytest.approx([0.0])
    assert solve_region(Nc, M, h, [1]) == pytest.approx([2.0])
    deg = solve_region(np.array([[1.0]]), M, np.array([0.0]), [1])
    assert isinstance(deg, Degenerate) and not deg


def test_consistency_examples():
    M, h = np.array([[1.0]]), np.array([1.0])
    assert consistency_check(M, h, [1], [2.0])
    assert consistency_check(M, h, [0], [0.0])
    assert not consistency_check(M, h, [1], [0.5])
    # inside the tie band either label is accepted
    assert consistency_check(M, h, [1], [1.0]) and consistency_check(M, h, [0], [1.0])


def test_classify():
    assert classify(np.array([-1, -2])) == "stable"
    assert classify(np.array([1, 2])) == "unstable"
    assert classify(np.array([-1, 2])) == "saddle"
    assert classify(np.array([0, -1])) == "marginal"


# -- region counting ----------------------------------------------------

def test_region_bound_examples():
    assert region_bound(2, 1, 1) == 3
    assert region_bound(60, 2, 1) == 1831
    assert region_bound(2, 2, 2) == 9
    assert region_bound(400, 10, 3) > 2 ** 63       # exact big integers


def test_candidate_regions_anchors():
    assert len(candidate_regions(np.array([[1.0], [1.0]]), np.array([0.0, 1.0]))) == 3
    ang = np.array([0.1, 1.2, 2.3])
    M = np.stack([np.cos(ang), np.sin(ang)], 1)
    general = candidate_regions(M, np.array([0.3, -0.2, 0.5]))
    concurrent = candidate_regions(M, np.zeros(3))
    assert len(general) == 7
    assert len(concurrent) == 6


def test_candidate_regions_include_all_inactive(rng):
    M = rng.normal(size=(6, 2))
    pats = candidate_regions(M, rng.normal(size=6))
    assert any(not p.any() for p in pats) or np.any(np.all(pats == 0, axis=1))


@pytest.mark.parametrize("seed", range(4))
def test_candidate_regions_match_dense_sampling(seed):
    r = np.random.default_rng(seed)
    N = 6
    M, h = r.normal(size=(N, 2)), r.normal(size=N)
    pats = {tuple(p) for p in candidate_regions(M, h)}
    assert len(pats) == region_bound(N, 2)
    assert pats == dense_sign_patterns(M, h)


# -- exact enumeration --------------------------------------------------

def test_scalar_net_exact():
    for rep in (find_all_fixed_points(scalar_net()), brute_force_fixed_points(scalar_net())):
        np.testing.assert_allclose(_sorted(rep.zs()).ravel(), [0.0, 2.0], atol=1e-12)
        assert rep.counts() == {"stable": 1, "unstable": 1}


@pytest.mark.parametrize("seed", range(15))
@pytest.mark.parametrize("R,D,N", [(1, 1, 10), (2, 1, 10), (3, 1, 9), (2, 2, 6)])
def test_exact_matches_brute_force(seed, R, D, N):
    m = random_model(np.random.default_rng(seed), N=N, R=R, D=D)
    exact = find_all_fixed_points(m)
    brute = brute_force_fixed_points(m)
    assert match_point_sets(exact.zs(), brute.zs(), atol=1e-8)
    assert exact.regions_examined <= exact.bound
    # independent oracle written straight from the definition
    ref = brute_force_points(m.M, m.N_cont, m.activation.slopes, m.activation.thresholds)
    assert match_point_sets(exact.zs(), ref, atol=1e-8)


def test_reported_points_are_fixed(rng):
    m = random_model(rng, N=12, R=2)
    rep = find_all_fixed_points(m)
    for p in rep.points:
        assert np.max(np.abs(vector_field(m.M, m.N_cont, m.activation, p.z))) < 1e-8
    zs = rep.zs()
    for i in range(len(zs)):
        for j in range(i + 1, len(zs)):
            assert np.linalg.norm(zs[i] - zs[j]) > 1e-6


def test_linear_limit_single_point(rng):
    m, A, c = linear_lgssm_model(rng)
    rep = find_all_fixed_points(m)
    assert len(rep.points) == 1
    np.testing.assert_allclose(rep.points[0].z, 0.0, atol=1e-8)


def test_huge_thresholds_single_point_at_origin(rng):
    m = random_model(rng, N=6, R=2)
    m = m.replace(activation=PiecewiseLinearSpec.relu(np.full(6, 1e6)))
    for rep in (find_all_fixed_points(m), brute_force_fixed_points(m)):
        assert len(rep.points) == 1
        np.testing.assert_array_equal(rep.points[0].z, 0.0)


def test_brute_force_guard(rng):
    with pytest.raises(ValueError):
        brute_force_fixed_points(random_model(rng, N=11, R=2, D=2))


def test_no_leak_rejected():
    with pytest.raises(ValueError):
        find_all_fixed_points(scalar_net().replace(a=1.0))


def test_rank_deficient_reported(rng):
    m = random_model(rng, N=6, R=2)
    M = m.M.copy()
    M[:, 1] = 2 * M[:, 0]
    m = m.replace(M=M)
    rep = find_all_fixed_points(m)
    assert rep.rank_deficient
    assert match_point_sets(rep.zs(), brute_force_fixed_points(m).zs(), atol=1e-8)


def test_concurrent_arrangement_exact():
    # every hyperplane through the origin: the pseudoinverse sweep is needed
    r = np.random.default_rng(3)
    ang = r.uniform(0, np.pi, 6)
    M = np.stack([np.cos(ang), np.sin(ang)], 1)
    m = random_model(r, N=6, R=2).replace(M=M, activation=PiecewiseLinearSpec.relu(np.zeros(6)))
    assert match_point_sets(find_all_fixed_points(m).zs(), brute_force_fixed_points(m).zs(), atol=1e-8)


def test_report_serialisation(rng):
    rep = find_all_fixed_points(random_model(rng, N=8, R=2))
    d = rep.to_dict()
    assert len(d["points"]) == len(rep.points) == len(rep.rows())
    assert d["bound"] == region_bound(8, 2)


def _simulate(m, z0, T=100.0, dt=0.01):
    z = np.array(z0, float)
    out = [z.copy()]
    for _ in range(int(T / dt)):
        z = z + dt * vector_field(m.M, m.N_cont, m.activation, z)
        out.append(z.copy())
    return np.array(out)


def test_stability_labels_match_simulation():
    checked = {"stable": 0, "unstable": 0, "saddle": 0}
    for seed in range(30):
        r = np.random.default_rng(seed)
        m = random_model(r, N=8, R=2)
        for p in find_all_fixed_points(m).points:
            if p.boundary or p.stability not in checked:
                continue
            # keep the perturbation inside the fixed point's region
            margin = np.min(np.abs(m.M @ p.z - m.activation.thresholds[:, 0]))
            eps = min(1e-4, 0.1 * margin)
            u = r.normal(size=2)
            z0 = p.z + eps * u / np.linalg.norm(u)
            traj = _simulate(m, z0)     # time in units of tau
            dist = np.linalg.norm(traj - p.z, axis=1)
            if p.stability == "stable":
                assert dist[-1] < dist[0]
            else:
                # a generic direction has a component along an unstable eigenvector
                assert dist.max() > 10 * dist[0]
            checked[p.stability] += 1
    assert checked["stable"] >= 5 and checked["unstable"] + checked["saddle"] >= 5, checked


# -- approximate search -------------------------------------------------

@pytest.mark.parametrize("mode", ["uniform", "constrained"])
def test_scalar_search_finds_both(mode):
    for seed in range(20):
        res = approximate_search(scalar_net(), restarts=4, init_mode=mode, rng=np.random.default_rng(seed))
        np.testing.assert_allclose(_sorted(res.report.zs()).ravel(), [0.0, 2.0], atol=1e-12)


@pytest.mark.parametrize("mode", ["uniform", "constrained"])
def test_search_subset_of_exact(mode):
    for seed in range(10):
        r = np.random.default_rng(seed)
        m = random_model(r, N=10, R=2)
        exact = find_all_fixed_points(m).zs()
        res = approximate_search(m, restarts=20, init_mode=mode, rng=r)
        for z in res.report.zs():
            assert np.min(np.linalg.norm(exact - z, axis=1)) < 1e-8
        used = [u for u, _ in res.trace]
        assert used == sorted(used) and res.n_inverses == used[-1]


def test_search_budget_respected(rng):
    m = random_model(rng, N=10, R=2)
    res = approximate_search(m, restarts=1000, budget=17, rng=rng)
    assert res.n_inverses <= 17


def test_search_unknown_mode(rng):
    with pytest.raises(ValueError):
        approximate_search(scalar_net(), init_mode="greedy", rng=rng)
