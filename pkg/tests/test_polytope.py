import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaugempc.optim import finite_diff_grad
from gaugempc.polytope import (
    EmptyPolytopeError,
    NotCSetError,
    Polytope,
    certify_rci,
    chebyshev,
    contains_polytope,
    gauge,
    gauge_map,
    gauge_map_vjp,
    rci_iterate,
    remove_redundancy,
    sample_uniform,
    tighten,
)
from oracles import polygon_vertices


def random_cset(rng, n, extra=None):
    k = extra if extra is not None else 2 * n + 2
    F = rng.normal(size=(k, n))
    g = rng.uniform(0.2, 2.0, k)
    # a loose box keeps it bounded
    F = np.vstack([F, np.eye(n), -np.eye(n)])
    g = np.concatenate([g, rng.uniform(2.0, 5.0, 2 * n)])
    return Polytope(F, g)


def random_point_in(P, rng, level=None):
    d = rng.normal(size=P.dim)
    t = rng.uniform(0, 1) if level is None else level
    return t * d / gauge(P, d)


seeds = st.integers(min_value=0, max_value=2**31 - 1)


def test_gauge_inf_ball():
    assert gauge(Polytope.inf_ball(2), [0.5, -0.25]) == pytest.approx(0.5)


def test_gauge_zero():
    rng = np.random.default_rng(0)
    assert gauge(random_cset(rng, 3), np.zeros(3)) == 0.0


def test_gauge_box():
    P = Polytope.box([-2, -1], [2, 1])
    assert gauge(P, [1, 1]) == pytest.approx(1.0)


def test_gauge_rejects_non_cset():
    P = Polytope.box([0, 0], [1, 1])
    with pytest.raises(NotCSetError):
        gauge(P, [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(min_value=0, max_value=10))
def test_gauge_positive_homogeneity(seed, a):
    rng = np.random.default_rng(seed)
    P = random_cset(rng, 4)
    v = rng.normal(size=4)
    assert gauge(P, a * v) == pytest.approx(a * gauge(P, v), rel=1e-12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_gauge_sublevel_is_membership(seed):
    rng = np.random.default_rng(seed)
    P = random_cset(rng, 3)
    v = rng.normal(size=3) * rng.uniform(0.1, 4.0)
    assert (gauge(P, v) <= 1 + 1e-12) == P.contains_point(v, tol=1e-12 * np.max(P.g))


def test_gauge_map_identity():
    rng = np.random.default_rng(1)
    P = random_cset(rng, 3)
    v = random_point_in(P, rng)
    np.testing.assert_allclose(gauge_map(P, P, v), v, atol=1e-15)


def test_gauge_map_scaling():
    np.testing.assert_allclose(gauge_map(Polytope.inf_ball(2), Polytope.inf_ball(2, 2.0), [1.0, 0.0]), [2.0, 0.0])


def test_gauge_map_zero():
    P = Polytope.inf_ball(3)
    np.testing.assert_array_equal(gauge_map(P, P.scaled(3), np.zeros(3)), np.zeros(3))


def test_gauge_map_rejects_outside():
    with pytest.raises(ValueError):
        gauge_map(Polytope.inf_ball(2), Polytope.inf_ball(2), [1.5, 0.0])


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(min_value=2, max_value=10))
def test_gauge_map_round_trip_and_level_sets(seed, n):
    rng = np.random.default_rng(seed)
    P, Q = random_cset(rng, n), random_cset(rng, n)
    v = random_point_in(P, rng)
    out = gauge_map(P, Q, v)
    assert gauge(Q, out) == pytest.approx(gauge(P, v), abs=1e-12)
    assert gauge(Q, out) <= 1 + 1e-12
    back = gauge_map(Q, P, out)
    assert np.max(np.abs(back - v)) < 1e-9


def test_gauge_map_vjp_identity():
    rng = np.random.default_rng(2)
    P = random_cset(rng, 3)
    v = random_point_in(P, rng)
    u = rng.normal(size=3)
    np.testing.assert_allclose(gauge_map_vjp(P, P, v, u), u, atol=1e-14)


def _check_vjp_fd(P, Q, v, rng, rel):
    u = rng.normal(size=v.size)
    analytic = gauge_map_vjp(P, Q, v, u)
    fd = finite_diff_grad(lambda z: u @ gauge_map(P, Q, z), v, eps=1e-7)
    assert np.linalg.norm(analytic - fd) <= rel * np.linalg.norm(fd)


def test_gauge_map_vjp_scaling_fd():
    rng = np.random.default_rng(3)
    v = np.array([0.3, -0.1])
    P, Q = Polytope.inf_ball(2), Polytope.inf_ball(2, 2.0)
    u = np.array([1.0, -2.0])
    np.testing.assert_allclose(gauge_map_vjp(P, Q, v, u), 2 * u)
    _check_vjp_fd(P, Q, v, rng, 1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_gauge_map_vjp_random_fd(seed):
    rng = np.random.default_rng(seed)
    P, Q = random_cset(rng, 4), random_cset(rng, 4)
    v = random_point_in(P, rng, level=rng.uniform(0.2, 0.9))
    _check_vjp_fd(P, Q, v, rng, 1e-4)


def test_tighten_box():
    T = tighten(Polytope.inf_ball(3, 5.0), Polytope.inf_ball(3, 0.1))
    np.testing.assert_allclose(T.g, 4.9 * np.ones(6), atol=1e-8)


def test_tighten_point_disturbance():
    S = Polytope.inf_ball(3, 5.0)
    T = tighten(S, Polytope.box(np.zeros(3), np.zeros(3)))
    np.testing.assert_allclose(T.g, S.g, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_tighten_matches_vertex_oracle(seed):
    rng = np.random.default_rng(seed)
    S = random_cset(rng, 2)
    D = random_cset(rng, 2).scaled(0.1)
    V = polygon_vertices(np.array(D.F), np.array(D.g))
    T = tighten(S, D)
    expected = S.g - np.max(S.F @ V.T, axis=1)
    np.testing.assert_allclose(T.g, expected, atol=1e-8)
    assert np.all(T.g <= S.g)


def test_chebyshev_unit_box():
    c = chebyshev(Polytope.inf_ball(3))
    np.testing.assert_allclose(c.center, 0, atol=1e-8)
    assert c.radius == pytest.approx(1.0, abs=1e-8)
    assert c.bounded


def test_chebyshev_unbounded_flag():
    P = Polytope([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]], [1.0, 1.0, 1.0])
    assert not chebyshev(P).bounded


def test_chebyshev_empty():
    P = Polytope([[1.0], [-1.0]], [-1.0, -1.0])
    assert chebyshev(P).radius == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_chebyshev_center_slack(seed):
    rng = np.random.default_rng(seed)
    P = random_cset(rng, 3)
    cert = chebyshev(P)
    slack = P.g - P.F @ cert.center
    assert np.all(slack >= cert.radius * np.linalg.norm(P.F, axis=1) - 1e-8)


def test_contains_boundary():
    assert Polytope.inf_ball(3, 5.0).contains_point([5, 5, 5], 1e-9)
    assert not Polytope.inf_ball(3, 5.0).contains_point([5, 5, 5.001], 1e-9)


def test_bounding_box():
    lo, hi = Polytope.box([-1, 0], [2, 3]).bounding_box()
    np.testing.assert_allclose(lo, [-1, 0], atol=1e-8)
    np.testing.assert_allclose(hi, [2, 3], atol=1e-8)


def test_sample_uniform_box():
    Z = sample_uniform(Polytope.inf_ball(3), 10_000, seed=0)
    assert Z.shape == (10_000, 3)
    assert np.all(np.abs(Z) <= 1)
    assert np.all(np.abs(Z.mean(axis=0)) < 0.05)


def test_sample_uniform_empty_count():
    assert sample_uniform(Polytope.inf_ball(2), 0, seed=0).shape == (0, 2)


def test_sample_uniform_deterministic():
    P = Polytope.inf_ball(2)
    np.testing.assert_array_equal(sample_uniform(P, 50, seed=3), sample_uniform(P, 50, seed=3))


def test_sample_uniform_thin_set_aborts():
    # a sliver of width 1e-9 along the diagonal of the unit box
    sliver = Polytope.inf_ball(3).intersect(Polytope([[1.0, -1.0, 0.0], [-1.0, 1.0, 0.0]], [1e-9, 1e-9]))
    with pytest.raises(ValueError):
        sample_uniform(sliver, 10, seed=0)


def test_remove_redundancy():
    P = Polytope(np.vstack([np.eye(2), -np.eye(2), [[1.0, 1.0]], [[2.0, 0.0]]]), [1, 1, 1, 1, 5, 2.0])
    R = remove_redundancy(P)
    assert R.nrows == 4
    assert contains_polytope(R, P) and contains_polytope(P, R)


def test_serialization_round_trip():
    rng = np.random.default_rng(0)
    P = random_cset(rng, 3)
    assert Polytope.from_json(P.to_json()) == P


def test_immutable():
    P = Polytope.inf_ball(2)
    with pytest.raises(ValueError):
        P.F[0, 0] = 3.0
    with pytest.raises(AttributeError):
        P.g = np.zeros(4)


def test_rci_scalar_one_step_controllable():
    X = Polytope.box([-1], [1])
    res = rci_iterate(X, Polytope.box([-1], [1]), Polytope.box([0], [0]), [[0.5]], [[1.0]])
    assert res.converged
    assert contains_polytope(res.polytope, X) and contains_polytope(X, res.polytope)
    samples = sample_uniform(res.polytope, 50, seed=0)
    assert np.all(certify_rci(res.polytope, Polytope.box([-1], [1]), Polytope.box([0], [0]),
                              [[0.5]], [[1.0]], samples) <= 1e-9)


def test_rci_disturbance_too_large():
    X = Polytope.box([-1, -1], [1, 1])
    with pytest.raises(EmptyPolytopeError):
        rci_iterate(X, Polytope.box([-1], [1]), Polytope.inf_ball(2, 1.5), np.eye(2), [[1.0], [0.0]])
