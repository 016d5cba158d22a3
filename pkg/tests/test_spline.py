import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import bspline_basis, find_span_linear

from evcal.errors import ConditioningError, DomainError, InfeasibleCalibrationError
from evcal.geometry import quat_to_rot, rot_to_quat
from evcal.spline import (
    KnotVector,
    SplineSegment,
    approximate_segment,
    averaged_knots,
    basis_funs,
    basis_matrix,
    evaluate,
    evaluate_raw,
    find_span,
    group_segments,
    hemisphere_align,
)

knot_vectors = st.builds(
    lambda inner, p: KnotVector.clamped(0.0, 1.0, np.sort(inner), p),
    st.lists(st.floats(0.01, 0.99), min_size=0, max_size=12),
    st.integers(1, 4),
)


@settings(max_examples=60, deadline=None)
@given(kv=knot_vectors, seed=st.integers(0, 2**31 - 1))
def test_partition_of_unity_and_nonnegativity(kv, seed):
    u = np.random.default_rng(seed).uniform(0, 1, 1000)
    u[:2] = [0.0, 1.0]
    N = basis_funs(find_span(u, kv), u, kv)
    assert np.abs(N.sum(axis=1) - 1).max() <= 1e-12
    assert N.min() >= -1e-15


@settings(max_examples=30, deadline=None)
@given(kv=knot_vectors, seed=st.integers(0, 2**31 - 1))
def test_find_span_matches_linear_scan(kv, seed):
    rng = np.random.default_rng(seed)
    u = np.concatenate([rng.uniform(0, 1, 300), kv.knots])
    got = find_span(u, kv)
    want = [find_span_linear(x, kv.knots, kv.degree) for x in u]
    np.testing.assert_array_equal(got, want)
    assert find_span(0.5, kv) == find_span_linear(0.5, kv.knots, kv.degree)


@settings(max_examples=30, deadline=None)
@given(kv=knot_vectors, seed=st.integers(0, 2**31 - 1))
def test_basis_matches_cox_de_boor(kv, seed):
    u = np.random.default_rng(seed).uniform(0, 1, 30)
    B = basis_matrix(u, kv)
    R = np.array([[bspline_basis(i, kv.degree, x, list(kv.knots)) for i in range(kv.n_ctrl)] for x in u])
    np.testing.assert_allclose(B, R, atol=1e-12)


def test_find_span_domain():
    kv = KnotVector.uniform(0.0, 1.0, 6)
    with pytest.raises(DomainError):
        find_span(1.5, kv)
    with pytest.raises(DomainError):
        find_span(np.array([0.2, np.nan]), kv)
    assert find_span(1.0, kv) == kv.n_ctrl - 1


@settings(max_examples=40, deadline=None)
@given(kv=knot_vectors, seed=st.integers(0, 2**31 - 1))
def test_clamped_endpoints_interpolate(kv, seed):
    P = np.random.default_rng(seed).normal(size=(kv.n_ctrl, 7))
    seg = SplineSegment(kv, P)
    np.testing.assert_array_equal(evaluate_raw(seg, 0.0)[2][0], P[0])
    np.testing.assert_array_equal(evaluate_raw(seg, 1.0)[2][0], P[-1])


def test_knot_vector_validation():
    with pytest.raises(ValueError):
        KnotVector(3, np.array([0, 0, 0, 1, 1, 1, 1.0]))  # too short
    with pytest.raises(ValueError):
        KnotVector(1, np.array([0, 0, 0.5, 0.4, 1, 1.0]))  # decreasing
    with pytest.raises(ValueError):
        KnotVector(2, np.array([0, 0, 0.1, 1, 1, 1.0]))  # not clamped at the start
    with pytest.raises(ValueError):
        KnotVector(1, np.array([0, 0, 1, 1.0]) * 0)  # empty domain
    with pytest.raises(ValueError):
        SplineSegment(KnotVector.uniform(0, 1, 5), np.zeros((4, 7)))


def test_evaluate_normalizes_quaternion():
    kv = KnotVector.uniform(0.0, 1.0, 5)
    P = np.zeros((5, 7))
    P[:, 6] = 2.0
    P[:, 0] = np.arange(5)
    pos, quat = evaluate(SplineSegment(kv, P), np.linspace(0, 1, 11))
    np.testing.assert_allclose(np.linalg.norm(quat, axis=1), 1.0)
    P[:, 6] = 0.0
    with pytest.raises(DomainError):
        evaluate(SplineSegment(kv, P), 0.5)


def test_hemisphere_align():
    q = np.array([[0, 0, 0, 1.0], [0, 0, 0, -1.0], [0, 0, 0.1, -0.99]])
    out = hemisphere_align(q)
    assert np.all(np.sum(out[1:] * out[:-1], axis=1) >= 0)
    np.testing.assert_array_equal(np.abs(out), np.abs(q))


def test_group_segments():
    t = np.array([0.0, 0.1, 0.2, 0.3, 0.4, 1.5, 1.6, 3.0, 3.1, 3.2, 3.3, 3.4, 3.5])
    assert group_segments(t, 0.5, min_frames=5) == [(0, 4), (7, 12)]
    assert group_segments(t, 2.0, min_frames=5) == [(0, 12)]
    with pytest.raises(InfeasibleCalibrationError):
        group_segments(t[:4], 0.5, min_frames=5)
    with pytest.raises(ValueError):
        group_segments(t[::-1], 0.5)


def test_averaged_knots_every_span_holds_a_parameter(rng):
    u = np.sort(rng.uniform(0, 5, 40))
    for n_ctrl in (4, 10, 25, 40):
        kv = averaged_knots(u, n_ctrl)
        assert kv.n_ctrl == n_ctrl
        U = kv.knots
        for k in range(kv.degree, n_ctrl):
            if U[k + 1] > U[k]:
                assert np.any((u >= U[k]) & (u <= U[k + 1]))


def test_approximation_reproduces_cubic_motion(rng):
    """Cubic polynomials lie in the spline space, so the least-squares fit
    with pinned ends reproduces them exactly."""
    t = np.sort(rng.uniform(0, 2, 30))
    C = rng.normal(size=(4, 7))
    samples = np.polynomial.polynomial.polyval(t, C).T
    samples[:, 3:] += [0, 0, 0, 5.0]  # keep the quaternion block away from zero
    seg = approximate_segment(t, samples, 3, n_ctrl=12)
    _, _, value = evaluate_raw(seg, t)
    np.testing.assert_allclose(value, samples, atol=1e-9)
    np.testing.assert_allclose(seg.control_points[0], samples[0], atol=0)
    np.testing.assert_allclose(seg.control_points[-1], samples[-1], atol=0)
    assert seg.t_first == t[0] and seg.t_last == t[-1]


def test_approximation_follows_rotations(rng):
    t = np.linspace(0, 1, 25)
    angles = 0.8 * t
    R = np.array([[[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]] for a in angles])
    q = rot_to_quat(R)
    q[::2] *= -1  # sign flips must not matter
    samples = np.column_stack([np.zeros((25, 3)), q])
    seg = approximate_segment(t, samples, 3, n_ctrl=10)
    _, quat = evaluate(seg, t)
    err = np.linalg.norm(quat_to_rot(quat) - R, axis=(1, 2))
    assert err.max() < 1e-3


def test_ill_conditioned_approximation_is_reported(rng):
    # interior samples bunched at one instant cannot determine many control points
    t = np.array([0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 1.0])
    samples = np.column_stack([rng.normal(size=(12, 3)), np.tile([0, 0, 0, 1.0], (12, 1))])
    with pytest.raises(ConditioningError):
        approximate_segment(t, samples, 3, n_ctrl=8)
    # nearly bunched samples pass the support test but are ill-conditioned
    t2 = t + np.r_[0, np.arange(10) * 1e-9, 0]
    with pytest.raises(ConditioningError):
        approximate_segment(t2, samples, 3, n_ctrl=8)
    with pytest.raises(ValueError):
        approximate_segment(t, samples, 3, n_ctrl=13)
    with pytest.raises(ValueError):
        approximate_segment(t, samples, 3, n_ctrl=3)
    spread = np.sort(rng.uniform(0, 1, 12))
    approximate_segment(spread, samples, 3, n_ctrl=6)
