import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import plane_homography, random_board_views, rot_z

from evcal.errors import DegenerateGeometryError
from evcal.features import CircleFeature
from evcal.homography import apply_homography, estimate_homography, homographies_from_4pts
from evcal.pattern import (
    PatternSpec,
    board_points,
    detect_grid,
    orientation_consistency_check,
    row_angle,
)

K = np.array([[340.0, 0, 173.0], [0, 340.0, 130.0], [0, 0, 1]])
SPEC = PatternSpec()


def test_board_layout():
    L = board_points(SPEC)
    assert L.shape == (36, 3) and np.all(L[:, 2] == 0)
    # circle (i, j) has index i * cols + j; odd columns are shifted by s/2
    np.testing.assert_allclose(L[0], [0, 0, 0])
    np.testing.assert_allclose(L[1], [0.03, 0.015, 0])
    np.testing.assert_allclose(L[9], [0, 0.03, 0])
    np.testing.assert_allclose(L[35], [0.24, 0.09, 0])
    np.testing.assert_allclose(L[34], [0.21, 0.105, 0])
    sym = board_points(PatternSpec(asymmetric=False))
    np.testing.assert_allclose(sym[1], [0.03, 0, 0])


def test_pattern_spec_validation():
    with pytest.raises(ValueError):
        PatternSpec(rows=1)
    with pytest.raises(ValueError):
        PatternSpec(circle_radius=0.02, spacing=0.03)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_homography_exact_on_noiseless_points(seed):
    rng = np.random.default_rng(seed)
    R, t = random_board_views(rng, 1)[0]
    H = plane_homography(K, R, t)
    L = board_points(SPEC)
    img = apply_homography(H, L[:, :2])
    est = estimate_homography(img, L)
    np.testing.assert_allclose(est, H / H[2, 2], rtol=1e-8, atol=1e-8)
    H4 = homographies_from_4pts(L[None, [0, 8, 27, 35], :2], img[None, [0, 8, 27, 35]])[0]
    np.testing.assert_allclose(apply_homography(H4, L[:, :2]), img, atol=1e-7)


def test_homography_degenerate():
    L = board_points(SPEC)
    with pytest.raises(DegenerateGeometryError):
        estimate_homography(L[:3, :2], L[:3])
    col = L[::9]  # first column, collinear
    with pytest.raises(DegenerateGeometryError):
        estimate_homography(col[:, :2] * 100, col)


def _features_for(H, rng, shuffle=True, jitter=0.0, spec=SPEC):
    img = apply_homography(H, board_points(spec)[:, :2]) + rng.normal(0, jitter, (spec.size, 2))
    feats = [CircleFeature(c, 4.0, 0.0, i, i) for i, c in enumerate(img)]
    order = rng.permutation(len(feats)) if shuffle else np.arange(len(feats))
    return [feats[i] for i in order], img


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_detect_grid_recovers_assignment(seed):
    rng = np.random.default_rng(seed)
    R, t = random_board_views(rng, 1, tilt=0.4)[0]
    feats, img = _features_for(plane_homography(K, R, t), rng, jitter=0.3)
    det = detect_grid(feats, SPEC)
    assert det
    for s, f in det.correspondences.items():
        np.testing.assert_allclose(f.center, img[s])


def test_detect_grid_ignores_input_order(rng):
    R, t = random_board_views(rng, 1)[0]
    H = plane_homography(K, R, t)
    a, _ = _features_for(H, np.random.default_rng(1))
    b, _ = _features_for(H, np.random.default_rng(2))
    da, db = detect_grid(a, SPEC), detect_grid(b, SPEC)
    assert [f.pos_cluster for f in da.features] == [f.pos_cluster for f in db.features]


def test_detect_grid_with_clutter(rng):
    R, t = random_board_views(rng, 1, tilt=0.2)[0]
    feats, img = _features_for(plane_homography(K, R, t), rng)
    far = [CircleFeature(np.array([5.0, 5.0]) + rng.uniform(0, 3, 2), 4.0, 0.0, 99, 99)]
    det = detect_grid(feats + far, SPEC)
    assert det and all(f.pos_cluster != 99 for f in det.features)


def test_detect_grid_failures(rng):
    R, t = random_board_views(rng, 1)[0]
    feats, _ = _features_for(plane_homography(K, R, t), rng)
    res = detect_grid(feats[:-1], SPEC)
    assert not res and "features" in res.reason
    scrambled = [CircleFeature(rng.uniform(0, 300, 2), 4.0, 0.0) for _ in range(36)]
    assert not detect_grid(scrambled, SPEC)


def test_mirrored_view_of_default_grid_reverses_columns(rng):
    # the 4 x 9 grid is mirror-symmetric about its middle column, so a
    # mirrored image is a proper view with the column order reversed
    R, t = random_board_views(rng, 1, tilt=0.1)[0]
    H = plane_homography(K, R, t)
    flip = np.diag([-1.0, 1.0, 1.0])
    flip[0, 2] = 346.0
    feats, img = _features_for(flip @ H, rng)
    det = detect_grid(feats, SPEC)
    assert det
    quad = apply_homography(det.homography, board_points(SPEC)[[0, 8, 35, 27], :2])
    x, y = quad[:, 0], quad[:, 1]
    assert np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) > 0  # orientation preserved
    for s, f in det.correspondences.items():
        i, j = divmod(s, SPEC.cols)
        np.testing.assert_allclose(f.center, img[i * SPEC.cols + SPEC.cols - 1 - j])


def test_default_grid_mirror_symmetry():
    L = board_points(SPEC)[:, :2]
    mirrored = np.column_stack([L[:, 0].max() - L[:, 0], L[:, 1]])
    d = np.linalg.norm(mirrored[:, None] - L[None], axis=2).min(axis=1)
    assert d.max() < 1e-12


def test_orientation_consistency(rng):
    R, t = random_board_views(rng, 1, tilt=0.1)[0]
    H = plane_homography(K, R, t)
    a = detect_grid(_features_for(H, rng)[0], SPEC)
    c = np.array([173.0, 130.0])
    Rz = np.eye(3)
    Rz[:2, :2] = rot_z(0.2)[:2, :2]
    T = np.array([[1, 0, c[0]], [0, 1, c[1]], [0, 0, 1]]) @ Rz @ np.array([[1, 0, -c[0]], [0, 1, -c[1]], [0, 0, 1]])
    b = detect_grid(_features_for(T @ H, rng)[0], SPEC)
    assert row_angle(b, a) == pytest.approx(0.2, abs=1e-6)
    assert orientation_consistency_check(b, a, dt=0.1, max_rot_rate=4.0)  # 2 rad/s
    assert not orientation_consistency_check(b, a, dt=0.02, max_rot_rate=4.0)  # 10 rad/s
