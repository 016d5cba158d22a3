import numpy as np
import pytest

from evcal.camera import project
from evcal.errors import EvcalError
from evcal.events import save_events
from evcal.geometry import quat_to_rot, rot_to_quat
from evcal.pattern import PatternSpec, board_points
from evcal.spline import KnotVector, SplineSegment
from evcal.synthetic import (
    NoiseConfig,
    SyntheticScene,
    circle_visibility,
    default_intrinsics,
    default_scene,
    generate,
    look_at_pose,
)
from evcal.trajectory import write_pose_log

SPEC = PatternSpec()
CENTER = np.array([0.12, 0.045, 0.0])


def _linear_scene(velocity, duration=1.0, depth=0.4, look=1.0, **kwargs):
    """Fronto-parallel camera translating with constant ``velocity``;
    ``look = -1`` turns the camera away from the board."""
    p0 = CENTER + [0, 0, -depth]
    q = rot_to_quat(look_at_pose(p0, p0 + [0, 0, look]))
    kv = KnotVector.uniform(0.0, duration, 4)
    cp = np.array([np.r_[p0 + np.asarray(velocity) * duration * i / 3, q] for i in range(4)])
    return SyntheticScene(default_intrinsics(), SPEC, [SplineSegment(kv, cp)], **kwargs)


def test_determinism(tmp_path):
    scene = default_scene(duration=1.0, noise=NoiseConfig(0.5, 0.1, 5.0))
    paths = []
    for i in range(2):
        stream, (t, poses) = generate(scene, 50_000, 1.0, seed=11)
        paths.append((tmp_path / f"e{i}.evb", tmp_path / f"g{i}.txt"))
        save_events(paths[-1][0], stream)
        write_pose_log(paths[-1][1], t, poses)
    for a, b in zip(*paths):
        assert a.read_bytes() == b.read_bytes()
    other, _ = generate(scene, 50_000, 1.0, seed=12)
    assert len(other) != len(stream) or not np.array_equal(other.t, stream.t)


def test_bounds_and_pose_log():
    scene = default_scene(duration=2.0, noise=NoiseConfig(1.0, 0.2, 20.0))
    stream, (t, poses) = generate(scene, 80_000, 2.0, seed=1)
    assert len(stream) > 50_000
    assert stream.x.min() >= 0 and stream.x.max() <= 345
    assert stream.y.min() >= 0 and stream.y.max() <= 259
    assert np.all(np.diff(stream.t) >= 0) and stream.t.min() >= 0
    assert set(np.unique(stream.p)) == {-1, 1}
    np.testing.assert_array_equal(t, np.arange(0, 2_000_001, 1000))
    np.testing.assert_allclose(np.linalg.norm(poses[:, 3:], axis=1), 1.0)


def test_zero_duration_and_out_of_view():
    stream, (t, poses) = generate(default_scene(duration=1.0), 10_000, 0.0)
    assert len(stream) == 0 and t.size == 0 and poses.shape == (0, 7)
    away = _linear_scene([0, 0, 0], look=-1.0)  # board behind the camera
    with pytest.raises(EvcalError):
        generate(away, 10_000, 1.0)


def test_scene_keeps_half_the_circles_in_view():
    scene = default_scene(duration=10.0)
    uv, inside = circle_visibility(scene, np.linspace(0, 10, 2001))
    assert inside.mean(axis=1).min() >= 0.5


def test_static_camera_emits_no_signal():
    stream, _ = generate(_linear_scene([0, 0, 0]), 50_000, 1.0, seed=2)
    assert len(stream) == 0
    stream, _ = generate(_linear_scene([0, 0, 0], noise=NoiseConfig(clutter_fraction=0.05)), 50_000, 1.0, seed=2)
    assert 0 < len(stream) < 0.07 * 50_000  # clutter only


def test_translation_gives_opposing_polarity_blobs():
    scene = _linear_scene([0.2, 0, 0], quantize=False)
    stream, _ = generate(scene, 200_000, 1.0, seed=3)
    sl = stream.time_slice(400_000, 600_000)
    k = scene.intrinsics
    s = 13  # an interior circle
    # its image centre at each event time (the camera moves along +x)
    cam = CENTER + [0, 0, -0.4] + np.outer(sl.t * 1e-6, [0.2, 0, 0])
    c = project(k, board_points(SPEC)[s] - cam)
    off = sl.xy - c
    r_px = k.fx * SPEC.circle_radius / 0.4
    near = np.hypot(*off.T) < 1.5 * r_px
    pos = off[near & (sl.p > 0)].mean(axis=0)
    neg = off[near & (sl.p < 0)].mean(axis=0)
    # the camera moves along +x, so the image moves along -x and the leading
    # (darkening) pole is on the -x side
    sep = pos - neg
    assert sep[0] > 0 and abs(sep[1]) < 0.05 * sep[0]
    # pole offsets follow cos^2: the mean boundary point sits at E[cos] r,
    # with r the (distorted) image radius
    mean_cos = 8 / (3 * np.pi)  # int cos^3 / int cos^2 over [-pi/2, pi/2]
    r_img = np.median(np.hypot(*off[near].T))
    assert r_img == pytest.approx(r_px, rel=0.1)
    assert sep[0] == pytest.approx(2 * r_img * mean_cos, rel=0.05)


def _boundary_distance(scene, stream, n=360):
    """Distance of each event to the nearest projected circle boundary."""
    from evcal.synthetic import trajectory_pose

    L = board_points(scene.pattern)
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    ring = scene.pattern.circle_radius * np.column_stack([np.cos(ang), np.sin(ang), 0 * ang])
    B = (L[:, None] + ring[None]).reshape(-1, 3)
    pos, quat = trajectory_pose(scene.trajectory, stream.t * 1e-6)
    out = np.empty(len(stream))
    for i in range(len(stream)):
        uv = project(scene.intrinsics, (B - pos[i]) @ quat_to_rot(quat[i]), strict=False)
        out[i] = np.nanmin(np.hypot(uv[:, 0] - stream.x[i], uv[:, 1] - stream.y[i]))
    return out


def test_events_lie_on_projected_boundaries():
    scene = default_scene(duration=1.0, quantize=False)
    stream, _ = generate(scene, 1_500, 1.0, seed=4)
    assert _boundary_distance(scene, stream).max() < 0.05  # boundary sampling resolution
    sigma = 0.4
    scene = default_scene(duration=1.0, quantize=False, noise=NoiseConfig(pixel_jitter=sigma))
    stream, _ = generate(scene, 1_500, 1.0, seed=4)
    assert np.mean(_boundary_distance(scene, stream) <= 3 * sigma) > 0.99
