import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import rot_x, rot_z

from evcal.errors import EvcalError
from evcal.trajectory import (
    absolute_trajectory_error,
    align_rigid,
    associate,
    read_pose_log,
    write_pose_log,
)


def test_pose_log_round_trip(tmp_path, rng):
    t = np.arange(0, 50_000, 1000, dtype=np.int64)
    poses = rng.normal(size=(t.size, 7))
    path = tmp_path / "p.txt"
    write_pose_log(path, t, poses)
    assert path.read_text().startswith("# t_us tx ty tz qx qy qz qw\n")
    t2, p2 = read_pose_log(path)
    np.testing.assert_array_equal(t2, t)
    np.testing.assert_array_equal(p2, poses)  # repr() keeps every bit


def test_pose_log_errors(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# header\n0 1 2 3 4 5 6 7\n\n1000 1 2 3\n")
    with pytest.raises(EvcalError, match=":4:"):
        read_pose_log(path)
    path.write_text("0 1 2 3 4 5 6 x\n")
    with pytest.raises(EvcalError, match="non-numeric"):
        read_pose_log(path)
    path.write_text("# only a comment\n")
    t, p = read_pose_log(path)
    assert t.size == 0 and p.shape == (0, 7)


def test_associate_nearest_within_offset():
    t_gt = np.array([0, 1000, 2000, 3000])
    t_est = np.array([-5000, 490, 510, 2999, 9000])
    i, j = associate(t_est, t_gt, max_offset_us=600)
    assert list(i) == [1, 2, 3] and list(j) == [0, 1, 3]
    i, j = associate(t_est, t_gt[::-1], max_offset_us=600)  # unsorted reference
    assert list(j) == [3, 2, 0]
    assert associate([], t_gt)[0].size == 0


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31 - 1))
def test_ate_invariant_to_rigid_transforms(a, b, seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(50, 3))
    R = rot_z(a) @ rot_x(b)
    t = rng.normal(size=3)
    est = gt @ R.T + t
    times = np.arange(50) * 1000
    stats = absolute_trajectory_error(times, est, times, gt)
    assert stats.rmse < 1e-9 and stats.n == 50
    Ra, ta = align_rigid(est, gt)
    np.testing.assert_allclose(Ra, R.T, atol=1e-9)


def test_ate_of_known_offset():
    times = np.arange(8) * 1000
    gt = np.column_stack([np.arange(8.0), np.zeros(8), np.zeros(8)])
    est = gt.copy()
    # Thue-Morse signs: uncorrelated with both 1 and x, so no rigid motion reduces the wiggle
    est[:, 1] += 0.01 * np.array([1, -1, -1, 1, -1, 1, 1, -1])
    stats = absolute_trajectory_error(times, est, times, gt)
    assert stats.rmse == pytest.approx(0.01, rel=1e-6)
    assert stats.median == pytest.approx(0.01, rel=1e-6)
    with pytest.raises(EvcalError):
        absolute_trajectory_error(times + 10**6, est, times, gt)
