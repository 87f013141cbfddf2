import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsc.pointcloud import (
    TWO_PI,
    PointCloud,
    PointCloudError,
    PoseStamped,
    azimuth,
    load_kitti_bin,
    load_poses_and_times,
    occlude_sector,
    rotate_z,
    save_kitti_bin,
    synth_scene,
)

coords = st.floats(-80, 80, allow_nan=False)
clouds = st.lists(st.tuples(coords, coords, coords), min_size=0, max_size=40).map(
    lambda pts: PointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3))
)


def test_single_record(tmp_path):
    path = tmp_path / "one.bin"
    path.write_bytes(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
    cloud = load_kitti_bin(path)
    np.testing.assert_array_equal(cloud.points, [[1.0, 2.0, 3.0]])


def test_empty_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    assert len(load_kitti_bin(path)) == 0


def test_point_count_is_size_over_16(tmp_path):
    rng = np.random.default_rng(3)
    raw = rng.normal(size=(1234, 4)).astype("<f4")
    path = tmp_path / "scan.bin"
    path.write_bytes(raw.tobytes())
    assert len(load_kitti_bin(path)) == path.stat().st_size // 16


def test_bad_size_and_missing(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\0" * 17)
    with pytest.raises(PointCloudError):
        load_kitti_bin(path)
    with pytest.raises(FileNotFoundError):
        load_kitti_bin(tmp_path / "nope.bin")


def test_non_finite_rejected(tmp_path):
    path = tmp_path / "nan.bin"
    path.write_bytes(struct.pack("<4f", 1.0, float("nan"), 0.0, 0.0))
    with pytest.raises(PointCloudError):
        load_kitti_bin(path)


def test_reserialization_reproduces_xyz_bytes(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.normal(scale=30, size=(500, 4)).astype("<f4")
    src = tmp_path / "a.bin"
    src.write_bytes(raw.tobytes())
    out = tmp_path / "b.bin"
    save_kitti_bin(load_kitti_bin(src), out)
    back = np.frombuffer(out.read_bytes(), dtype="<f4").reshape(-1, 4)
    assert back[:, :3].tobytes() == raw[:, :3].tobytes()


def test_pose_line(tmp_path):
    (tmp_path / "p.txt").write_text("1 0 0 5 0 1 0 0 0 0 1 0\n")
    (tmp_path / "t.txt").write_text("2.5\n")
    (pose,) = load_poses_and_times(tmp_path / "p.txt", tmp_path / "t.txt")
    np.testing.assert_array_equal(pose.rotation, np.eye(3))
    np.testing.assert_array_equal(pose.translation, [5, 0, 0])
    assert pose.timestamp == 2.5


def test_pose_count_mismatch(tmp_path):
    (tmp_path / "p.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n" * 3)
    (tmp_path / "t.txt").write_text("0\n1\n")
    with pytest.raises(PointCloudError, match="mismatch"):
        load_poses_and_times(tmp_path / "p.txt", tmp_path / "t.txt")


def test_pose_malformed(tmp_path):
    (tmp_path / "p.txt").write_text("1 0 0 0 0 1 0 0 0 0 1\n")
    (tmp_path / "t.txt").write_text("0\n")
    with pytest.raises(PointCloudError):
        load_poses_and_times(tmp_path / "p.txt", tmp_path / "t.txt")


def test_full_sequence_length(tmp_path):
    rng = np.random.default_rng(1)
    lines, times = [], []
    for n in range(57):
        c, s = np.cos(n * 0.1), np.sin(n * 0.1)
        mat = np.array([[c, -s, 0, n], [s, c, 0, 2 * n], [0, 0, 1, 0]])
        lines.append(" ".join(f"{v:.9e}" for v in mat.ravel()))
        times.append(f"{n * 0.1 + rng.uniform(0, 0.01):.6f}")
    (tmp_path / "p.txt").write_text("\n".join(lines) + "\n")
    (tmp_path / "t.txt").write_text("\n".join(times) + "\n")
    assert len(load_poses_and_times(tmp_path / "p.txt", tmp_path / "t.txt")) == 57


def test_pose_rejects_non_rotation():
    with pytest.raises(PointCloudError):
        PoseStamped(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_rotate_quarter_turn():
    out = rotate_z(PointCloud(np.array([[1.0, 0.0, 0.0]])), np.pi / 2)
    np.testing.assert_allclose(out.points, [[0.0, 1.0, 0.0]], atol=1e-15)


@given(clouds)
def test_rotate_zero_is_identity(cloud):
    np.testing.assert_array_equal(rotate_z(cloud, 0.0).points, cloud.points)


@given(clouds, st.floats(-10, 10))
def test_rotate_inverse(cloud, theta):
    back = rotate_z(rotate_z(cloud, theta), -theta)
    np.testing.assert_allclose(back.points, cloud.points, rtol=0, atol=1e-12)


@given(clouds, st.floats(-10, 10))
def test_rotate_preserves_geometry(cloud, theta):
    out = rotate_z(cloud, theta)
    assert len(out) == len(cloud)
    np.testing.assert_array_equal(out.points[:, 2], cloud.points[:, 2])
    d0 = np.linalg.norm(cloud.points[:, None] - cloud.points[None], axis=2)
    d1 = np.linalg.norm(out.points[:, None] - out.points[None], axis=2)
    np.testing.assert_allclose(d1, d0, atol=1e-9)


def test_rotate_keeps_metadata():
    c = PointCloud(np.ones((2, 3)), frame_id=4, timestamp=1.5)
    out = rotate_z(c, 1.0)
    assert (out.frame_id, out.timestamp) == (4, 1.5)
    with pytest.raises(PointCloudError):
        rotate_z(c, float("inf"))


def _at_degrees(*angles):
    rad = np.radians(angles)
    return PointCloud(np.column_stack([np.cos(rad), np.sin(rad), np.zeros(len(rad))]))


def test_occlusion_example():
    out = occlude_sector(_at_degrees(10, 25, 50), np.radians(10), np.radians(30))
    np.testing.assert_allclose(out.points, _at_degrees(50).points)


def test_occlusion_extremes():
    c = _at_degrees(0, 90, 180, 270, 359)
    np.testing.assert_array_equal(occlude_sector(c, 1.0, 0.0).points, c.points)
    assert len(occlude_sector(c, 1.0, TWO_PI)) == 0


def test_occlusion_wraps():
    out = occlude_sector(_at_degrees(5, 100, 350), np.radians(340), np.radians(30))
    np.testing.assert_allclose(out.points, _at_degrees(100).points, atol=1e-15)


@given(clouds, st.floats(-10, 10), st.floats(0, TWO_PI))
def test_occlusion_is_subsequence(cloud, start, extent):
    out = occlude_sector(cloud, start, extent)
    theta = azimuth(cloud.points)
    rel = np.mod(theta - np.mod(start, TWO_PI), TWO_PI)
    keep = cloud.points[rel >= extent] if 0 < extent < TWO_PI else (cloud.points if extent == 0 else cloud.points[:0])
    np.testing.assert_array_equal(out.points, keep)


def test_synth_scene_empty_and_deterministic():
    assert len(synth_scene([((0, 0, 0), np.eye(3), 0)], seed=1)) == 0
    blobs = [((1, 2, 3), np.diag([1.0, 0.5, 0.1]), 50), ((-5, 0, 1), np.eye(3) * 0.01, 20)]
    a, b = synth_scene(blobs, seed=9), synth_scene(blobs, seed=9)
    assert a.points.tobytes() == b.points.tobytes()
    assert len(a) == 70


def test_synth_scene_leading_eigenvalue():
    cloud = synth_scene([((0, 0, 0), np.diag([1.0, 1e-4, 1e-4]), 10000)], seed=5)
    lead = np.linalg.eigvalsh(np.cov(cloud.points.T, bias=True))[-1]
    assert abs(lead - 1.0) < 0.1


def test_synth_scene_rejects_non_psd():
    with pytest.raises(PointCloudError):
        synth_scene([((0, 0, 0), np.diag([1.0, -1.0, 1.0]), 5)], seed=0)
    with pytest.raises(PointCloudError):
        synth_scene([((0, 0, 0), np.array([[1, 0.5, 0], [0, 1, 0], [0, 0, 1.0]]), 5)], seed=0)


def test_cloud_validation():
    with pytest.raises(PointCloudError):
        PointCloud(np.array([[0.0, np.inf, 0.0]]))
    with pytest.raises(PointCloudError):
        PointCloud(np.zeros((3, 2)))
    assert PointCloud(np.empty((0, 3))).points.shape == (0, 3)
