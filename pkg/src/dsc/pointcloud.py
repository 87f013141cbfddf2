"""Point-cloud containers, KITTI odometry I/O, synthetic scenes and perturbations.

Clouds are held as ``(N, 3)`` float64 arrays. KITTI velodyne scans store
four little-endian float32 values per point ``(x, y, z, intensity)``; the
intensity channel is dropped on load.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi
_KITTI_RECORD = np.dtype("<f4")


class PointCloudError(ValueError):
    """Raised for malformed point-cloud or pose inputs."""


@dataclass(frozen=True)
class PointCloud:
    """One LiDAR frame.

    Attributes:
        points: ``(N, 3)`` float64 array of finite coordinates in meters.
        frame_id: Non-negative frame index within its sequence.
        timestamp: Acquisition time in seconds.
    """

    points: np.ndarray
    frame_id: int = 0
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise PointCloudError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise PointCloudError("point cloud contains non-finite coordinates")
        if self.frame_id < 0:
            raise PointCloudError(f"frame_id must be non-negative, got {self.frame_id}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, frame_id=self.frame_id, timestamp=self.timestamp)


@dataclass(frozen=True)
class PoseStamped:
    """Rigid sensor pose with a timestamp."""

    rotation: np.ndarray
    translation: np.ndarray
    timestamp: float = 0.0
    tol: float = field(default=1e-6, repr=False, compare=False)

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise PointCloudError("pose contains non-finite values")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > self.tol:
            raise PointCloudError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > self.tol:
            raise PointCloudError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)


def azimuth(xy: np.ndarray) -> np.ndarray:
    """Full-quadrant azimuth of ``(..., 2+)`` coordinates, normalized to ``[0, 2*pi)``."""
    xy = np.asarray(xy, dtype=np.float64)
    theta = np.arctan2(xy[..., 1], xy[..., 0])
    theta = np.where(theta < 0.0, theta + TWO_PI, theta)
    # -tiny + 2*pi rounds to 2*pi
    return np.where(theta >= TWO_PI, 0.0, theta)


# ----------------------------------------------------------------------------
# KITTI odometry
# ----------------------------------------------------------------------------


def load_kitti_bin(path: str | os.PathLike, frame_id: int = 0, timestamp: float = 0.0) -> PointCloud:
    """Read a KITTI velodyne ``.bin`` scan.

    Raises:
        FileNotFoundError: if ``path`` does not exist.
        PointCloudError: if the size is not a multiple of 16 bytes or a
            coordinate is not finite.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"velodyne scan not found: {path}")
    size = path.stat().st_size
    if size % 16:
        raise PointCloudError(f"{path}: size {size} is not a multiple of 16 bytes")
    raw = np.fromfile(path, dtype=_KITTI_RECORD).reshape(-1, 4)
    xyz = raw[:, :3]
    if not np.all(np.isfinite(xyz)):
        raise PointCloudError(f"{path}: non-finite coordinates")
    return PointCloud(xyz.astype(np.float64), frame_id=frame_id, timestamp=timestamp)


def save_kitti_bin(cloud: PointCloud, path: str | os.PathLike, intensity: float = 0.0) -> None:
    """Write ``cloud`` in KITTI velodyne layout with a constant intensity."""
    out = np.empty((len(cloud), 4), dtype=_KITTI_RECORD)
    out[:, :3] = cloud.points
    out[:, 3] = intensity
    Path(path).write_bytes(out.tobytes())


def _read_rows(path: Path) -> list[list[str]]:
    with open(path) as fh:
        return [line.split() for line in fh if line.strip()]


def load_poses_and_times(
    pose_path: str | os.PathLike, times_path: str | os.PathLike, tol: float = 1e-5
) -> list[PoseStamped]:
    """Load KITTI ground-truth poses (12 reals per line) and timestamps.

    ``tol`` bounds the orthonormality residual; KITTI files print six
    significant digits, so the default is looser than the in-memory check.
    """
    pose_rows = _read_rows(Path(pose_path))
    time_rows = _read_rows(Path(times_path))
    if len(pose_rows) != len(time_rows):
        raise PointCloudError(
            f"pose/time count mismatch: {len(pose_rows)} poses vs {len(time_rows)} times"
        )
    poses = []
    for lineno, (prow, trow) in enumerate(zip(pose_rows, time_rows), start=1):
        if len(prow) != 12 or len(trow) != 1:
            raise PointCloudError(f"malformed pose/time at line {lineno}")
        try:
            mat = np.array([float(v) for v in prow]).reshape(3, 4)
            stamp = float(trow[0])
        except ValueError as exc:
            raise PointCloudError(f"malformed number at line {lineno}: {exc}") from None
        poses.append(PoseStamped(mat[:, :3], mat[:, 3], stamp, tol=tol))
    return poses


def write_poses_and_times(
    poses: Sequence[PoseStamped], pose_path: str | os.PathLike, times_path: str | os.PathLike
) -> None:
    with open(pose_path, "w") as fh:
        for p in poses:
            mat = np.hstack([p.rotation, p.translation[:, None]]).ravel()
            fh.write(" ".join(repr(float(v)) for v in mat) + "\n")
    with open(times_path, "w") as fh:
        for p in poses:
            fh.write(f"{float(p.timestamp)!r}\n")


def sequence_scans(seq_dir: str | os.PathLike) -> list[Path]:
    """Sorted ``velodyne/*.bin`` paths of a KITTI sequence directory."""
    seq_dir = Path(seq_dir)
    scan_dir = seq_dir / "velodyne" if (seq_dir / "velodyne").is_dir() else seq_dir
    return sorted(scan_dir.glob("*.bin"))


# ----------------------------------------------------------------------------
# Perturbations
# ----------------------------------------------------------------------------


def rotate_z(cloud: PointCloud, angle: float) -> PointCloud:
    """Rotate every point by ``angle`` radians about the z axis."""
    if not np.isfinite(angle):
        raise PointCloudError("rotation angle must be finite")
    c, s = np.cos(angle), np.sin(angle)
    pts = cloud.points
    out = np.empty_like(pts)
    out[:, 0] = pts[:, 0] * c - pts[:, 1] * s
    out[:, 1] = pts[:, 0] * s + pts[:, 1] * c
    out[:, 2] = pts[:, 2]
    return cloud.with_points(out)


def occlude_sector(cloud: PointCloud, start: float, extent: float) -> PointCloud:
    """Drop points whose azimuth lies in ``[start, start + extent)`` (wrapping at 2*pi)."""
    if not 0.0 <= extent <= TWO_PI:
        raise PointCloudError(f"extent must lie in [0, 2*pi], got {extent}")
    if extent == 0.0:
        return cloud
    if extent == TWO_PI:
        return cloud.with_points(np.empty((0, 3)))
    rel = np.mod(azimuth(cloud.points) - np.mod(start, TWO_PI), TWO_PI)
    return cloud.with_points(cloud.points[rel >= extent])


# ----------------------------------------------------------------------------
# Synthetic scenes
# ----------------------------------------------------------------------------


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64).reshape(3, 3)
    scale = max(1.0, float(np.max(np.abs(cov))))
    if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
        raise PointCloudError("covariance is not symmetric")
    w, v = np.linalg.eigh(cov)
    if w[0] < -1e-12 * scale:
        raise PointCloudError("covariance is not positive semi-definite")
    return v * np.sqrt(np.clip(w, 0.0, None))


def synth_scene(
    blobs: Iterable[tuple[Sequence[float], np.ndarray, int]],
    seed: int,
    frame_id: int = 0,
    timestamp: float = 0.0,
) -> PointCloud:
    """Sample Gaussian blobs ``(center, covariance, count)`` with a seeded generator."""
    rng = np.random.default_rng(seed)
    chunks = []
    for center, cov, count in blobs:
        factor = _psd_factor(cov)
        if count < 0:
            raise PointCloudError("blob count must be non-negative")
        z = rng.standard_normal((int(count), 3))
        chunks.append(z @ factor.T + np.asarray(center, dtype=np.float64))
    pts = np.vstack(chunks) if chunks else np.empty((0, 3))
    return PointCloud(pts, frame_id=frame_id, timestamp=timestamp)


def derive_seed(seed: int, name: str) -> int:
    """Deterministically split a top-level seed into a per-subsystem seed."""
    key = [int(b) for b in name.encode()]
    return int(np.random.SeedSequence([int(seed), *key]).generate_state(1, dtype=np.uint32)[0])
